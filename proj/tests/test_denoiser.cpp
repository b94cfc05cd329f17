#include "taskdn/denoiser.hpp"
#include "taskdn/rawio.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace taskdn;

namespace {

namespace fs = std::filesystem;

ArchConfig small_arch() {
  ArchConfig a;
  a.in_channels = 3;
  a.height = a.width = 16;
  a.widths = {4, 8};
  return a;
}

LossConfig small_loss(double lambda) {
  LossConfig c;
  c.lambda = lambda;
  c.channels = build_channels(16, {1.0 / 16, 1.0 / 8, 1.0 / 4});
  return c;
}

// Smooth blob on a flat background plus Poisson-like noise on the low copy.
std::vector<TrainingSample> toy_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> u(5.0, 11.0);
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TrainingSample s;
    s.id = "t" + std::to_string(i);
    s.study_id = "S" + std::to_string(i / 2);
    const double cx = u(g), cy = u(g);
    s.normal = Image3D(16, 16, 3);
    s.low = Image3D(16, 16, 3);
    for (std::size_t z = 0; z < 3; ++z)
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
          const double r2 = std::pow(x - cx, 2) + std::pow(y - cy, 2);
          const double v = 2.0 + 8.0 * std::exp(-r2 / 8.0);
          s.normal(x, y, z) = v;
          s.low(x, y, z) = std::max(0.0, v + std::sqrt(v) * noise(g));
        }
    if (i % 2 == 0)
      s.centroid = VoxelCoord{std::lround(cx), std::lround(cy), 1};
    s.canonical_centroids = {VoxelCoord{8, 4, 1}, VoxelCoord{8, 12, 1}};
    s.lv_center = VoxelCoord{8, 8, 1};
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.learning_rate = 3e-3;
  c.seed = 99;
  return c;
}

fs::path temp_dir(const std::string &name) {
  const auto p = fs::temp_directory_path() / ("taskdn_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

} // namespace

TEST_CASE("train config validation and json") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.learning_rate = -1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.beta2 = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.crop = 30;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = TrainConfig{};
  c.epochs = 7;
  c.crop = 32;
  const auto back = nlohmann::json(c).get<TrainConfig>();
  CHECK(back.epochs == 7);
  CHECK(back.crop == 32);
  CHECK(back.beta1 == 0.9);
  CHECK(back.beta2 == 0.999);
  CHECK(back.adam_eps == 1e-8);
}

TEST_CASE("standardization scale is the low-dose mean") {
  Image3D img(2, 2, 1, std::vector<double>{1, 2, 3, 6});
  CHECK(standardization_scale(img) == 3.0);
  CHECK(standardization_scale(Image3D(2, 2, 1)) == 1.0);
}

TEST_CASE("training is deterministic and reduces the loss") {
  const auto data = toy_dataset(12, 1);
  const auto arch = small_arch();
  const auto a = train(data, arch, small_loss(0.5), quick(10));
  const auto b = train(data, arch, small_loss(0.5), quick(10));
  CHECK(a.params == b.params);
  REQUIRE(a.history.size() == 11);
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    REQUIRE(a.history[e].epoch == e);
    REQUIRE(a.history[e].train.total == b.history[e].train.total);
    REQUIRE(a.history[e].val.total == b.history[e].val.total);
    REQUIRE(a.history[e].train.total ==
            Catch::Approx(a.history[e].train.mse + 0.5 * a.history[e].train.channel));
  }
  CHECK(a.history[10].train.total < a.history[0].train.total);
  CHECK(a.history[10].val.total < a.history[0].val.total);
  auto other_seed = quick(10);
  other_seed.seed = 100;
  CHECK_FALSE(train(data, arch, small_loss(0.5), other_seed).params == a.params);
}

TEST_CASE("observer term is smaller when it is weighted in") {
  const auto data = toy_dataset(16, 2);
  const auto arch = small_arch();
  const auto agnostic = train(data, arch, small_loss(0.0), quick(15));
  const auto specific = train(data, arch, small_loss(20.0), quick(15));
  CHECK(agnostic.history.back().train.channel > 0.0);
  CHECK(specific.history.back().train.channel < agnostic.history.back().train.channel);
}

TEST_CASE("training validation errors") {
  const auto arch = small_arch();
  auto data = toy_dataset(4, 3);
  CHECK_THROWS_AS(train({}, {}, arch, small_loss(0), quick(1)), ValidationError);
  auto bad = data;
  bad[0].low = Image3D(16, 16, 2);
  CHECK_THROWS_AS(train(bad, {}, arch, small_loss(0), quick(1)), ValidationError);
  bad = data;
  bad[1].centroid.reset();
  bad[1].canonical_centroids.clear();
  CHECK_THROWS_AS(train(bad, {}, arch, small_loss(0), quick(1)), ValidationError);
  CHECK_THROWS_AS(train(data, {}, arch, small_loss(-1), quick(1)), ValidationError);
  auto wrong_grid = small_loss(0);
  wrong_grid.channels = build_channels(32, {1.0 / 32, 1.0 / 16});
  CHECK_THROWS_AS(train(data, {}, arch, wrong_grid, quick(1)), ValidationError);
  auto crop_too_big = quick(1);
  crop_too_big.crop = 20;
  CHECK_THROWS_AS(train(data, {}, arch, small_loss(0), crop_too_big), ValidationError);
}

TEST_CASE("non-finite data aborts training with a diagnostic") {
  auto data = toy_dataset(4, 4);
  data[0].normal(3, 3, 1) = std::nan("");
  try {
    train(data, {}, small_arch(), small_loss(0), quick(2));
    FAIL("expected a numeric failure");
  } catch (const NumericError &e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("crop training runs on the central window") {
  const auto data = toy_dataset(8, 5);
  auto cfg = quick(3);
  cfg.crop = 8;
  const auto r = train(data, {}, small_arch(), small_loss(1.0), cfg);
  CHECK(r.history.size() == 4);
  CHECK(r.history.back().train.total < r.history.front().train.total);
  const auto out = denoise(r.params, data[0].low);
  CHECK(out.same_shape(data[0].low));
}

TEST_CASE("denoise and ensembles") {
  const auto data = toy_dataset(8, 6);
  const auto r = train(data, {}, small_arch(), small_loss(0), quick(5));
  const auto a = denoise(r.params, data[3].low);
  const auto b = denoise(r.params, data[3].low);
  CHECK(a == b);
  CHECK(a.same_shape(data[3].low));
  for (double v : a.values())
    REQUIRE(v >= 0.0);
  CHECK(denoise_ensemble({r.params}, data[3].low) == a);
  const auto r2 = train(data, {}, small_arch(), small_loss(0), quick(2));
  const auto e = denoise_ensemble({r.params, r2.params}, data[3].low);
  const auto c = denoise(r2.params, data[3].low);
  for (std::size_t i = 0; i < e.size(); ++i)
    REQUIRE(e.values()[i] == Catch::Approx(0.5 * (a.values()[i] + c.values()[i])).margin(1e-12));
  CHECK_THROWS_AS(denoise(r.params, Image3D(16, 16, 4)), ValidationError);
  CHECK_THROWS_AS(denoise_ensemble({}, data[3].low), ValidationError);

  // The standardisation makes the network blind to a global intensity scale.
  auto scaled = data[3].low;
  for (double &v : scaled.values())
    v *= 4.0;
  const auto d4 = denoise(r.params, scaled);
  for (std::size_t i = 0; i < d4.size(); ++i)
    REQUIRE(d4.values()[i] == Catch::Approx(4.0 * a.values()[i]).epsilon(1e-5).margin(1e-6));
}

TEST_CASE("checkpoint roundtrip and failures") {
  const auto dir = temp_dir("ckpt");
  RngStream rng(8, 8);
  const auto p = nn::init_network<float>(small_arch(), rng);
  save_checkpoint(p, dir / "m.tdnw");
  CHECK(load_checkpoint(dir / "m.tdnw") == p);

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.tdnw"), DataError);

  auto bytes = read_file_bytes(dir / "m.tdnw");
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TDNW");
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  write_file_bytes(dir / "t.tdnw", truncated);
  CHECK_THROWS_AS(load_checkpoint(dir / "t.tdnw"), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write_file_bytes(dir / "b.tdnw", bad_magic);
  CHECK_THROWS_AS(load_checkpoint(dir / "b.tdnw"), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  write_file_bytes(dir / "v.tdnw", bad_version);
  CHECK_THROWS_AS(load_checkpoint(dir / "v.tdnw"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("history csv") {
  const auto dir = temp_dir("hist");
  const auto r = train(toy_dataset(6, 7), {}, small_arch(), small_loss(0.5), quick(2));
  write_history_csv(r.history, dir / "h.csv");
  std::ifstream in(dir / "h.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_total,train_mse,train_channel,val_total,val_mse,val_channel");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
    CHECK(std::count(line.begin(), line.end(), ',') == 6);
    ++rows;
  }
  CHECK(rows == 3);
  fs::remove_all(dir);
}
