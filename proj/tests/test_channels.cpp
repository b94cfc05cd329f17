#include "taskdn/channels.hpp"
#include "taskdn/rawio.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

using namespace taskdn;

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += a[i] * b[i];
  return s;
}

// Frequency samples counted over the symmetric integer range [-g/2, g/2).
std::size_t count_band(std::size_t g, double lo, double hi) {
  std::size_t n = 0;
  const long half = static_cast<long>(g / 2);
  for (long j = -half; j < half; ++j)
    for (long i = -half; i < half; ++i) {
      const double rho = std::sqrt(double(i * i + j * j)) / double(g);
      n += (rho >= lo && rho < hi) ? 1 : 0;
    }
  return n;
}

// Real inverse DFT of the band indicator evaluated directly, centred on g/2.
std::vector<double> template_oracle(std::size_t g, double lo, double hi) {
  std::vector<double> t(g * g, 0.0);
  const long half = static_cast<long>(g / 2);
  for (long j = -half; j < half; ++j)
    for (long i = -half; i < half; ++i) {
      const double rho = std::sqrt(double(i * i + j * j)) / double(g);
      if (!(rho >= lo && rho < hi))
        continue;
      for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x)
          t[y * g + x] += std::cos(2 * std::numbers::pi *
                                   (double(i) * (double(x) - half) + double(j) * (double(y) - half)) /
                                   double(g)) /
                          double(g * g);
    }
  const double n = std::sqrt(dot(t, t));
  for (double &v : t)
    v /= n;
  return t;
}

Image2D random_image(std::size_t g, std::mt19937_64 &gen) {
  std::uniform_real_distribution<double> u(-1, 1);
  Image2D img(g, g);
  for (double &v : img.values())
    v = u(gen);
  return img;
}

} // namespace

TEST_CASE("default channel set: orthonormal, no DC response") {
  const auto ch = build_channels(64, default_band_edges());
  REQUIRE(ch.n_channels() == 4);
  for (std::size_t a = 0; a < 4; ++a) {
    CHECK(dot(ch.templates[a], ch.templates[a]) == Catch::Approx(1.0).margin(1e-12));
    for (std::size_t b = a + 1; b < 4; ++b)
      CHECK(std::abs(dot(ch.templates[a], ch.templates[b])) <= 1e-10);
    const auto v = channelize(ch, Image2D(64, 64, 5.0));
    CHECK(std::abs(v[a]) <= 1e-10);
  }
}

TEST_CASE("the lowest default band is empty on a 32-voxel grid") {
  CHECK(band_sample_count(32, 1.0 / 64, 1.0 / 32) == 0);
  CHECK_THROWS_AS(build_channels(32, default_band_edges()), ValidationError);
  CHECK_NOTHROW(build_channels(32, {1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4}));
}

TEST_CASE("edge validation") {
  CHECK_THROWS_AS(build_channels(16, {0.1}), ValidationError);
  CHECK_THROWS_AS(build_channels(16, {0.2, 0.1}), ValidationError);
  CHECK_THROWS_AS(build_channels(16, {0.1, 0.6}), ValidationError);
}

TEST_CASE("templates match a direct inverse DFT") {
  for (std::size_t g : {8u, 16u, 20u}) {
    const std::vector<double> edges{0.06, 0.13, 0.27, 0.45};
    const auto ch = build_channels(g, edges);
    for (std::size_t c = 0; c + 1 < edges.size(); ++c) {
      const auto oracle = template_oracle(g, edges[c], edges[c + 1]);
      for (std::size_t i = 0; i < oracle.size(); ++i)
        REQUIRE(ch.templates[c][i] == Catch::Approx(oracle[i]).margin(1e-12));
    }
  }
}

TEST_CASE("Parseval against brute-force band counting") {
  for (std::size_t g : {32u, 48u, 64u}) {
    const std::vector<double> edges{1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 0.5};
    const auto raw = build_channels(g, edges, false);
    for (std::size_t c = 0; c + 1 < edges.size(); ++c) {
      const std::size_t n = count_band(g, edges[c], edges[c + 1]);
      CHECK(band_sample_count(g, edges[c], edges[c + 1]) == n);
      CHECK(dot(raw.templates[c], raw.templates[c]) ==
            Catch::Approx(double(n) / double(g * g)).epsilon(1e-12));
    }
  }
}

TEST_CASE("templates are symmetric under 180 degree rotation about the midpoint") {
  const auto ch = build_channels(64, default_band_edges());
  for (const auto &t : ch.templates)
    for (long dy = -31; dy <= 31; ++dy)
      for (long dx = -31; dx <= 31; ++dx)
        REQUIRE(t[(32 + dy) * 64 + 32 + dx] == Catch::Approx(t[(32 - dy) * 64 + 32 - dx]).margin(1e-14));
}

TEST_CASE("4x4 single band equals the hand-written template") {
  const auto ch = build_channels(4, {0.2, 0.5});
  // The band keeps the 8 frequencies with components in {-1, 0, 1} except DC,
  // so t(x, y) = (a_x a_y - 1) / 16 with a = (-1, 1, 3, 1), then unit norm.
  const double a[4] = {-1, 1, 3, 1};
  std::vector<double> t(16);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      t[y * 4 + x] = (a[x] * a[y] - 1) / 16.0;
  const double n = std::sqrt(dot(t, t));
  for (double &v : t)
    v /= n;
  const Image2D img(4, 4, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  double expected = 0;
  for (int i = 0; i < 16; ++i)
    expected += t[i] * (i + 1);
  const auto v = channelize(ch, img);
  REQUIRE(v.size() == 1);
  CHECK(v[0] == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("channelize is linear and checks dims") {
  std::mt19937_64 gen(2);
  const auto ch = build_channels(64, default_band_edges());
  for (double v : channelize(ch, Image2D(64, 64)))
    CHECK(v == 0.0);
  const auto f = random_image(64, gen), g = random_image(64, gen);
  Image2D c(64, 64);
  for (std::size_t i = 0; i < c.size(); ++i)
    c.values()[i] = 1.5 * f.values()[i] - 2.0 * g.values()[i];
  const auto vc = channelize(ch, c), vf = channelize(ch, f), vg = channelize(ch, g);
  for (std::size_t k = 0; k < 4; ++k)
    CHECK(vc[k] == Catch::Approx(1.5 * vf[k] - 2.0 * vg[k]).margin(1e-10));
  CHECK_THROWS_AS(channelize(ch, Image2D(32, 32)), ValidationError);
}

TEST_CASE("shifting channels") {
  std::mt19937_64 gen(3);
  const auto ch = build_channels(64, default_band_edges());

  SECTION("midpoint is the identity") {
    const auto s = shift_channels(ch, 32, 32);
    CHECK(s.templates == ch.templates);
    CHECK_FALSE(s.border_truncated);
  }
  SECTION("small interior shifts keep most energy, corner shifts are flagged") {
    CHECK_FALSE(shift_channels(ch, 35, 29).border_truncated);
    CHECK(shift_channels(ch, 1, 1).border_truncated);
    CHECK_THROWS_AS(shift_channels(ch, 64, 3), ValidationError);
  }
  SECTION("compactly supported rows: shifted response equals the oppositely shifted image") {
    ChannelSet local{32, {0.1, 0.2, 0.3}, {std::vector<double>(1024, 0.0), std::vector<double>(1024, 0.0)}, false};
    // Two orthogonal rows on an 8x8 patch around the midpoint.
    for (int y = -4; y < 4; ++y)
      for (int x = -4; x < 4; ++x) {
        local.templates[0][(16 + y) * 32 + 16 + x] = x < 0 ? 1.0 : -1.0;
        local.templates[1][(16 + y) * 32 + 16 + x] = y < 0 ? 1.0 : -1.0;
      }
    for (int trial = 0; trial < 20; ++trial) {
      std::uniform_int_distribution<long> pos(5, 26);
      const long cx = pos(gen), cy = pos(gen);
      const auto img = random_image(32, gen);
      const auto shifted = shift_channels(local, cx, cy);
      CHECK_FALSE(shifted.border_truncated);
      const auto lhs = channelize(shifted, img);
      const auto rhs = channelize(local, acyclic_shift(img, -(cx - 16), -(cy - 16)).image);
      CHECK(lhs == rhs);
      CHECK(dot(shifted.templates[0], shifted.templates[1]) == 0.0);
    }
  }
}

TEST_CASE("roi extraction") {
  Image3D img(64, 64, 8);
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x)
        img(x, y, s) = 1000.0 * s + 64.0 * y + x;

  SECTION("centroid at the grid centre sits on ROI voxel (16, 16)") {
    const auto r = extract_roi(img, 32, 32, 4);
    CHECK_FALSE(r.clamped);
    CHECK(r.slices[1](16, 16) == img(32, 32, 4));
    CHECK(r.slices[0](16, 16) == img(32, 32, 3));
    CHECK(r.slices[2](16, 16) == img(32, 32, 5));
  }
  SECTION("zero padding near the left edge") {
    const auto r = extract_roi(img, 4, 30, 3);
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t x = 0; x < 12; ++x)
        REQUIRE(r.slices[1](x, y) == 0.0);
      REQUIRE(r.slices[1](12, y) == img(0, 30 - 16 + y, 3));
    }
  }
  SECTION("constant image gives an all-ones stack") {
    const auto r = extract_roi(Image3D(64, 64, 8, 1.0), 30, 33, 2);
    for (const auto &s : r.slices)
      for (double v : s.values())
        REQUIRE(v == 1.0);
  }
  SECTION("edge slices are clamped and flagged") {
    const auto r = extract_roi(img, 32, 32, 0);
    CHECK(r.clamped);
    CHECK(r.slices[0](16, 16) == img(32, 32, 0));
    const auto r2 = extract_roi(img, 32, 32, 7);
    CHECK(r2.clamped);
    CHECK(r2.slices[2](16, 16) == img(32, 32, 7));
  }
}

TEST_CASE("roi features embed each slice at the channel-grid centre") {
  std::mt19937_64 gen(4);
  Image3D img(64, 64, 8);
  std::uniform_real_distribution<double> u(0, 10);
  for (double &v : img.values())
    v = u(gen);
  const auto ch = build_channels(64, default_band_edges());
  const auto roi = extract_roi(img, 28, 37, 3);
  const auto f = roi_features(ch, roi);
  REQUIRE(f.size() == 12);
  for (std::size_t k = 0; k < 3; ++k) {
    Image2D canvas(64, 64);
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        canvas(16 + x, 16 + y) = img(28 - 16 + x, 37 - 16 + y, 2 + k);
    const auto v = channelize(ch, canvas);
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(f[k * 4 + c] == Catch::Approx(v[c]).margin(1e-12));
  }
}

TEST_CASE("channel export") {
  const auto ch = build_channels(64, default_band_edges());
  const auto path = std::filesystem::temp_directory_path() / "taskdn_test_channels" / "ch.raw";
  export_channels(ch, path);
  const auto vol = read_image3d(path);
  CHECK(vol.n_slices() == 4);
  const auto meta = read_sidecar(path);
  REQUIRE(meta);
  CHECK(meta->at("grid").get<int>() == 64);
  for (std::size_t i = 0; i < 64 * 64; ++i)
    REQUIRE(vol(i % 64, i / 64, 2) == Catch::Approx(ch.templates[2][i]).epsilon(1e-6));
}
