#include "taskdn/denoiser.hpp"

#include "taskdn/rawio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <map>
#include <numeric>

namespace taskdn {

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || !(learning_rate > 0) || !(beta1 >= 0 && beta1 < 1) ||
      !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0))
    throw ValidationError("TrainConfig: hyperparameters must be positive (betas in [0, 1))");
  if (crop % 4 != 0)
    throw ValidationError("TrainConfig: crop must be a multiple of 4");
  if (!(validation_fraction >= 0 && validation_fraction < 1))
    throw ValidationError("TrainConfig: validation_fraction must lie in [0, 1)");
}

void to_json(nlohmann::json &j, const TrainConfig &c) {
  j = {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
       {"beta1", c.beta1},           {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
       {"seed", c.seed},             {"validation_fraction", c.validation_fraction},
       {"crop", c.crop}};
}

void from_json(const nlohmann::json &j, TrainConfig &c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.seed = j.value("seed", d.seed);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.crop = j.value("crop", d.crop);
}

double standardization_scale(const Image3D &low) {
  const auto v = low.values();
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return mean > 0 ? mean : 1.0;
}

LossTerms loss_eq1(const Image3D &pred, const Image3D &target,
                   const std::optional<VoxelCoord> &centroid, const LossConfig &cfg) {
  if (!pred.same_shape(target))
    throw ValidationError("loss_eq1: prediction and target dims differ");
  if (!centroid && cfg.lambda != 0.0)
    throw ValidationError("loss_eq1: a centroid is required for the channel term");
  const VoxelCoord c = centroid.value_or(VoxelCoord{static_cast<long>(cfg.channels.midpoint()),
                                                    static_cast<long>(cfg.channels.midpoint()),
                                                    static_cast<long>(pred.n_slices() / 2)});
  const auto slices = nn::observer_slices(cfg, static_cast<std::size_t>(std::max(0L, c.slice)),
                                          pred.n_slices());
  const nn::ChannelRows<double> rows(cfg.channels);
  return nn::sample_loss(nn::to_tensor<double>(pred), nn::to_tensor<double>(target), rows, c,
                         slices, cfg.lambda, static_cast<nn::Tensor<double> *>(nullptr), 1.0);
}

namespace {

struct Prepared {
  nn::Tensor<float> low, normal;
  const TrainingSample *src;
};

nn::Tensor<float> crop_tensor(const Image3D &img, double scale, nn::CropOrigin o, std::size_t side) {
  nn::Tensor<float> t(img.n_slices(), side, side);
  for (std::size_t s = 0; s < img.n_slices(); ++s)
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x)
        t.channel(s)[y * side + x] = static_cast<float>(
            img(x + static_cast<std::size_t>(o.x), y + static_cast<std::size_t>(o.y), s) / scale);
  return t;
}

nn::CropOrigin crop_origin(const ArchConfig &arch, std::size_t crop) {
  if (crop == 0)
    return {};
  return {static_cast<long>((arch.width - crop) / 2), static_cast<long>((arch.height - crop) / 2)};
}

std::vector<Prepared> prepare(const std::vector<TrainingSample> &set, const ArchConfig &arch,
                              std::size_t crop) {
  std::vector<Prepared> out;
  out.reserve(set.size());
  const auto origin = crop_origin(arch, crop);
  for (const auto &s : set) {
    if (s.low.n_slices() != arch.in_channels || s.low.height() != arch.height ||
        s.low.width() != arch.width || !s.low.same_shape(s.normal))
      throw ValidationError("train: sample '" + s.id + "' does not match the network input shape");
    if (!s.centroid && s.canonical_centroids.empty())
      throw ValidationError("train: defect-absent sample '" + s.id + "' has no canonical centroids");
    const double k = standardization_scale(s.low);
    if (crop == 0)
      out.push_back({nn::to_tensor<float>(s.low, k), nn::to_tensor<float>(s.normal, k), &s});
    else
      out.push_back({crop_tensor(s.low, k, origin, crop), crop_tensor(s.normal, k, origin, crop), &s});
  }
  return out;
}

VoxelCoord pick_centroid(const TrainingSample &s, const LossConfig &cfg, RngStream rng) {
  if (s.centroid)
    return *s.centroid;
  if (cfg.absent_policy == nn::AbsentCentroidPolicy::lv_center)
    return s.lv_center;
  std::uniform_int_distribution<std::size_t> pick(0, s.canonical_centroids.size() - 1);
  return s.canonical_centroids[pick(rng)];
}

struct Adam {
  nn::Params<float> m, v;
  std::size_t step = 0;

  explicit Adam(const ArchConfig &a) : m(nn::Params<float>::zeros(a)), v(nn::Params<float>::zeros(a)) {}

  void update(nn::Params<float> &p, const nn::Params<float> &g, const TrainConfig &cfg) {
    ++step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    auto apply = [&](nn::Buffer<float> &pw, const nn::Buffer<float> &gw, nn::Buffer<float> &mw,
                     nn::Buffer<float> &vw) {
      for (std::size_t i = 0; i < pw.size(); ++i) {
        mw[i] = b1 * mw[i] + (1.0f - b1) * gw[i];
        vw[i] = b2 * vw[i] + (1.0f - b2) * gw[i] * gw[i];
        const double mh = mw[i] / c1, vh = vw[i] / c2;
        pw[i] -= static_cast<float>(cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps));
      }
    };
    for (std::size_t l = 0; l < nn::kLayerCount; ++l) {
      apply(p.weight[l], g.weight[l], m.weight[l], v.weight[l]);
      apply(p.bias[l], g.bias[l], m.bias[l], v.bias[l]);
    }
  }
};

LossTerms evaluate(const nn::Params<float> &p, const std::vector<Prepared> &set,
                   const LossConfig &cfg, const nn::ChannelRows<float> &rows, std::uint64_t seed,
                   std::uint64_t salt, nn::CropOrigin origin) {
  LossTerms acc;
  if (set.empty())
    return acc;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto c = pick_centroid(*set[i].src, cfg, RngStream(seed, mix_ids(salt, i)));
    const auto t = nn::loss_gradient<float>(p, {{&set[i].low, &set[i].normal, c, origin}}, cfg,
                                            rows, nullptr);
    acc.total += t.total;
    acc.mse += t.mse;
    acc.channel += t.channel;
  }
  const double n = static_cast<double>(set.size());
  return {acc.total / n, acc.mse / n, acc.channel / n};
}

bool finite(const LossTerms &t) {
  return std::isfinite(t.total) && std::isfinite(t.mse) && std::isfinite(t.channel);
}

constexpr std::uint64_t kInitStream = 0x11;
constexpr std::uint64_t kShuffleStream = 0x22;
constexpr std::uint64_t kCentroidStream = 0x33;
constexpr std::uint64_t kValStream = 0x44;

} // namespace

TrainResult train(const std::vector<TrainingSample> &train_set,
                  const std::vector<TrainingSample> &val_set, const ArchConfig &arch,
                  const LossConfig &loss_cfg, const TrainConfig &cfg, const ProgressFn &progress) {
  arch.validate();
  cfg.validate();
  if (train_set.empty())
    throw ValidationError("train: empty training set");
  if (loss_cfg.lambda < 0)
    throw ValidationError("train: lambda must be >= 0");
  if (loss_cfg.channels.grid != arch.width || arch.width != arch.height)
    throw ValidationError("train: loss channels must be built on the full slice grid");

  if (cfg.crop > std::min(arch.width, arch.height))
    throw ValidationError("train: crop larger than the slice");
  const auto origin = crop_origin(arch, cfg.crop);
  const auto tr = prepare(train_set, arch, cfg.crop);
  const auto va = prepare(val_set, arch, cfg.crop);
  const nn::ChannelRows<float> rows(loss_cfg.channels);

  RngStream init_rng(cfg.seed, kInitStream);
  TrainResult result{nn::init_network<float>(arch, init_rng), {}};
  auto &p = result.params;
  Adam adam(arch);

  auto record = [&](EpochRecord r) {
    result.history.push_back(r);
    if (progress)
      progress(r);
  };
  record({0, evaluate(p, tr, loss_cfg, rows, cfg.seed, mix_ids(kCentroidStream, 0), origin),
          evaluate(p, va, loss_cfg, rows, cfg.seed, kValStream, origin)});

  std::vector<std::size_t> order(tr.size());
  auto grad = nn::Params<float>::zeros(arch);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle_rng(cfg.seed, mix_ids(kShuffleStream, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::uint64_t centroid_salt = mix_ids(kCentroidStream, epoch);

    LossTerms sum;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<nn::BatchItem<float>> batch;
      for (std::size_t k = start; k < stop; ++k) {
        const auto &s = tr[order[k]];
        batch.push_back({&s.low, &s.normal,
                         pick_centroid(*s.src, loss_cfg,
                                       RngStream(cfg.seed, mix_ids(centroid_salt, order[k]))),
                         origin});
      }
      for (std::size_t l = 0; l < nn::kLayerCount; ++l) {
        std::ranges::fill(grad.weight[l], 0.0f);
        std::ranges::fill(grad.bias[l], 0.0f);
      }
      const auto t = nn::loss_gradient(p, batch, loss_cfg, rows, &grad);
      if (!finite(t))
        throw NumericError(fmt::format(
            "train: non-finite loss at epoch {} batch {} (total {}, mse {}, channel {})", epoch,
            batch_index, t.total, t.mse, t.channel));
      adam.update(p, grad, cfg);
      const double w = static_cast<double>(stop - start);
      sum.total += w * t.total;
      sum.mse += w * t.mse;
      sum.channel += w * t.channel;
    }
    const double n = static_cast<double>(order.size());
    record({epoch, {sum.total / n, sum.mse / n, sum.channel / n},
            evaluate(p, va, loss_cfg, rows, cfg.seed, kValStream, origin)});
  }
  return result;
}

TrainResult train(const std::vector<TrainingSample> &dataset, const ArchConfig &arch,
                  const LossConfig &loss_cfg, const TrainConfig &cfg) {
  std::vector<std::string> studies;
  for (const auto &s : dataset)
    if (std::ranges::find(studies, s.study_id) == studies.end())
      studies.push_back(s.study_id);
  const auto n_val = static_cast<std::size_t>(
      std::floor(cfg.validation_fraction * static_cast<double>(studies.size())));
  std::vector<std::string> val_ids(studies.end() - static_cast<long>(n_val), studies.end());
  std::vector<TrainingSample> tr, va;
  for (const auto &s : dataset)
    (std::ranges::find(val_ids, s.study_id) != val_ids.end() ? va : tr).push_back(s);
  return train(tr, va, arch, loss_cfg, cfg);
}

Image3D denoise(const nn::Params<float> &params, const Image3D &low) {
  const double k = standardization_scale(low);
  if (low.n_slices() != params.arch.in_channels || low.height() != params.arch.height ||
      low.width() != params.arch.width)
    throw ValidationError("denoise: image dims do not match the network input");
  nn::ForwardCache<float> c;
  c.x = nn::to_tensor<float>(low, k);
  nn::forward(params, c);
  return nn::to_image(c.y, k);
}

Image3D denoise_ensemble(const std::vector<nn::Params<float>> &models, const Image3D &low) {
  if (models.empty())
    throw ValidationError("denoise_ensemble: no models");
  Image3D acc(low.width(), low.height(), low.n_slices());
  for (const auto &m : models) {
    const auto out = denoise(m, low);
    auto a = acc.values();
    auto o = out.values();
    for (std::size_t i = 0; i < a.size(); ++i)
      a[i] += o[i];
  }
  for (double &v : acc.values())
    v /= static_cast<double>(models.size());
  return acc;
}

namespace {
constexpr char kCkptMagic[4] = {'T', 'D', 'N', 'W'};
constexpr std::uint8_t kCkptVersion = 1;

void put_tensor(std::vector<std::uint8_t> &buf, const std::string &name,
                const std::vector<std::uint32_t> &dims, const nn::Buffer<float> &values) {
  put_u32(buf, static_cast<std::uint32_t>(name.size()));
  buf.insert(buf.end(), name.begin(), name.end());
  put_u32(buf, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims)
    put_u32(buf, d);
  for (float v : values)
    put_f32(buf, v);
}
} // namespace

void save_checkpoint(const nn::Params<float> &params, const std::filesystem::path &path) {
  std::vector<std::uint8_t> buf(kCkptMagic, kCkptMagic + 4);
  buf.push_back(kCkptVersion);
  const std::string arch = nlohmann::json(params.arch).dump();
  put_u32(buf, static_cast<std::uint32_t>(arch.size()));
  buf.insert(buf.end(), arch.begin(), arch.end());
  const auto shapes = nn::layer_shapes(params.arch);
  for (std::size_t l = 0; l < nn::kLayerCount; ++l) {
    const auto &s = shapes[l];
    put_tensor(buf, std::string(nn::kLayerNames[l]) + ".weight",
               {static_cast<std::uint32_t>(s.out), static_cast<std::uint32_t>(s.in),
                static_cast<std::uint32_t>(s.kernel), static_cast<std::uint32_t>(s.kernel)},
               params.weight[l]);
    put_tensor(buf, std::string(nn::kLayerNames[l]) + ".bias", {static_cast<std::uint32_t>(s.out)},
               params.bias[l]);
  }
  write_file_bytes(path, buf);
}

nn::Params<float> load_checkpoint(const std::filesystem::path &path) {
  if (!std::filesystem::exists(path))
    throw DataError("checkpoint not found: " + path.string());
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size())
      throw FormatError(path.string() + ": truncated checkpoint");
  };
  need(9);
  if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0 || bytes[4] != kCkptVersion)
    throw FormatError(path.string() + ": not a version-1 checkpoint");
  pos = 5;
  const std::uint32_t jlen = get_u32(&bytes[pos]);
  pos += 4;
  need(jlen);
  ArchConfig arch;
  try {
    arch = nlohmann::json::parse(bytes.begin() + static_cast<long>(pos),
                                 bytes.begin() + static_cast<long>(pos + jlen))
               .get<ArchConfig>();
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(path.string() + ": bad architecture header: " + e.what());
  }
  pos += jlen;
  auto params = nn::Params<float>::zeros(arch);

  std::map<std::string, nn::Buffer<float> *> slots;
  for (std::size_t l = 0; l < nn::kLayerCount; ++l) {
    slots[std::string(nn::kLayerNames[l]) + ".weight"] = &params.weight[l];
    slots[std::string(nn::kLayerNames[l]) + ".bias"] = &params.bias[l];
  }
  std::size_t seen = 0;
  while (pos < bytes.size()) {
    need(4);
    const std::uint32_t nlen = get_u32(&bytes[pos]);
    pos += 4;
    need(nlen + 4);
    const std::string name(bytes.begin() + static_cast<long>(pos),
                           bytes.begin() + static_cast<long>(pos + nlen));
    pos += nlen;
    const std::uint32_t rank = get_u32(&bytes[pos]);
    pos += 4;
    need(4ull * rank);
    std::size_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r, pos += 4)
      count *= get_u32(&bytes[pos]);
    const auto it = slots.find(name);
    if (it == slots.end() || it->second->size() != count)
      throw FormatError(path.string() + ": unexpected tensor '" + name + "'");
    need(4 * count);
    for (std::size_t i = 0; i < count; ++i, pos += 4)
      (*it->second)[i] = get_f32(&bytes[pos]);
    ++seen;
  }
  if (seen != slots.size())
    throw FormatError(path.string() + ": missing tensors");
  return params;
}

void write_history_csv(const std::vector<EpochRecord> &history, const std::filesystem::path &path) {
  std::string text = "epoch,train_total,train_mse,train_channel,val_total,val_mse,val_channel\n";
  for (const auto &r : history)
    text += fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", r.epoch, r.train.total,
                        r.train.mse, r.train.channel, r.val.total, r.val.mse, r.val.channel);
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

} // namespace taskdn
