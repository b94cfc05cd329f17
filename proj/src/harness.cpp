#include "taskdn/harness.hpp"

#include "taskdn/rawio.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace taskdn {

namespace {

constexpr std::uint64_t kPhantomStream = 0x5048414eULL;
constexpr std::uint64_t kNoiseStream = 0x4e4f4953ULL;
constexpr std::uint64_t kBootStream = 0x424f4f54ULL;
constexpr std::uint64_t kPairedStream = 0x50414952ULL;

class StageLog {
public:
  StageLog(const StudyConfig &cfg, const std::string &stage) : stage_(stage) {
    fs::create_directories(cfg.out_dir / "logs");
    file_.open(cfg.out_dir / "logs" / (stage + ".log"), std::ios::app);
  }

  template <typename... A> void operator()(fmt::format_string<A...> f, A &&...args) {
    const std::string line = fmt::format("[{}] {}", stage_, fmt::format(f, std::forward<A>(args)...));
    fmt::print(stderr, "{}\n", line);
    if (file_)
      file_ << line << '\n' << std::flush;
  }

private:
  std::string stage_;
  std::ofstream file_;
};

template <typename T> T read_or_default(const nlohmann::json &j, const char *key, const T &d) {
  return j.contains(key) ? j.at(key).get<T>() : d;
}

std::string study_id(std::size_t i) { return fmt::format("S{:03d}", i); }

Wall wall_of_type(const std::string &type_name) {
  if (type_name.starts_with("ant"))
    return Wall::anterior;
  if (type_name.starts_with("inf"))
    return Wall::inferior;
  throw DataError("unknown defect type '" + type_name + "'");
}

VoxelCoord coord_from_json(const nlohmann::json &j) {
  return {j.at(0).get<long>(), j.at(1).get<long>(), j.at(2).get<long>()};
}

nlohmann::json coord_to_json(const VoxelCoord &c) { return nlohmann::json::array({c.x, c.y, c.slice}); }

void write_text(const fs::path &path, const std::string &text) {
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  write_file_bytes(path, bytes);
}

nlohmann::json read_json(const fs::path &path) {
  if (!fs::exists(path))
    throw DataError("missing input: " + path.string());
  std::ifstream in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

ArchConfig effective_arch(const StudyConfig &c) {
  ArchConfig a = c.arch;
  a.in_channels = c.phantom.n_slices;
  a.height = a.width = c.phantom.grid;
  return a;
}

std::size_t dose_index(const StudyConfig &cfg, double dose) {
  for (std::size_t i = 0; i < cfg.dose_levels.size(); ++i)
    if (cfg.dose_levels[i] == dose)
      return i;
  throw ConfigError(fmt::format("dose {:g} is not one of the configured dose levels", dose));
}

fs::path dose_dir(const StudyConfig &cfg, const char *stage, double dose) {
  return cfg.out_dir / stage / ("dose_" + dose_key(dose));
}

std::string lambda_key(double lambda) { return fmt::format("lambda_{:g}", lambda); }

// Noisy normal-dose and thinned low-dose reconstructions of one activity volume.
std::map<std::string, Image3D> acquire(const StudyConfig &cfg, const Projector &proj,
                                       const Image3D &activity, const LvMask &mask,
                                       const RngStream &base, StageLog &log,
                                       const std::string &sample_id) {
  const std::size_t w = activity.width(), h = activity.height(), n = activity.n_slices();
  std::map<std::string, Image3D> out;
  out.emplace(dose_key(1.0), Image3D(w, h, n));
  for (double p : cfg.dose_levels)
    out.emplace(dose_key(p), Image3D(w, h, n));
  const Image2D init(w, h, cfg.recon.init_value);
  for (std::size_t s = 0; s < n; ++s) {
    const Sinogram expected = proj.forward(activity.slice(s));
    const double calib = expected.sum() / cfg.counts_per_slice;
    RngStream noise = base.split(s);
    const Sinogram counts = poisson_counts(expected, cfg.counts_per_slice, noise);
    auto recon = [&](const Sinogram &sino, double gain) {
      auto r = osem_reconstruct(sino, proj, cfg.recon, init);
      if (r.n_excluded > 0)
        log("{} slice {}: {} voxels without sensitivity left at init", sample_id, s, r.n_excluded);
      for (double &v : r.image.values())
        v *= gain;
      return r.image;
    };
    out.at(dose_key(1.0)).set_slice(s, recon(counts, calib));
    for (std::size_t d = 0; d < cfg.dose_levels.size(); ++d) {
      const double p = cfg.dose_levels[d];
      RngStream thin_rng = base.split(mix_ids(d + 1, s));
      out.at(dose_key(p)).set_slice(s, recon(binomial_thin(counts, p, thin_rng), calib / p));
    }
  }
  for (auto &[key, vol] : out)
    vol = remap_uptake(post_filter(vol, cfg.filter), mask);
  return out;
}

VoxelCoord lv_center(const LvGeometry &g) {
  return {std::lround(g.center_x), std::lround(g.center_y),
          static_cast<long>((g.first_wall_slice + g.last_wall_slice) / 2)};
}

std::vector<const SampleRecord *> samples_in(const DatasetManifest &m, std::initializer_list<Split> splits) {
  std::vector<const SampleRecord *> out;
  for (const auto &s : m.samples)
    if (std::ranges::find(splits, s.split) != splits.end())
      out.push_back(&s);
  return out;
}

Image3D load_volume(const StudyConfig &cfg, const SampleRecord &rec, double dose) {
  const auto it = rec.files.find(dose_key(dose));
  if (it == rec.files.end())
    throw DataError(fmt::format("sample {} has no volume for dose {:g}", rec.sample_id, dose));
  const fs::path path = cfg.out_dir / it->second;
  if (!fs::exists(path))
    throw DataError("missing volume: " + path.string());
  return read_image3d(path);
}

TrainingSample training_sample(const StudyConfig &cfg, const DatasetManifest &m,
                               const SampleRecord &rec, double dose) {
  const auto &study = m.study(rec.study_id);
  TrainingSample t;
  t.id = rec.sample_id;
  t.study_id = rec.study_id;
  t.low = load_volume(cfg, rec, dose);
  t.normal = load_volume(cfg, rec, 1.0);
  t.centroid = rec.centroid;
  for (const auto &[name, c] : study.canonical_centroids)
    t.canonical_centroids.push_back(c);
  t.lv_center = lv_center(study.geometry);
  return t;
}

LossConfig loss_config(const StudyConfig &cfg, double lambda) {
  LossConfig l;
  l.lambda = lambda;
  l.channels = build_channels(cfg.phantom.grid, cfg.band_edges);
  l.absent_policy = cfg.absent_policy;
  return l;
}

// Fold models for one (dose, lambda); `pool` holds every training-pool sample.
std::vector<nn::Params<float>> train_folds(const StudyConfig &cfg, const DatasetManifest &m,
                                           const std::vector<TrainingSample> &pool, double dose,
                                           double lambda, StageLog &log) {
  const ArchConfig arch = effective_arch(cfg);
  const LossConfig loss_cfg = loss_config(cfg, lambda);
  std::vector<nn::Params<float>> models;
  for (std::size_t k = 0; k < cfg.folds; ++k) {
    const FoldSplit fs_ = fold_split(m, k);
    const std::set<std::string> tr(fs_.train_studies.begin(), fs_.train_studies.end());
    std::vector<TrainingSample> train_set, val_set;
    for (const auto &s : pool)
      (tr.contains(s.study_id) ? train_set : val_set).push_back(s);
    TrainConfig tc = cfg.train;
    tc.seed = mix_ids(cfg.train.seed, k);
    log("dose {:g} lambda {:g} fold {}: {} train / {} held-out samples, init stream seed {}", dose,
        lambda, k, train_set.size(), val_set.size(), tc.seed);
    const auto start = std::chrono::steady_clock::now();
    TrainResult r;
    try {
      r = train(train_set, val_set, arch, loss_cfg, tc);
    } catch (const NumericError &e) {
      throw NumericError(fmt::format("fold {} lambda {:g} dose {:g}: {}", k, lambda, dose, e.what()));
    } catch (const ValidationError &e) {
      throw DataError(fmt::format("fold {} lambda {:g} dose {:g}: {}", k, lambda, dose, e.what()));
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto &last = r.history.back();
    log("fold {} done in {:.1f} s: train {:.6g} (mse {:.6g}, channel {:.6g}), held-out {:.6g}", k,
        secs, last.train.total, last.train.mse, last.train.channel, last.val.total);
    const fs::path ckpt = model_path(cfg, dose, lambda, k);
    save_checkpoint(r.params, ckpt);
    write_history_csv(r.history, ckpt.parent_path() / fmt::format("history_fold_{}.csv", k));
    models.push_back(std::move(r.params));
  }
  return models;
}

std::vector<TrainingSample> load_pool(const StudyConfig &cfg, const DatasetManifest &m, double dose) {
  std::vector<TrainingSample> pool;
  for (const auto *rec : samples_in(m, {Split::train}))
    pool.push_back(training_sample(cfg, m, *rec, dose));
  return pool;
}

double mean_wall_auc(const std::vector<ScoreRow> &rows) {
  double sum = 0;
  for (Wall w : {Wall::anterior, Wall::inferior}) {
    const auto s = wall_scores(rows, w);
    sum += auc_mann_whitney(s.present, s.absent);
  }
  return sum / 2.0;
}

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

nlohmann::json roc_to_json(const RocResult &r) {
  return {{"auc", r.auc},       {"ci_low", r.ci_low}, {"ci_high", r.ci_high},
          {"n_present", r.n_present}, {"n_absent", r.n_absent}, {"n_boot", r.n_boot},
          {"seed", r.seed},     {"level", r.level},   {"widened", r.widened}};
}

RocResult roc_from_json(const nlohmann::json &j) {
  RocResult r;
  r.auc = j.at("auc").get<double>();
  r.ci_low = j.at("ci_low").get<double>();
  r.ci_high = j.at("ci_high").get<double>();
  r.n_present = j.at("n_present").get<std::size_t>();
  r.n_absent = j.at("n_absent").get<std::size_t>();
  r.n_boot = j.at("n_boot").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.level = j.at("level").get<double>();
  r.widened = j.at("widened").get<bool>();
  return r;
}

std::string absent_policy_name(nn::AbsentCentroidPolicy p) {
  return p == nn::AbsentCentroidPolicy::lv_center ? "lv_center" : "canonical_random";
}

} // namespace

// ---------------------------------------------------------------- config

void StudyConfig::validate() const {
  try {
    phantom.validate();
    geometry.validate();
    recon.validate(geometry);
    filter.validate();
    train.validate();
    effective_arch(*this).validate();
    if (!band_edges.empty())
      build_channels(phantom.grid, band_edges);
  } catch (const ValidationError &e) {
    throw ConfigError(e.what());
  }
  if (n_train_studies == 0 || n_val == 0 || n_test_absent == 0 || n_test_present_base == 0)
    throw ConfigError("study counts must be positive");
  if (folds < 2 || folds > n_train_studies)
    throw ConfigError("folds must lie in [2, n_train_studies]");
  if (dose_levels.empty())
    throw ConfigError("dose_levels is empty");
  for (double p : dose_levels)
    if (!(p > 0 && p <= 1))
      throw ConfigError(fmt::format("dose level {:g} outside (0, 1]", p));
  std::set<std::string> keys;
  for (double p : dose_levels)
    if (!keys.insert(dose_key(p)).second || p == 1.0)
      throw ConfigError("dose levels must be distinct and below 1");
  if (lambda_grid.empty())
    throw ConfigError("lambda_grid is empty");
  for (double l : lambda_grid)
    if (!(l >= 0 && std::isfinite(l)))
      throw ConfigError("lambda values must be finite and >= 0");
  if (!(counts_per_slice > 0 && std::isfinite(counts_per_slice)))
    throw ConfigError("counts_per_slice must be positive");
  if (n_boot < 100)
    throw ConfigError("n_boot must be >= 100");
  if (!(ridge_relative >= 0))
    throw ConfigError("ridge_relative must be >= 0");
}

void to_json(nlohmann::json &j, const StudyConfig &c) {
  j = {{"seed", c.seed},
       {"n_train_studies", c.n_train_studies},
       {"n_val", c.n_val},
       {"n_test_absent", c.n_test_absent},
       {"n_test_present_base", c.n_test_present_base},
       {"dose_levels", c.dose_levels},
       {"lambda_grid", c.lambda_grid},
       {"folds", c.folds},
       {"counts_per_slice", c.counts_per_slice},
       {"phantom", c.phantom},
       {"geometry", c.geometry},
       {"recon", c.recon},
       {"filter", c.filter},
       {"band_edges", c.band_edges},
       {"arch", c.arch},
       {"train", c.train},
       {"absent_centroid_policy", absent_policy_name(c.absent_policy)},
       {"n_boot", c.n_boot},
       {"ridge_relative", c.ridge_relative},
       {"out_dir", c.out_dir.string()}};
}

void from_json(const nlohmann::json &j, StudyConfig &c) {
  static const std::set<std::string> known{
      "seed",     "n_train_studies", "n_val",      "n_test_absent",  "n_test_present_base",
      "dose_levels", "lambda_grid",  "folds",      "counts_per_slice", "phantom",
      "geometry", "recon",           "filter",     "band_edges",     "arch",
      "train",    "absent_centroid_policy", "n_boot", "ridge_relative", "out_dir"};
  if (!j.is_object())
    throw ConfigError("config must be a JSON object");
  for (const auto &[k, v] : j.items())
    if (!known.contains(k))
      throw ConfigError("unknown config key '" + k + "'");
  const StudyConfig d;
  c.seed = read_or_default(j, "seed", d.seed);
  c.n_train_studies = read_or_default(j, "n_train_studies", d.n_train_studies);
  c.n_val = read_or_default(j, "n_val", d.n_val);
  c.n_test_absent = read_or_default(j, "n_test_absent", d.n_test_absent);
  c.n_test_present_base = read_or_default(j, "n_test_present_base", d.n_test_present_base);
  c.dose_levels = read_or_default(j, "dose_levels", d.dose_levels);
  c.lambda_grid = read_or_default(j, "lambda_grid", d.lambda_grid);
  c.folds = read_or_default(j, "folds", d.folds);
  c.counts_per_slice = read_or_default(j, "counts_per_slice", d.counts_per_slice);
  c.phantom = read_or_default(j, "phantom", d.phantom);
  c.geometry = read_or_default(j, "geometry", d.geometry);
  c.recon = read_or_default(j, "recon", d.recon);
  c.filter = read_or_default(j, "filter", d.filter);
  c.band_edges = read_or_default(j, "band_edges", d.band_edges);
  c.arch = read_or_default(j, "arch", d.arch);
  c.train = read_or_default(j, "train", d.train);
  const std::string policy =
      read_or_default(j, "absent_centroid_policy", absent_policy_name(d.absent_policy));
  if (policy == "canonical_random")
    c.absent_policy = nn::AbsentCentroidPolicy::canonical_random;
  else if (policy == "lv_center")
    c.absent_policy = nn::AbsentCentroidPolicy::lv_center;
  else
    throw ConfigError("absent_centroid_policy must be 'canonical_random' or 'lv_center'");
  c.n_boot = read_or_default(j, "n_boot", d.n_boot);
  c.ridge_relative = read_or_default(j, "ridge_relative", d.ridge_relative);
  c.out_dir = read_or_default(j, "out_dir", d.out_dir.string());
}

StudyConfig load_config(const fs::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config '" + path.string() + "'");
  StudyConfig c;
  try {
    c = nlohmann::json::parse(in).get<StudyConfig>();
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  } catch (const ValidationError &e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- manifest

std::string to_string(Split s) {
  switch (s) {
  case Split::train:
    return "train";
  case Split::validation:
    return "validation";
  case Split::test_absent:
    return "test_absent";
  case Split::test_present:
    return "test_present";
  }
  return "?";
}

Split split_from_string(const std::string &s) {
  for (Split v : {Split::train, Split::validation, Split::test_absent, Split::test_present})
    if (to_string(v) == s)
      return v;
  throw DataError("unknown split '" + s + "'");
}

const StudyRecord &DatasetManifest::study(const std::string &id) const {
  for (const auto &s : studies)
    if (s.study_id == id)
      return s;
  throw DataError("manifest has no study '" + id + "'");
}

void DatasetManifest::check_no_leakage() const {
  std::map<std::string, Split> owner;
  for (const auto &s : studies)
    if (!owner.emplace(s.study_id, s.split).second)
      throw DataError("leakage: study " + s.study_id + " is listed in more than one split");
  for (const auto &s : samples) {
    const auto it = owner.find(s.study_id);
    if (it == owner.end())
      throw DataError("sample " + s.sample_id + " refers to unknown study " + s.study_id);
    if (it->second != s.split)
      throw DataError(fmt::format("leakage: sample {} is in split {} but its study {} is in {}",
                                  s.sample_id, to_string(s.split), s.study_id,
                                  to_string(it->second)));
    if (s.split == Split::test_absent && s.defect)
      throw DataError("sample " + s.sample_id + " carries a defect in the defect-absent test set");
    if (s.split == Split::test_present && !s.defect)
      throw DataError("sample " + s.sample_id + " lacks a defect in the defect-present test set");
  }
}

void to_json(nlohmann::json &j, const DatasetManifest &m) {
  j = {{"seed", m.seed}, {"grid", m.grid}, {"n_slices", m.n_slices}, {"dose_levels", m.dose_levels}};
  auto &studies = j["studies"] = nlohmann::json::array();
  for (const auto &s : m.studies) {
    nlohmann::json canon = nlohmann::json::array();
    for (const auto &[name, c] : s.canonical_centroids)
      canon.push_back({{"defect_type", name}, {"centroid", coord_to_json(c)}});
    studies.push_back({{"study_id", s.study_id},
                       {"split", to_string(s.split)},
                       {"fold", s.fold},
                       {"geometry", s.geometry},
                       {"canonical_centroids", canon},
                       {"rng_stream", s.rng_stream}});
  }
  auto &samples = j["samples"] = nlohmann::json::array();
  for (const auto &s : m.samples) {
    nlohmann::json r = {{"sample_id", s.sample_id}, {"study_id", s.study_id},
                        {"split", to_string(s.split)}, {"fold", s.fold},
                        {"files", s.files},         {"rng_stream", s.rng_stream}};
    r["defect"] = s.defect ? nlohmann::json(*s.defect) : nlohmann::json(nullptr);
    r["defect_type"] = s.defect ? nlohmann::json(s.defect->name()) : nlohmann::json("none");
    r["centroid"] = s.centroid ? coord_to_json(*s.centroid) : nlohmann::json(nullptr);
    samples.push_back(std::move(r));
  }
}

void from_json(const nlohmann::json &j, DatasetManifest &m) {
  m.seed = j.at("seed").get<std::uint64_t>();
  m.grid = j.at("grid").get<std::size_t>();
  m.n_slices = j.at("n_slices").get<std::size_t>();
  m.dose_levels = j.at("dose_levels").get<std::vector<double>>();
  m.studies.clear();
  for (const auto &s : j.at("studies")) {
    StudyRecord r;
    r.study_id = s.at("study_id").get<std::string>();
    r.split = split_from_string(s.at("split").get<std::string>());
    r.fold = s.at("fold").get<int>();
    r.geometry = s.at("geometry").get<LvGeometry>();
    for (const auto &c : s.at("canonical_centroids"))
      r.canonical_centroids.emplace_back(c.at("defect_type").get<std::string>(),
                                         coord_from_json(c.at("centroid")));
    r.rng_stream = s.at("rng_stream").get<std::uint64_t>();
    m.studies.push_back(std::move(r));
  }
  m.samples.clear();
  for (const auto &s : j.at("samples")) {
    SampleRecord r;
    r.sample_id = s.at("sample_id").get<std::string>();
    r.study_id = s.at("study_id").get<std::string>();
    r.split = split_from_string(s.at("split").get<std::string>());
    r.fold = s.at("fold").get<int>();
    r.files = s.at("files").get<std::map<std::string, std::string>>();
    r.rng_stream = s.at("rng_stream").get<std::uint64_t>();
    if (!s.at("defect").is_null())
      r.defect = s.at("defect").get<DefectSpec>();
    if (!s.at("centroid").is_null())
      r.centroid = coord_from_json(s.at("centroid"));
    m.samples.push_back(std::move(r));
  }
}

std::string dose_key(double p) { return fmt::format("{:g}", p); }

fs::path manifest_path(const StudyConfig &cfg) { return cfg.out_dir / "dataset" / "manifest.json"; }

fs::path model_path(const StudyConfig &cfg, double dose, double lambda, std::size_t fold) {
  return dose_dir(cfg, "models", dose) / lambda_key(lambda) / fmt::format("fold_{}.tdnw", fold);
}

DatasetManifest cmd_dataset(const StudyConfig &cfg) {
  cfg.validate();
  StageLog log(cfg, "dataset");
  const auto train_types = training_defect_types();
  const auto test_types = test_defect_types();
  const std::size_t grid = cfg.phantom.grid;
  const Projector proj(grid, grid, cfg.geometry);

  DatasetManifest m;
  m.seed = cfg.seed;
  m.grid = grid;
  m.n_slices = cfg.phantom.n_slices;
  m.dose_levels = cfg.dose_levels;

  std::vector<Split> plan;
  plan.insert(plan.end(), cfg.n_train_studies, Split::train);
  plan.insert(plan.end(), cfg.n_val, Split::validation);
  plan.insert(plan.end(), cfg.n_test_absent, Split::test_absent);
  plan.insert(plan.end(), cfg.n_test_present_base, Split::test_present);

  const auto start = std::chrono::steady_clock::now();
  std::size_t train_index = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    StudyRecord study;
    study.study_id = study_id(i);
    study.split = plan[i];
    study.fold = plan[i] == Split::train ? static_cast<int>(train_index++ % cfg.folds) : -1;
    study.rng_stream = mix_ids(kPhantomStream, i);
    try {
      RngStream prng(cfg.seed, study.rng_stream);
      const Phantom ph = generate_phantom(cfg.phantom, prng);
      study.geometry = ph.lv_mask.geometry;
      const bool is_test = plan[i] == Split::test_absent || plan[i] == Split::test_present;
      const auto &types = is_test ? test_types : train_types;
      for (const auto &t : types)
        study.canonical_centroids.emplace_back(t.name(), locate_defect(ph.lv_mask, t).centroid);

      std::vector<std::optional<DefectSpec>> variants;
      if (plan[i] != Split::test_present)
        variants.emplace_back(std::nullopt);
      if (plan[i] != Split::test_absent)
        variants.insert(variants.end(), types.begin(), types.end());

      for (std::size_t v = 0; v < variants.size(); ++v) {
        SampleRecord rec;
        rec.study_id = study.study_id;
        rec.split = study.split;
        rec.fold = study.fold;
        rec.defect = variants[v];
        rec.sample_id = study.study_id + "_" + (rec.defect ? rec.defect->name() : "none");
        rec.rng_stream = mix_ids(mix_ids(kNoiseStream, i), v);
        Image3D activity = ph.image;
        if (rec.defect) {
          auto ins = insert_defect(ph.image, ph.lv_mask, *rec.defect);
          activity = std::move(ins.image);
          rec.centroid = ins.record.centroid;
        }
        activity = remap_uptake(activity, ph.lv_mask);
        const RngStream noise(cfg.seed, rec.rng_stream);
        const auto volumes = acquire(cfg, proj, activity, ph.lv_mask, noise, log, rec.sample_id);
        for (const auto &[key, vol] : volumes) {
          const std::string name =
              rec.sample_id + (key == dose_key(1.0) ? "_nd.raw" : "_ld" + key + ".raw");
          const fs::path rel = fs::path("dataset") / study.study_id / name;
          write_raw(vol, cfg.out_dir / rel);
          nlohmann::json meta = {{"sample_id", rec.sample_id},
                                 {"study_id", rec.study_id},
                                 {"dose_level", std::stod(key)},
                                 {"voxel_size", 1.0},
                                 {"rng_stream", rec.rng_stream}};
          meta["defect"] = rec.defect ? nlohmann::json(*rec.defect) : nlohmann::json(nullptr);
          write_sidecar(cfg.out_dir / rel, meta);
          rec.files[key] = rel.generic_string();
        }
        m.samples.push_back(std::move(rec));
      }
    } catch (const Error &e) {
      throw DataError(fmt::format("study {}: {}", study.study_id, e.what()));
    }
    log("study {} ({}, fold {}): phantom stream {:#x}, {} samples", study.study_id,
        to_string(study.split), study.fold, study.rng_stream,
        plan[i] == Split::test_absent ? 1
        : plan[i] == Split::test_present
            ? test_types.size()
            : train_types.size() + 1);
    m.studies.push_back(std::move(study));
  }
  m.check_no_leakage();
  write_text(manifest_path(cfg), nlohmann::json(m).dump(2) + "\n");
  log("wrote {} samples from {} studies in {:.1f} s", m.samples.size(), m.studies.size(),
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  return m;
}

DatasetManifest load_manifest(const StudyConfig &cfg) {
  const fs::path path = manifest_path(cfg);
  if (!fs::exists(path))
    throw DataError("dataset manifest not found at " + path.string() + "; run 'taskdn dataset' first");
  DatasetManifest m;
  try {
    m = read_json(path).get<DatasetManifest>();
  } catch (const nlohmann::json::exception &e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
  m.check_no_leakage();
  if (m.grid != cfg.phantom.grid || m.n_slices != cfg.phantom.n_slices)
    throw DataError("manifest volume shape does not match the config phantom");
  return m;
}

FoldSplit fold_split(const DatasetManifest &m, std::size_t fold) {
  FoldSplit f;
  for (const auto &s : m.studies) {
    if (s.split != Split::train)
      continue;
    (s.fold == static_cast<int>(fold) ? f.holdout_studies : f.train_studies).push_back(s.study_id);
  }
  if (f.holdout_studies.empty() || f.train_studies.empty())
    throw DataError(fmt::format("fold {} has an empty train or held-out study set", fold));
  return f;
}

// ---------------------------------------------------------------- training

std::vector<nn::Params<float>> cmd_train(const StudyConfig &cfg, double dose, double lambda) {
  cfg.validate();
  dose_index(cfg, dose);
  StageLog log(cfg, "train");
  const DatasetManifest m = load_manifest(cfg);
  const auto pool = load_pool(cfg, m, dose);
  return train_folds(cfg, m, pool, dose, lambda, log);
}

std::vector<nn::Params<float>> load_fold_models(const StudyConfig &cfg, double dose, double lambda) {
  std::vector<nn::Params<float>> models;
  for (std::size_t k = 0; k < cfg.folds; ++k) {
    const fs::path path = model_path(cfg, dose, lambda, k);
    if (!fs::exists(path))
      throw DataError(fmt::format("checkpoint not found: expected {} (run 'taskdn train --dose {:g} "
                                  "--lambda {:g}' or 'taskdn crossval --dose {:g}')",
                                  path.string(), dose, lambda, dose));
    models.push_back(load_checkpoint(path));
    if (!(models.back().arch == effective_arch(cfg)))
      throw DataError("checkpoint " + path.string() + " does not match the configured architecture");
  }
  return models;
}

// ---------------------------------------------------------------- observer

void write_scores_csv(const std::vector<ScoreRow> &rows, const fs::path &path) {
  std::string out = "study_id,defect_type,wall,label,score\n";
  for (const auto &r : rows)
    out += fmt::format("{},{},{},{},{}\n", r.study_id, r.defect_type, to_string(r.wall),
                       r.label == Label::defect_present ? "present" : "absent", fmt_double(r.score));
  write_text(path, out);
}

std::vector<ScoreRow> read_scores_csv(const fs::path &path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("missing score file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "study_id,defect_type,wall,label,score")
    throw DataError(path.string() + ": unexpected header");
  std::vector<ScoreRow> rows;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto &x : f)
      std::getline(ss, x, ',');
    ScoreRow r{f[0], f[1], wall_from_string(f[2]),
               f[3] == "present" ? Label::defect_present : Label::defect_absent, std::stod(f[4])};
    rows.push_back(std::move(r));
  }
  return rows;
}

LooScores wall_scores(const std::vector<ScoreRow> &rows, Wall wall) {
  LooScores s;
  for (const auto &r : rows)
    if (r.wall == wall)
      (r.label == Label::defect_present ? s.present : s.absent).push_back(r.score);
  return s;
}

std::vector<ScoreRow> observer_study(const DatasetManifest &m,
                                     const std::vector<const SampleRecord *> &samples,
                                     const std::vector<Image3D> &images, const ChannelSet &channels,
                                     Ridge ridge) {
  if (samples.size() != images.size())
    throw ValidationError("observer_study: sample and image counts differ");
  std::vector<ScoreRow> out;
  for (Wall wall : {Wall::anterior, Wall::inferior}) {
    FeatureSet present{Label::defect_present, {}}, absent{Label::defect_absent, {}};
    std::vector<ScoreRow> present_rows, absent_rows;
    auto features = [&](const Image3D &img, const VoxelCoord &c) {
      return roi_features(channels, extract_roi(img, c.x, c.y, c.slice));
    };
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const SampleRecord &rec = *samples[i];
      if (rec.defect) {
        if (rec.defect->wall != wall)
          continue;
        present.vectors.push_back(features(images[i], *rec.centroid));
        present_rows.push_back({rec.study_id, rec.defect->name(), wall, Label::defect_present, 0});
      } else {
        for (const auto &[name, c] : m.study(rec.study_id).canonical_centroids) {
          if (wall_of_type(name) != wall)
            continue;
          absent.vectors.push_back(features(images[i], c));
          absent_rows.push_back({rec.study_id, name, wall, Label::defect_absent, 0});
        }
      }
    }
    if (present.size() < 2 || absent.size() < 2)
      throw DataError(fmt::format("observer study: too few {} cases ({} present, {} absent)",
                                  to_string(wall), present.size(), absent.size()));
    const LooScores loo = loo_scores(present, absent, ridge);
    for (std::size_t i = 0; i < present_rows.size(); ++i)
      present_rows[i].score = loo.present[i];
    for (std::size_t i = 0; i < absent_rows.size(); ++i)
      absent_rows[i].score = loo.absent[i];
    out.insert(out.end(), present_rows.begin(), present_rows.end());
    out.insert(out.end(), absent_rows.begin(), absent_rows.end());
  }
  return out;
}

// ---------------------------------------------------------------- crossval

double select_lambda(const std::vector<LambdaScore> &scores) {
  if (scores.empty())
    throw ValidationError("select_lambda: no candidates");
  const LambdaScore *best = &scores.front();
  for (const auto &s : scores)
    if (s.mean_auc > best->mean_auc || (s.mean_auc == best->mean_auc && s.lambda < best->lambda))
      best = &s;
  return best->lambda;
}

namespace {
nlohmann::json crossval_to_json(const CrossvalResult &r, const nlohmann::json &reference) {
  nlohmann::json lam = nlohmann::json::array();
  for (const auto &l : r.lambdas)
    lam.push_back({{"lambda", l.lambda}, {"fold_auc", l.fold_auc}, {"mean_auc", l.mean_auc}});
  return {{"dose_level", r.dose},
          {"lambdas", lam},
          {"selected_lambda", r.selected_lambda},
          {"reference_auc", reference}};
}
} // namespace

CrossvalResult cmd_crossval(const StudyConfig &cfg, double dose) {
  cfg.validate();
  dose_index(cfg, dose);
  StageLog log(cfg, "crossval");
  const DatasetManifest m = load_manifest(cfg);
  const auto pool = load_pool(cfg, m, dose);
  const auto val_recs = samples_in(m, {Split::validation});
  std::vector<Image3D> val_low, val_normal;
  for (const auto *rec : val_recs) {
    val_low.push_back(load_volume(cfg, *rec, dose));
    val_normal.push_back(load_volume(cfg, *rec, 1.0));
  }
  const ChannelSet channels = build_channels(cfg.phantom.grid, cfg.band_edges);
  const Ridge ridge{0.0, cfg.ridge_relative};
  const fs::path dir = dose_dir(cfg, "crossval", dose);

  nlohmann::json reference;
  {
    const auto ld = observer_study(m, val_recs, val_low, channels, ridge);
    const auto nd = observer_study(m, val_recs, val_normal, channels, ridge);
    write_scores_csv(ld, dir / "scores_low_dose.csv");
    write_scores_csv(nd, dir / "scores_normal_dose.csv");
    reference = {{"low_dose", mean_wall_auc(ld)}, {"normal_dose", mean_wall_auc(nd)}};
    log("dose {:g} validation AUC: low-dose {:.4f}, normal-dose {:.4f}", dose,
        reference["low_dose"].get<double>(), reference["normal_dose"].get<double>());
  }

  CrossvalResult result;
  result.dose = dose;
  for (double lambda : cfg.lambda_grid) {
    const auto models = train_folds(cfg, m, pool, dose, lambda, log);
    LambdaScore ls;
    ls.lambda = lambda;
    for (std::size_t k = 0; k < models.size(); ++k) {
      std::vector<Image3D> den;
      for (const auto &img : val_low)
        den.push_back(denoise(models[k], img));
      const auto rows = observer_study(m, val_recs, den, channels, ridge);
      write_scores_csv(rows, dir / lambda_key(lambda) / fmt::format("fold_{}_scores.csv", k));
      ls.fold_auc.push_back(mean_wall_auc(rows));
    }
    double sum = 0;
    for (double a : ls.fold_auc)
      sum += a;
    ls.mean_auc = sum / static_cast<double>(ls.fold_auc.size());
    log("dose {:g} lambda {:g}: mean validation AUC {:.4f}", dose, lambda, ls.mean_auc);
    result.lambdas.push_back(std::move(ls));
  }
  result.selected_lambda = select_lambda(result.lambdas);
  log("dose {:g}: selected lambda {:g}", dose, result.selected_lambda);
  write_text(dir / "crossval.json", crossval_to_json(result, reference).dump(2) + "\n");
  return result;
}

CrossvalResult load_crossval(const StudyConfig &cfg, double dose) {
  const fs::path path = dose_dir(cfg, "crossval", dose) / "crossval.json";
  if (!fs::exists(path))
    throw DataError("cross-validation result not found at " + path.string() +
                    "; run 'taskdn crossval' or pass --lambda");
  const auto j = read_json(path);
  CrossvalResult r;
  r.dose = j.at("dose_level").get<double>();
  r.selected_lambda = j.at("selected_lambda").get<double>();
  for (const auto &l : j.at("lambdas"))
    r.lambdas.push_back({l.at("lambda").get<double>(), l.at("fold_auc").get<std::vector<double>>(),
                         l.at("mean_auc").get<double>()});
  return r;
}

// ---------------------------------------------------------------- evaluation

void to_json(nlohmann::json &j, const EvaluationResult &r) {
  j = {{"dose_level", r.dose}, {"lambda", r.lambda}, {"contrast_25pct", r.contrast}};
  auto &rows = j["rows"] = nlohmann::json::array();
  for (const auto &row : r.rows) {
    nlohmann::json e = roc_to_json(row.roc);
    e["method"] = row.method;
    e["dose_level"] = row.dose;
    e["wall"] = to_string(row.wall);
    e["rmse"] = row.rmse;
    e["ssim"] = row.ssim;
    rows.push_back(std::move(e));
  }
  auto &paired = j["paired_task_specific_minus_low_dose"] = nlohmann::json::object();
  for (const auto &[wall, p] : r.paired)
    paired[wall] = {{"delta", p.delta}, {"ci_low", p.ci_low}, {"ci_high", p.ci_high}, {"level", p.level}};
}

void from_json(const nlohmann::json &j, EvaluationResult &r) {
  r.dose = j.at("dose_level").get<double>();
  r.lambda = j.at("lambda").get<double>();
  r.contrast = j.at("contrast_25pct").get<std::map<std::string, double>>();
  r.rows.clear();
  for (const auto &e : j.at("rows"))
    r.rows.push_back({e.at("method").get<std::string>(), e.at("dose_level").get<double>(),
                      wall_from_string(e.at("wall").get<std::string>()), roc_from_json(e),
                      e.at("rmse").get<double>(), e.at("ssim").get<double>()});
  r.paired.clear();
  for (const auto &[wall, p] : j.at("paired_task_specific_minus_low_dose").items())
    r.paired[wall] = {p.at("delta").get<double>(), p.at("ci_low").get<double>(),
                      p.at("ci_high").get<double>(), p.at("level").get<double>()};
}

void write_pgm(const Image2D &img, double lo, double hi, const fs::path &path) {
  if (!(hi > lo))
    throw ValidationError("write_pgm: empty display range");
  const std::string header = fmt::format("P5\n{} {}\n255\n", img.width(), img.height());
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (double v : img.values()) {
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    bytes.push_back(static_cast<std::uint8_t>(std::lround(t * 255.0)));
  }
  write_file_bytes(path, bytes);
}

EvaluationResult cmd_evaluate(const StudyConfig &cfg, double dose, std::optional<double> lambda) {
  cfg.validate();
  const std::size_t di = dose_index(cfg, dose);
  StageLog log(cfg, "evaluate");
  const DatasetManifest m = load_manifest(cfg);
  const double lam = lambda ? *lambda : load_crossval(cfg, dose).selected_lambda;
  const auto ts_models = load_fold_models(cfg, dose, lam);
  const auto ta_models = load_fold_models(cfg, dose, 0.0);
  log("dose {:g}: task-specific lambda {:g}, {} fold models per method", dose, lam, ts_models.size());

  const auto recs = samples_in(m, {Split::test_absent, Split::test_present});
  std::map<std::string, std::vector<Image3D>> images;
  for (const auto &name : kMethods)
    images[name].reserve(recs.size());
  for (const auto *rec : recs) {
    Image3D low = load_volume(cfg, *rec, dose);
    images["normal_dose"].push_back(load_volume(cfg, *rec, 1.0));
    images["task_agnostic"].push_back(denoise_ensemble(ta_models, low));
    images["task_specific"].push_back(denoise_ensemble(ts_models, low));
    images["low_dose"].push_back(std::move(low));
  }

  const ChannelSet channels = build_channels(cfg.phantom.grid, cfg.band_edges);
  const Ridge ridge{0.0, cfg.ridge_relative};
  const fs::path dir = dose_dir(cfg, "eval", dose);

  EvaluationResult result;
  result.dose = dose;
  result.lambda = lam;
  std::map<std::string, std::vector<ScoreRow>> scores;
  for (std::size_t mi = 0; mi < kMethods.size(); ++mi) {
    const std::string &method = kMethods[mi];
    const auto &imgs = images.at(method);
    scores[method] = observer_study(m, recs, imgs, channels, ridge);
    write_scores_csv(scores[method], dir / ("scores_" + method + ".csv"));

    // Fidelity metrics are per-study means over the defect-absent test set.
    double rmse_sum = 0, ssim_sum = 0, n = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      if (recs[i]->split != Split::test_absent)
        continue;
      rmse_sum += rmse(imgs[i], images.at("normal_dose")[i]);
      ssim_sum += ssim(imgs[i], images.at("normal_dose")[i]);
      n += 1;
    }

    for (Wall wall : {Wall::anterior, Wall::inferior}) {
      const auto s = wall_scores(scores[method], wall);
      RngStream rng(cfg.seed, mix_ids(kBootStream, mix_ids(di, mix_ids(mi, static_cast<std::uint64_t>(wall)))));
      MetricRow row{method, dose, wall, auc_bootstrap_ci(s.present, s.absent, rng, cfg.n_boot),
                    rmse_sum / n, ssim_sum / n};
      log("{} {} {}: AUC {:.4f} [{:.4f}, {:.4f}], boot stream {:#x}, RMSE {:.4f}, SSIM {:.4f}",
          dose_key(dose), method, to_string(wall), row.roc.auc, row.roc.ci_low, row.roc.ci_high,
          rng.stream_id(), row.rmse, row.ssim);
      result.rows.push_back(row);
    }
  }

  for (Wall wall : {Wall::anterior, Wall::inferior}) {
    const auto ts = wall_scores(scores.at("task_specific"), wall);
    const auto ld = wall_scores(scores.at("low_dose"), wall);
    RngStream rng(cfg.seed, mix_ids(kPairedStream, mix_ids(di, static_cast<std::uint64_t>(wall))));
    result.paired[to_string(wall)] =
        auc_paired_bootstrap(ts.present, ts.absent, ld.present, ld.absent, rng, cfg.n_boot, 0.90);
    const auto &p = result.paired[to_string(wall)];
    log("{} {}: task-specific minus low-dose AUC {:.4f}, 90% CI [{:.4f}, {:.4f}]", dose_key(dose),
        to_string(wall), p.delta, p.ci_low, p.ci_high);
  }

  // Defect contrast on the most severe defects.
  for (const auto &method : kMethods) {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto &rec = *recs[i];
      if (!rec.defect || rec.defect->severity != 0.25)
        continue;
      const LvMask mask = lv_mask_from_geometry(m.study(rec.study_id).geometry, m.grid, m.n_slices);
      sum += defect_contrast(images.at(method)[i], mask, *rec.defect);
      ++count;
    }
    if (count == 0)
      throw DataError("no 25% severity defects in the test set");
    result.contrast[method] = sum / static_cast<double>(count);
    log("{} {}: mean 25% defect contrast {:.4f} over {} samples", dose_key(dose), method,
        result.contrast[method], count);
  }

  // Qualitative panels: first defect-present test study, 60 deg 25 % defects.
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto &rec = *recs[i];
    if (!rec.defect || rec.study_id != samples_in(m, {Split::test_present}).front()->study_id ||
        rec.defect->extent_deg != 60.0 || rec.defect->severity != 0.25)
      continue;
    const Image2D ref = images.at("normal_dose")[i].slice(static_cast<std::size_t>(rec.centroid->slice));
    const double hi = *std::ranges::max_element(ref.values());
    for (const auto &method : kMethods)
      write_pgm(images.at(method)[i].slice(static_cast<std::size_t>(rec.centroid->slice)), 0.0, hi,
                dir / "panels" / (rec.sample_id + "_" + method + ".pgm"));
  }

  std::string csv = "method,dose_level,wall,auc,ci_low,ci_high,rmse,ssim\n";
  for (const auto &r : result.rows)
    csv += fmt::format("{},{},{},{},{},{},{},{}\n", r.method, dose_key(r.dose), to_string(r.wall),
                       fmt_double(r.roc.auc), fmt_double(r.roc.ci_low), fmt_double(r.roc.ci_high),
                       fmt_double(r.rmse), fmt_double(r.ssim));
  write_text(dir / "results.csv", csv);
  write_text(dir / "results.json", nlohmann::json(result).dump(2) + "\n");
  return result;
}

EvaluationResult load_evaluation(const StudyConfig &cfg, double dose) {
  return read_json(dose_dir(cfg, "eval", dose) / "results.json").get<EvaluationResult>();
}

// ---------------------------------------------------------------- report

void cmd_report(const StudyConfig &cfg) {
  cfg.validate();
  StageLog log(cfg, "report");
  std::vector<std::string> missing;
  for (double p : cfg.dose_levels) {
    const fs::path path = dose_dir(cfg, "eval", p) / "results.json";
    if (!fs::exists(path))
      missing.push_back(path.string());
  }
  if (!missing.empty()) {
    std::string msg = "report inputs missing (run 'taskdn evaluate' first):";
    for (const auto &p : missing)
      msg += "\n  " + p;
    throw DataError(msg);
  }

  std::vector<EvaluationResult> results;
  for (double p : cfg.dose_levels)
    results.push_back(load_evaluation(cfg, p));

  std::string md = "# Evaluation summary\n\n";
  md += "| Method | Dose | Wall | AUC | 95% CI | RMSE | SSIM |\n";
  md += "|---|---|---|---|---|---|---|\n";
  std::string auc_csv = "method,dose_level,wall,auc,ci_low,ci_high\n";
  std::string fidelity_csv = "method,dose_level,rmse,ssim\n";
  for (const auto &r : results) {
    std::set<std::string> seen;
    for (const auto &row : r.rows) {
      md += fmt::format("| {} | {:g} | {} | {:.3f} | [{:.3f}, {:.3f}] | {:.3f} | {:.3f} |\n",
                        row.method, row.dose, to_string(row.wall), row.roc.auc, row.roc.ci_low,
                        row.roc.ci_high, row.rmse, row.ssim);
      auc_csv += fmt::format("{},{},{},{},{},{}\n", row.method, dose_key(row.dose),
                             to_string(row.wall), fmt_double(row.roc.auc),
                             fmt_double(row.roc.ci_low), fmt_double(row.roc.ci_high));
      if (seen.insert(row.method).second)
        fidelity_csv += fmt::format("{},{},{},{}\n", row.method, dose_key(row.dose),
                                    fmt_double(row.rmse), fmt_double(row.ssim));
    }
  }
  md += "\n## Task-specific vs low-dose (paired bootstrap, 90% CI)\n\n";
  md += "| Dose | Selected lambda | Wall | Delta AUC | CI |\n|---|---|---|---|---|\n";
  for (const auto &r : results)
    for (const auto &[wall, p] : r.paired)
      md += fmt::format("| {:g} | {:g} | {} | {:+.3f} | [{:+.3f}, {:+.3f}] |\n", r.dose, r.lambda,
                        wall, p.delta, p.ci_low, p.ci_high);
  md += "\n## Mean defect contrast, 25% severity\n\n| Dose |";
  for (const auto &method : kMethods)
    md += " " + method + " |";
  md += "\n|---|";
  for (std::size_t i = 0; i < kMethods.size(); ++i)
    md += "---|";
  md += "\n";
  for (const auto &r : results) {
    md += fmt::format("| {:g} |", r.dose);
    for (const auto &method : kMethods)
      md += fmt::format(" {:.3f} |", r.contrast.at(method));
    md += "\n";
  }

  const fs::path dir = cfg.out_dir / "report";
  write_text(dir / "summary.md", md);
  write_text(dir / "auc_by_wall.csv", auc_csv);
  write_text(dir / "fidelity_metrics.csv", fidelity_csv);
  log("wrote {}", dir.string());
}

} // namespace taskdn
