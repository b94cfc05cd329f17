#pragma once

// Config-driven experiment pipeline: dataset synthesis, fold training,
// lambda selection by observer study, test evaluation and reporting.
//
// Output tree under StudyConfig::out_dir:
//   dataset/manifest.json, dataset/<study>/<sample>_nd.raw, ..._ld<p>.raw
//   models/dose_<p>/lambda_<v>/fold_<k>.tdnw (+ history_fold_<k>.csv)
//   crossval/dose_<p>/crossval.json, lambda_<v>/fold_<k>_scores.csv
//   eval/dose_<p>/results.json, results.csv, scores_<method>.csv, panels/*.pgm
//   report/summary.md, auc_by_wall.csv, fidelity_metrics.csv
//   logs/<stage>.log

#include "taskdn/channels.hpp"
#include "taskdn/denoiser.hpp"
#include "taskdn/evalmetrics.hpp"
#include "taskdn/observer.hpp"
#include "taskdn/phantom.hpp"
#include "taskdn/simulate.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace taskdn {

struct StudyConfig {
  std::uint64_t seed = 20240611;
  std::size_t n_train_studies = 48;
  std::size_t n_val = 12;
  std::size_t n_test_absent = 24;
  std::size_t n_test_present_base = 24;
  std::vector<double> dose_levels{0.125, 0.0625};
  std::vector<double> lambda_grid{0.0, 0.5, 1.0, 2.0, 4.0, 8.0};
  std::size_t folds = 4;
  double counts_per_slice = 2e5; ///< expected normal-dose counts per slice sinogram
  PhantomSpec phantom;
  Geometry geometry;
  ReconConfig recon;
  FilterConfig filter;
  std::vector<double> band_edges = default_band_edges();
  ArchConfig arch; ///< in_channels/height/width are forced to the phantom shape
  TrainConfig train;
  nn::AbsentCentroidPolicy absent_policy = nn::AbsentCentroidPolicy::canonical_random;
  std::size_t n_boot = 2000;
  double ridge_relative = 1e-6;
  std::filesystem::path out_dir = "taskdn_out";

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json &j, const StudyConfig &c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json &j, StudyConfig &c);

/// Parses and validates a JSON config; all failures surface as ConfigError.
StudyConfig load_config(const std::filesystem::path &path);

enum class Split { train, validation, test_absent, test_present };
std::string to_string(Split s);
Split split_from_string(const std::string &s);

struct StudyRecord {
  std::string study_id;
  Split split = Split::train;
  int fold = -1; ///< training pool only
  LvGeometry geometry;
  /// Defect type name -> centroid that type would have in this study.
  std::vector<std::pair<std::string, VoxelCoord>> canonical_centroids;
  std::uint64_t rng_stream = 0;
};

struct SampleRecord {
  std::string sample_id;
  std::string study_id;
  Split split = Split::train;
  int fold = -1;
  std::optional<DefectSpec> defect;
  std::optional<VoxelCoord> centroid;
  /// Dose key ("1" for normal dose, "0.125", ...) -> path relative to out_dir.
  std::map<std::string, std::string> files;
  std::uint64_t rng_stream = 0;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t grid = 0;
  std::size_t n_slices = 0;
  std::vector<double> dose_levels;
  std::vector<StudyRecord> studies;
  std::vector<SampleRecord> samples;

  const StudyRecord &study(const std::string &id) const;
  /// Throws DataError if a study id shows up in two splits, if a sample's
  /// split disagrees with its study, or if test populations share studies.
  void check_no_leakage() const;
};

void to_json(nlohmann::json &j, const DatasetManifest &m);
void from_json(const nlohmann::json &j, DatasetManifest &m);

std::string dose_key(double p);
std::filesystem::path manifest_path(const StudyConfig &cfg);
std::filesystem::path model_path(const StudyConfig &cfg, double dose, double lambda, std::size_t fold);

DatasetManifest cmd_dataset(const StudyConfig &cfg);
DatasetManifest load_manifest(const StudyConfig &cfg);

/// Training-pool study ids split into (train, held-out) for one fold.
struct FoldSplit {
  std::vector<std::string> train_studies;
  std::vector<std::string> holdout_studies;
};
FoldSplit fold_split(const DatasetManifest &m, std::size_t fold);

/// Trains every fold model for one (dose, lambda) and writes checkpoints.
std::vector<nn::Params<float>> cmd_train(const StudyConfig &cfg, double dose, double lambda);
std::vector<nn::Params<float>> load_fold_models(const StudyConfig &cfg, double dose, double lambda);

struct ScoreRow {
  std::string study_id;
  std::string defect_type;
  Wall wall = Wall::anterior;
  Label label = Label::defect_absent;
  double score = 0.0;
};

void write_scores_csv(const std::vector<ScoreRow> &rows, const std::filesystem::path &path);
std::vector<ScoreRow> read_scores_csv(const std::filesystem::path &path);

/// Splits score rows of one wall by label.
LooScores wall_scores(const std::vector<ScoreRow> &rows, Wall wall);

/// Observer study on a set of reconstructed volumes. Defect-present volumes
/// are scored at their own centroid; each defect-absent volume is scored at
/// the canonical centroid of every defect type of its study. Scores are
/// leave-one-out CHO statistics, computed separately per wall.
std::vector<ScoreRow> observer_study(const DatasetManifest &m,
                                     const std::vector<const SampleRecord *> &samples,
                                     const std::vector<Image3D> &images, const ChannelSet &channels,
                                     Ridge ridge);

struct LambdaScore {
  double lambda = 0.0;
  std::vector<double> fold_auc; ///< mean over walls, per fold
  double mean_auc = 0.0;
};

/// argmax of mean_auc, ties broken toward the smaller lambda.
double select_lambda(const std::vector<LambdaScore> &scores);

struct CrossvalResult {
  double dose = 0.0;
  std::vector<LambdaScore> lambdas;
  double selected_lambda = 0.0;
};

CrossvalResult cmd_crossval(const StudyConfig &cfg, double dose);
/// Reads crossval/dose_<p>/crossval.json.
CrossvalResult load_crossval(const StudyConfig &cfg, double dose);

inline const std::vector<std::string> kMethods{"normal_dose", "low_dose", "task_agnostic",
                                               "task_specific"};

struct MetricRow {
  std::string method;
  double dose = 0.0;
  Wall wall = Wall::anterior;
  RocResult roc;
  double rmse = 0.0;
  double ssim = 1.0;
};

struct EvaluationResult {
  double dose = 0.0;
  double lambda = 0.0;
  std::vector<MetricRow> rows;
  /// Per wall: task-specific minus low-dose AUC, paired bootstrap.
  std::map<std::string, PairedAucDifference> paired;
  /// Method -> mean defect contrast over the 25 % severity test subset.
  std::map<std::string, double> contrast;
};

void to_json(nlohmann::json &j, const EvaluationResult &r);
void from_json(const nlohmann::json &j, EvaluationResult &r);

/// `lambda` defaults to the cross-validated choice for this dose.
EvaluationResult cmd_evaluate(const StudyConfig &cfg, double dose,
                              std::optional<double> lambda = std::nullopt);
EvaluationResult load_evaluation(const StudyConfig &cfg, double dose);

/// Summarises every configured dose level; lists all missing inputs at once.
void cmd_report(const StudyConfig &cfg);

/// 8-bit binary PGM, linearly mapping [lo, hi] to [0, 255].
void write_pgm(const Image2D &img, double lo, double hi, const std::filesystem::path &path);

} // namespace taskdn
