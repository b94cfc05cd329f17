#pragma once

#include "taskdn/nn/loss.hpp"
#include "taskdn/nn/network.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

namespace taskdn {

using nn::ArchConfig;
using nn::LossConfig;
using nn::LossTerms;

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  double validation_fraction = 0.25; ///< used when no explicit validation set is given
  /// Side of the square in-plane crop (centred on the grid) used for training;
  /// 0 trains on the full slice. Inference always runs on the full slice.
  std::size_t crop = 0;

  void validate() const;
};

void to_json(nlohmann::json &j, const TrainConfig &c);
void from_json(const nlohmann::json &j, TrainConfig &c);

/// One (low-dose, normal-dose) pair. Defect-absent samples carry no centroid
/// but list the canonical centroids of the study's defect types.
struct TrainingSample {
  std::string id;
  std::string study_id;
  Image3D low;
  Image3D normal;
  std::optional<VoxelCoord> centroid;
  std::vector<VoxelCoord> canonical_centroids;
  VoxelCoord lv_center;
};

struct EpochRecord {
  std::size_t epoch = 0;
  LossTerms train;
  LossTerms val;
};

struct TrainResult {
  nn::Params<float> params;
  std::vector<EpochRecord> history;
};

/// Per-sample intensity scale applied before the network and inverted after.
double standardization_scale(const Image3D &low);

/// Loss of one prediction in image units. `centroid` is required when the
/// channel term is evaluated on a defect-present sample.
LossTerms loss_eq1(const Image3D &pred, const Image3D &target,
                   const std::optional<VoxelCoord> &centroid, const LossConfig &cfg);

using ProgressFn = std::function<void(const EpochRecord &)>;

/// Mini-batch Adam on the two-term loss. Epoch 0 in the history is the loss of
/// the initial parameters; epochs 1..E are means over each epoch's batches.
TrainResult train(const std::vector<TrainingSample> &train_set,
                  const std::vector<TrainingSample> &val_set, const ArchConfig &arch,
                  const LossConfig &loss_cfg, const TrainConfig &train_cfg,
                  const ProgressFn &progress = {});

/// Splits by study using validation_fraction, then trains.
TrainResult train(const std::vector<TrainingSample> &dataset, const ArchConfig &arch,
                  const LossConfig &loss_cfg, const TrainConfig &train_cfg);

Image3D denoise(const nn::Params<float> &params, const Image3D &low);
/// Mean of the denoised outputs of several models (fold ensemble).
Image3D denoise_ensemble(const std::vector<nn::Params<float>> &models, const Image3D &low);

void save_checkpoint(const nn::Params<float> &params, const std::filesystem::path &path);
nn::Params<float> load_checkpoint(const std::filesystem::path &path);

void write_history_csv(const std::vector<EpochRecord> &history, const std::filesystem::path &path);

} // namespace taskdn
