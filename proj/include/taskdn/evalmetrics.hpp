#pragma once

// Figures of merit: nonparametric AUC with bootstrap intervals, RMSE, SSIM.

#include "taskdn/core.hpp"

#include <optional>

namespace taskdn {

struct RocResult {
  double auc = 0.5;
  double ci_low = 0.0;
  double ci_high = 1.0;
  std::size_t n_present = 0;
  std::size_t n_absent = 0;
  std::size_t n_boot = 0;
  std::uint64_t seed = 0;
  double level = 0.95;
  /// The raw percentile interval missed the point estimate and was widened.
  bool widened = false;
};

/// Mann-Whitney statistic: P(present > absent) + 0.5 P(present == absent).
double auc_mann_whitney(std::span<const double> present, std::span<const double> absent);

RocResult auc_bootstrap_ci(std::span<const double> present, std::span<const double> absent,
                           RngStream &rng, std::size_t n_boot = 2000, double level = 0.95);

struct PairedAucDifference {
  double delta = 0.0; ///< auc(a) - auc(b) on the original data
  double ci_low = 0.0;
  double ci_high = 0.0;
  double level = 0.90;
};

/// Percentile bootstrap of auc(a) - auc(b) where both methods score the same
/// cases (identical resampled indices for both).
PairedAucDifference auc_paired_bootstrap(std::span<const double> present_a,
                                         std::span<const double> absent_a,
                                         std::span<const double> present_b,
                                         std::span<const double> absent_b, RngStream &rng,
                                         std::size_t n_boot = 2000, double level = 0.90);

double rmse(const Image3D &a, const Image3D &b);

struct SsimConfig {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  std::optional<double> data_range; ///< defaults to max(a, b) - min(a, b)
};

/// Mean local SSIM over every fully-contained Gaussian window of every slice.
double ssim(const Image3D &a, const Image3D &b, const SsimConfig &cfg = {});

/// Normalised Gaussian window weights, row-major window x window.
std::vector<double> gaussian_window(std::size_t size, double sigma);

} // namespace taskdn
