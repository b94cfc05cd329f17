#pragma once

// Channelized Hotelling observer.

#include "taskdn/channels.hpp"

#include <Eigen/Dense>

namespace taskdn {

enum class Label { defect_present, defect_absent };

struct FeatureSet {
  Label label = Label::defect_absent;
  std::vector<ChannelVector> vectors;

  std::size_t dim() const { return vectors.empty() ? 0 : vectors.front().size(); }
  std::size_t size() const { return vectors.size(); }
};

/// Covariance regulariser: eps = absolute + relative * trace(S) / D.
struct Ridge {
  double absolute = 0.0;
  double relative = 0.0;

  static Ridge none() { return {}; }
  static Ridge standard() { return {0.0, 1e-6}; }
  double epsilon(const Eigen::MatrixXd &pooled_cov) const;
};

struct HotellingTemplate {
  Eigen::VectorXd delta_mean;
  Eigen::MatrixXd pooled_cov;
  double ridge = 0.0;
  Eigen::VectorXd w;
};

/// Solves (S + eps I) w = delta for symmetric S; throws NumericError when the
/// system is singular to working precision.
Eigen::VectorXd solve_template(const Eigen::MatrixXd &pooled_cov, double eps,
                               const Eigen::VectorXd &delta_mean);

HotellingTemplate hotelling_train(const FeatureSet &present, const FeatureSet &absent,
                                  Ridge ridge = Ridge::standard());
HotellingTemplate hotelling_train(const FeatureSet &present, const FeatureSet &absent,
                                  double absolute_ridge);

double apply_template(const HotellingTemplate &t, const ChannelVector &v);

struct LooScores {
  std::vector<double> present;
  std::vector<double> absent;
};

/// Leave-one-out test statistics: each vector is scored with a template whose
/// means and covariances were re-estimated without it.
LooScores loo_scores(const FeatureSet &present, const FeatureSet &absent,
                     Ridge ridge = Ridge::standard());

} // namespace taskdn
