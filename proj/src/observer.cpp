#include "taskdn/observer.hpp"

#include <cmath>
#include <fmt/format.h>

namespace taskdn {

namespace {

void check_sets(const FeatureSet &present, const FeatureSet &absent, std::size_t min_size) {
  if (present.size() < min_size || absent.size() < min_size)
    throw ValidationError(fmt::format("observer: each class needs at least {} vectors", min_size));
  const std::size_t d = present.dim();
  if (d == 0 || absent.dim() != d)
    throw ValidationError("observer: feature dimensions differ or are empty");
  for (const auto *set : {&present, &absent})
    for (const auto &v : set->vectors) {
      if (v.size() != d)
        throw ValidationError("observer: ragged feature vectors");
      if (!all_finite(v))
        throw ValidationError("observer: non-finite feature value");
    }
}

Eigen::VectorXd as_vector(const ChannelVector &v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Running class statistics: mean and centred scatter sum.
struct ClassStats {
  std::size_t n = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd scatter;

  explicit ClassStats(const FeatureSet &set) {
    const auto d = static_cast<Eigen::Index>(set.dim());
    mean = Eigen::VectorXd::Zero(d);
    scatter = Eigen::MatrixXd::Zero(d, d);
    for (const auto &v : set.vectors) {
      const Eigen::VectorXd x = as_vector(v);
      ++n;
      const Eigen::VectorXd delta = x - mean;
      mean += delta / static_cast<double>(n);
      scatter.noalias() += delta * (x - mean).transpose();
    }
    scatter = (0.5 * (scatter + scatter.transpose())).eval();
  }

  Eigen::MatrixXd cov() const { return scatter / static_cast<double>(n - 1); }

  // Statistics with one member removed.
  ClassStats without(const Eigen::VectorXd &x) const {
    ClassStats r = *this;
    r.n = n - 1;
    const Eigen::VectorXd delta = x - mean;
    r.mean = mean - delta / static_cast<double>(r.n);
    r.scatter = scatter - (static_cast<double>(n) / static_cast<double>(r.n)) * delta * delta.transpose();
    return r;
  }

private:
  ClassStats() = default;
};

HotellingTemplate from_stats(const ClassStats &p, const ClassStats &a, Ridge ridge) {
  HotellingTemplate t;
  t.delta_mean = p.mean - a.mean;
  t.pooled_cov = 0.5 * (p.cov() + a.cov());
  t.ridge = ridge.epsilon(t.pooled_cov);
  t.w = solve_template(t.pooled_cov, t.ridge, t.delta_mean);
  return t;
}

} // namespace

double Ridge::epsilon(const Eigen::MatrixXd &pooled_cov) const {
  return absolute + relative * pooled_cov.trace() / static_cast<double>(pooled_cov.rows());
}

Eigen::VectorXd solve_template(const Eigen::MatrixXd &pooled_cov, double eps,
                               const Eigen::VectorXd &delta_mean) {
  const auto d = pooled_cov.rows();
  const Eigen::MatrixXd k = pooled_cov + eps * Eigen::MatrixXd::Identity(d, d);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(k);
  const Eigen::VectorXd &lambda = eig.eigenvalues();
  const double rcond =
      eig.info() == Eigen::Success && lambda(d - 1) > 0.0 ? lambda(0) / lambda(d - 1) : 0.0;
  if (!(rcond > 1e-14))
    throw NumericError(
        fmt::format("hotelling_train: covariance (+ ridge {:g}) is singular, reciprocal condition "
                    "number {:.3g}",
                    eps, rcond));
  const Eigen::MatrixXd &v = eig.eigenvectors();
  return v * ((v.transpose() * delta_mean).array() / lambda.array()).matrix();
}

HotellingTemplate hotelling_train(const FeatureSet &present, const FeatureSet &absent,
                                  Ridge ridge) {
  check_sets(present, absent, 2);
  return from_stats(ClassStats(present), ClassStats(absent), ridge);
}

HotellingTemplate hotelling_train(const FeatureSet &present, const FeatureSet &absent,
                                  double absolute_ridge) {
  return hotelling_train(present, absent, Ridge{absolute_ridge, 0.0});
}

double apply_template(const HotellingTemplate &t, const ChannelVector &v) {
  if (static_cast<Eigen::Index>(v.size()) != t.w.size())
    throw ValidationError("apply_template: dimension mismatch");
  return t.w.dot(as_vector(v));
}

LooScores loo_scores(const FeatureSet &present, const FeatureSet &absent, Ridge ridge) {
  check_sets(present, absent, 3);
  const ClassStats sp(present), sa(absent);
  LooScores out;
  out.present.reserve(present.size());
  out.absent.reserve(absent.size());
  for (const auto &v : present.vectors) {
    const Eigen::VectorXd x = as_vector(v);
    out.present.push_back(from_stats(sp.without(x), sa, ridge).w.dot(x));
  }
  for (const auto &v : absent.vectors) {
    const Eigen::VectorXd x = as_vector(v);
    out.absent.push_back(from_stats(sp, sa.without(x), ridge).w.dot(x));
  }
  return out;
}

} // namespace taskdn
