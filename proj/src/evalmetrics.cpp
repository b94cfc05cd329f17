#include "taskdn/evalmetrics.hpp"

#include <algorithm>
#include <cmath>

namespace taskdn {

namespace {

// 2 * (#greater + 0.5 #ties), exact in integers.
std::uint64_t doubled_wins(std::span<const double> present, std::vector<double> absent_sorted) {
  std::uint64_t acc = 0;
  for (double p : present) {
    const auto lo = std::ranges::lower_bound(absent_sorted, p);
    const auto hi = std::upper_bound(lo, absent_sorted.end(), p);
    acc += 2 * static_cast<std::uint64_t>(lo - absent_sorted.begin()) +
           static_cast<std::uint64_t>(hi - lo);
  }
  return acc;
}

double percentile(std::vector<double> &sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double f = pos - static_cast<double>(i);
  if (i + 1 >= sorted.size())
    return sorted.back();
  return sorted[i] + f * (sorted[i + 1] - sorted[i]);
}

std::vector<double> resample(std::span<const double> v, const std::vector<std::size_t> &idx) {
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out[i] = v[idx[i]];
  return out;
}

std::vector<std::size_t> draw_indices(std::size_t n, RngStream &rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  for (auto &i : idx)
    i = pick(rng);
  return idx;
}

} // namespace

double auc_mann_whitney(std::span<const double> present, std::span<const double> absent) {
  if (present.empty() || absent.empty())
    throw ValidationError("auc_mann_whitney: both score sets must be nonempty");
  std::vector<double> a(absent.begin(), absent.end());
  std::ranges::sort(a);
  const double pairs = static_cast<double>(present.size()) * static_cast<double>(absent.size());
  return (static_cast<double>(doubled_wins(present, std::move(a))) / 2.0) / pairs;
}

RocResult auc_bootstrap_ci(std::span<const double> present, std::span<const double> absent,
                           RngStream &rng, std::size_t n_boot, double level) {
  if (present.size() < 5 || absent.size() < 5)
    throw ValidationError("auc_bootstrap_ci: each class needs at least 5 scores");
  if (n_boot < 1 || !(level > 0 && level < 1))
    throw ValidationError("auc_bootstrap_ci: invalid n_boot or level");
  RocResult r;
  r.auc = auc_mann_whitney(present, absent);
  r.n_present = present.size();
  r.n_absent = absent.size();
  r.n_boot = n_boot;
  r.seed = rng.seed();
  r.level = level;
  std::vector<double> reps(n_boot);
  for (auto &rep : reps) {
    const auto ip = draw_indices(present.size(), rng);
    const auto ia = draw_indices(absent.size(), rng);
    rep = auc_mann_whitney(resample(present, ip), resample(absent, ia));
  }
  std::ranges::sort(reps);
  r.ci_low = percentile(reps, (1.0 - level) / 2.0);
  r.ci_high = percentile(reps, (1.0 + level) / 2.0);
  if (r.ci_low > r.auc || r.ci_high < r.auc) {
    r.widened = true;
    r.ci_low = std::min(r.ci_low, r.auc);
    r.ci_high = std::max(r.ci_high, r.auc);
  }
  return r;
}

PairedAucDifference auc_paired_bootstrap(std::span<const double> present_a,
                                         std::span<const double> absent_a,
                                         std::span<const double> present_b,
                                         std::span<const double> absent_b, RngStream &rng,
                                         std::size_t n_boot, double level) {
  if (present_a.size() != present_b.size() || absent_a.size() != absent_b.size())
    throw ValidationError("auc_paired_bootstrap: methods must score the same cases");
  if (present_a.size() < 5 || absent_a.size() < 5)
    throw ValidationError("auc_paired_bootstrap: each class needs at least 5 scores");
  if (n_boot < 1 || !(level > 0 && level < 1))
    throw ValidationError("auc_paired_bootstrap: invalid n_boot or level");
  PairedAucDifference d;
  d.level = level;
  d.delta = auc_mann_whitney(present_a, absent_a) - auc_mann_whitney(present_b, absent_b);
  std::vector<double> reps(n_boot);
  for (auto &rep : reps) {
    const auto ip = draw_indices(present_a.size(), rng);
    const auto ia = draw_indices(absent_a.size(), rng);
    rep = auc_mann_whitney(resample(present_a, ip), resample(absent_a, ia)) -
          auc_mann_whitney(resample(present_b, ip), resample(absent_b, ia));
  }
  std::ranges::sort(reps);
  d.ci_low = percentile(reps, (1.0 - level) / 2.0);
  d.ci_high = percentile(reps, (1.0 + level) / 2.0);
  return d;
}

double rmse(const Image3D &a, const Image3D &b) {
  if (!a.same_shape(b))
    throw ValidationError("rmse: image dims differ");
  double acc = 0.0;
  auto va = a.values(), vb = b.values();
  for (std::size_t i = 0; i < va.size(); ++i)
    acc += (va[i] - vb[i]) * (va[i] - vb[i]);
  return std::sqrt(acc / static_cast<double>(va.size()));
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size * size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
      w[y * size + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += w[y * size + x];
    }
  for (double &v : w)
    v /= total;
  return w;
}

double ssim(const Image3D &a, const Image3D &b, const SsimConfig &cfg) {
  if (!a.same_shape(b))
    throw ValidationError("ssim: image dims differ");
  if (cfg.window == 0 || cfg.window > a.width() || cfg.window > a.height())
    throw ValidationError("ssim: window larger than the slice");
  double range = 0.0;
  if (cfg.data_range) {
    range = *cfg.data_range;
  } else {
    const auto [amin, amax] = std::ranges::minmax(a.values());
    const auto [bmin, bmax] = std::ranges::minmax(b.values());
    range = std::max(amax, bmax) - std::min(amin, bmin);
  }
  if (!(range > 0.0)) {
    if (a == b)
      return 1.0;
    throw ValidationError("ssim: zero data range for differing images");
  }
  const double c1 = (cfg.k1 * range) * (cfg.k1 * range);
  const double c2 = (cfg.k2 * range) * (cfg.k2 * range);
  const auto w = gaussian_window(cfg.window, cfg.sigma);
  const std::size_t nw = cfg.window;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < a.n_slices(); ++s) {
    for (std::size_t y0 = 0; y0 + nw <= a.height(); ++y0) {
      for (std::size_t x0 = 0; x0 + nw <= a.width(); ++x0) {
        double ma = 0, mb = 0;
        for (std::size_t j = 0; j < nw; ++j)
          for (std::size_t i = 0; i < nw; ++i) {
            const double wt = w[j * nw + i];
            ma += wt * a(x0 + i, y0 + j, s);
            mb += wt * b(x0 + i, y0 + j, s);
          }
        double va = 0, vb = 0, cov = 0;
        for (std::size_t j = 0; j < nw; ++j)
          for (std::size_t i = 0; i < nw; ++i) {
            const double wt = w[j * nw + i];
            const double da = a(x0 + i, y0 + j, s) - ma, db = b(x0 + i, y0 + j, s) - mb;
            va += wt * da * da;
            vb += wt * db * db;
            cov += wt * da * db;
          }
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

} // namespace taskdn
