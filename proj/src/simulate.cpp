#include "taskdn/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include <fftw3.h>

namespace taskdn {

void Geometry::validate() const {
  if (n_angles < 1)
    throw ValidationError("Geometry: n_angles must be >= 1");
  if (!(bin_width > 0))
    throw ValidationError("Geometry: bin_width must be positive");
}

void ReconConfig::validate(const Geometry &g) const {
  if (n_iterations < 1)
    throw ValidationError("ReconConfig: n_iterations must be >= 1");
  if (n_subsets < 1 || g.n_angles % n_subsets != 0)
    throw ValidationError("ReconConfig: n_subsets must divide n_angles");
  if (!(init_value > 0))
    throw ValidationError("ReconConfig: init_value must be positive");
}

void FilterConfig::validate() const {
  if (!(cutoff > 0 && cutoff <= 0.5))
    throw ValidationError("FilterConfig: cutoff must lie in (0, 0.5]");
  if (order < 1)
    throw ValidationError("FilterConfig: order must be >= 1");
}

void to_json(nlohmann::json &j, const Geometry &g) {
  j = {{"n_angles", g.n_angles}, {"n_bins", g.n_bins}, {"bin_width", g.bin_width}};
}
void from_json(const nlohmann::json &j, Geometry &g) {
  Geometry d;
  g.n_angles = j.value("n_angles", d.n_angles);
  g.n_bins = j.value("n_bins", d.n_bins);
  g.bin_width = j.value("bin_width", d.bin_width);
}
void to_json(nlohmann::json &j, const ReconConfig &c) {
  j = {{"n_iterations", c.n_iterations}, {"n_subsets", c.n_subsets}, {"init_value", c.init_value}};
}
void from_json(const nlohmann::json &j, ReconConfig &c) {
  ReconConfig d;
  c.n_iterations = j.value("n_iterations", d.n_iterations);
  c.n_subsets = j.value("n_subsets", d.n_subsets);
  c.init_value = j.value("init_value", d.init_value);
}
void to_json(nlohmann::json &j, const FilterConfig &c) {
  j = {{"kind", "butterworth"}, {"order", c.order}, {"cutoff", c.cutoff}};
}
void from_json(const nlohmann::json &j, FilterConfig &c) {
  FilterConfig d;
  if (j.value("kind", std::string("butterworth")) != "butterworth")
    throw ConfigError("FilterConfig: only the butterworth kind is supported");
  c.order = j.value("order", d.order);
  c.cutoff = j.value("cutoff", d.cutoff);
}

Projector::Projector(std::size_t width, std::size_t height, const Geometry &geom)
    : width_(width), height_(height), n_angles_(geom.n_angles),
      n_bins_(geom.n_bins == 0 ? width : geom.n_bins) {
  geom.validate();
  if (width == 0 || height == 0)
    throw ValidationError("Projector: empty image grid");
  const std::size_t np = width * height;
  lower_bin_.resize(n_angles_ * np);
  lower_weight_.resize(n_angles_ * np);
  upper_weight_.resize(n_angles_ * np);
  const double cx = static_cast<double>(width) / 2.0;
  const double cy = static_cast<double>(height) / 2.0;
  const double half = static_cast<double>(n_bins_) / 2.0;
  for (std::size_t a = 0; a < n_angles_; ++a) {
    const double theta = std::numbers::pi * static_cast<double>(a) / static_cast<double>(n_angles_);
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double u = (static_cast<double>(x) - cx) * c + (static_cast<double>(y) - cy) * s;
        const double t = u / geom.bin_width + half;
        const double b0 = std::floor(t);
        const double frac = t - b0;
        const std::size_t k = a * np + y * width + x;
        const auto lo = static_cast<long>(b0);
        lower_bin_[k] = static_cast<std::int32_t>(lo);
        lower_weight_[k] = (lo >= 0 && lo < static_cast<long>(n_bins_)) ? 1.0 - frac : 0.0;
        upper_weight_[k] = (lo + 1 >= 0 && lo + 1 < static_cast<long>(n_bins_)) ? frac : 0.0;
      }
    }
  }
}

void Projector::forward_angle(std::span<const double> img, std::size_t angle,
                              std::span<double> row) const {
  const std::size_t np = width_ * height_;
  const std::size_t base = angle * np;
  for (std::size_t p = 0; p < np; ++p) {
    const double v = img[p];
    if (v == 0.0)
      continue;
    const long lo = lower_bin_[base + p];
    if (lower_weight_[base + p] != 0.0)
      row[lo] += v * lower_weight_[base + p];
    if (upper_weight_[base + p] != 0.0)
      row[lo + 1] += v * upper_weight_[base + p];
  }
}

void Projector::back_angle(std::span<const double> row, std::size_t angle,
                           std::span<double> img) const {
  const std::size_t np = width_ * height_;
  const std::size_t base = angle * np;
  for (std::size_t p = 0; p < np; ++p) {
    const long lo = lower_bin_[base + p];
    double acc = 0.0;
    if (lower_weight_[base + p] != 0.0)
      acc += row[lo] * lower_weight_[base + p];
    if (upper_weight_[base + p] != 0.0)
      acc += row[lo + 1] * upper_weight_[base + p];
    img[p] += acc;
  }
}

Sinogram Projector::forward(const Image2D &img) const {
  if (img.width() != width_ || img.height() != height_)
    throw ValidationError("forward_project: image dims do not match projector");
  if (!all_finite(img.values()))
    throw ValidationError("forward_project: non-finite image value");
  std::vector<double> out(n_angles_ * n_bins_, 0.0);
  for (std::size_t a = 0; a < n_angles_; ++a)
    forward_angle(img.values(), a, std::span<double>(out).subspan(a * n_bins_, n_bins_));
  // Negative inputs are legal for the linear operator (adjoint tests), so
  // bypass the nonnegativity check of the checked constructor.
  Sinogram s(n_angles_, n_bins_);
  std::ranges::copy(out, s.values().begin());
  return s;
}

Image2D Projector::back(const Sinogram &sino) const {
  if (sino.n_angles() != n_angles_ || sino.n_bins() != n_bins_)
    throw ValidationError("back_project: sinogram dims do not match geometry");
  Image2D img(width_, height_);
  for (std::size_t a = 0; a < n_angles_; ++a)
    back_angle(sino.values().subspan(a * n_bins_, n_bins_), a, img.values());
  return img;
}

Sinogram forward_project(const Image2D &img, const Geometry &geom) {
  return Projector(img.width(), img.height(), geom).forward(img);
}

Image2D back_project(const Sinogram &sino, const Geometry &geom, std::size_t width,
                     std::size_t height) {
  return Projector(width, height, geom).back(sino);
}

Sinogram poisson_counts(const Sinogram &sino, double scale, RngStream &rng) {
  if (!(scale > 0))
    throw ValidationError("poisson_counts: scale must be positive");
  double total = 0.0;
  for (double v : sino.values()) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ValidationError("poisson_counts: expected values must be finite and nonnegative");
    total += v;
  }
  Sinogram out(sino.n_angles(), sino.n_bins(), SinogramKind::counts);
  if (total == 0.0)
    return out;
  const double k = scale / total;
  auto in = sino.values();
  auto o = out.values();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double mean = in[i] * k;
    if (mean > 0.0)
      o[i] = static_cast<double>(std::poisson_distribution<long long>(mean)(rng));
  }
  return out;
}

Sinogram binomial_thin(const Sinogram &sino, double p, RngStream &rng) {
  if (!(p >= 0.0 && p <= 1.0))
    throw ValidationError("binomial_thin: p must lie in [0, 1]");
  for (double v : sino.values())
    if (!(v >= 0.0) || v != std::floor(v))
      throw ValidationError("binomial_thin: input must be nonnegative integral counts");
  Sinogram out(sino.n_angles(), sino.n_bins(), SinogramKind::counts);
  auto in = sino.values();
  auto o = out.values();
  if (p == 1.0) {
    std::ranges::copy(in, o.begin());
    return out;
  }
  if (p == 0.0)
    return out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const auto k = static_cast<long long>(in[i]);
    if (k > 0)
      o[i] = static_cast<double>(std::binomial_distribution<long long>(k, p)(rng));
  }
  return out;
}

ReconResult osem_reconstruct(const Sinogram &sino, const Projector &proj, const ReconConfig &cfg,
                             const Image2D &init) {
  if (sino.n_angles() != proj.n_angles() || sino.n_bins() != proj.n_bins())
    throw ValidationError("osem_reconstruct: sinogram dims do not match geometry");
  if (init.width() != proj.width() || init.height() != proj.height())
    throw ValidationError("osem_reconstruct: init image dims do not match projector");
  if (cfg.n_iterations < 1 || cfg.n_subsets < 1 || proj.n_angles() % cfg.n_subsets != 0)
    throw ValidationError("osem_reconstruct: n_subsets must divide n_angles");
  for (double v : sino.values())
    if (!(v >= 0.0))
      throw ValidationError("osem_reconstruct: negative sinogram value");

  const std::size_t np = proj.width() * proj.height();
  const std::size_t nb = proj.n_bins();
  const std::size_t n_sub = cfg.n_subsets;

  // Subset q holds angles q, q + n_sub, q + 2 n_sub, ...
  std::vector<std::vector<double>> sens(n_sub, std::vector<double>(np, 0.0));
  std::vector<double> ones(nb, 1.0);
  for (std::size_t a = 0; a < proj.n_angles(); ++a)
    proj.back_angle(ones, a, sens[a % n_sub]);

  ReconResult r{init, 0};
  for (std::size_t p = 0; p < np; ++p) {
    bool any = false;
    for (const auto &s : sens)
      any = any || s[p] > 0.0;
    r.n_excluded += any ? 0 : 1;
  }

  auto f = r.image.values();
  std::vector<double> row(nb), ratio(nb), update(np);
  for (std::size_t it = 0; it < cfg.n_iterations; ++it) {
    for (std::size_t q = 0; q < n_sub; ++q) {
      std::ranges::fill(update, 0.0);
      for (std::size_t a = q; a < proj.n_angles(); a += n_sub) {
        std::ranges::fill(row, 0.0);
        proj.forward_angle(f, a, row);
        auto meas = sino.values().subspan(a * nb, nb);
        for (std::size_t b = 0; b < nb; ++b)
          ratio[b] = row[b] > 0.0 ? meas[b] / row[b] : 0.0;
        proj.back_angle(ratio, a, update);
      }
      const auto &sq = sens[q];
      for (std::size_t p = 0; p < np; ++p)
        if (sq[p] > 0.0)
          f[p] *= update[p] / sq[p];
    }
  }
  return r;
}

ReconResult osem_reconstruct(const Sinogram &sino, const Geometry &geom, const ReconConfig &cfg,
                             std::size_t width, std::size_t height) {
  cfg.validate(geom);
  const Projector proj(width, height, geom);
  return osem_reconstruct(sino, proj, cfg, Image2D(width, height, cfg.init_value));
}

namespace {

struct FftwFree {
  void operator()(void *p) const { fftw_free(p); }
};

void butterworth_inplace(std::span<double> slice, std::size_t w, std::size_t h,
                         const FilterConfig &cfg) {
  const std::size_t wc = w / 2 + 1;
  std::unique_ptr<double, FftwFree> real(static_cast<double *>(fftw_malloc(sizeof(double) * w * h)));
  std::unique_ptr<fftw_complex, FftwFree> spec(
      static_cast<fftw_complex *>(fftw_malloc(sizeof(fftw_complex) * h * wc)));
  const fftw_plan fwd = fftw_plan_dft_r2c_2d(static_cast<int>(h), static_cast<int>(w), real.get(),
                                             spec.get(), FFTW_ESTIMATE);
  const fftw_plan inv = fftw_plan_dft_c2r_2d(static_cast<int>(h), static_cast<int>(w), spec.get(),
                                             real.get(), FFTW_ESTIMATE);
  std::ranges::copy(slice, real.get());
  fftw_execute(fwd);
  const double norm = 1.0 / static_cast<double>(w * h);
  for (std::size_t ky = 0; ky < h; ++ky) {
    const double fy = static_cast<double>(ky <= h / 2 ? static_cast<long>(ky)
                                                      : static_cast<long>(ky) - static_cast<long>(h)) /
                      static_cast<double>(h);
    for (std::size_t kx = 0; kx < wc; ++kx) {
      const double fx = static_cast<double>(kx) / static_cast<double>(w);
      const double rho = std::hypot(fx, fy);
      const double gain =
          1.0 / std::sqrt(1.0 + std::pow(rho / cfg.cutoff, 2.0 * static_cast<double>(cfg.order)));
      spec.get()[ky * wc + kx][0] *= gain * norm;
      spec.get()[ky * wc + kx][1] *= gain * norm;
    }
  }
  fftw_execute(inv);
  std::copy(real.get(), real.get() + w * h, slice.begin());
  fftw_destroy_plan(fwd);
  fftw_destroy_plan(inv);
}

} // namespace

Image2D post_filter(const Image2D &img, const FilterConfig &cfg) {
  cfg.validate();
  Image2D out = img;
  butterworth_inplace(out.values(), out.width(), out.height(), cfg);
  return out;
}

Image3D post_filter(const Image3D &img, const FilterConfig &cfg) {
  cfg.validate();
  Image3D out = img;
  for (std::size_t s = 0; s < out.n_slices(); ++s)
    butterworth_inplace(out.slice_values(s), out.width(), out.height(), cfg);
  return out;
}

} // namespace taskdn
