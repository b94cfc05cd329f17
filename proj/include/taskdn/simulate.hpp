#pragma once

// 2-D parallel-beam acquisition per slice, count generation, binomial dose
// thinning, OSEM reconstruction and Butterworth post-filtering.

#include "taskdn/core.hpp"

#include <json.hpp>

namespace taskdn {

struct Geometry {
  std::size_t n_angles = 60; ///< uniformly spaced over 180 deg
  std::size_t n_bins = 0;    ///< 0 means "image width"
  double bin_width = 1.0;    ///< in voxels

  void validate() const;
};

struct ReconConfig {
  std::size_t n_iterations = 4;
  std::size_t n_subsets = 6;
  double init_value = 1.0;

  void validate(const Geometry &g) const;
};

struct FilterConfig {
  std::size_t order = 5;
  double cutoff = 0.25; ///< cycles/voxel

  void validate() const;
};

void to_json(nlohmann::json &j, const Geometry &g);
void from_json(const nlohmann::json &j, Geometry &g);
void to_json(nlohmann::json &j, const ReconConfig &c);
void from_json(const nlohmann::json &j, ReconConfig &c);
void to_json(nlohmann::json &j, const FilterConfig &c);
void from_json(const nlohmann::json &j, FilterConfig &c);

/// Pixel-driven projector with linear interpolation onto the detector. The
/// interpolation weights are tabulated once per (image size, geometry), and
/// back_project applies exactly the transposed weights.
class Projector {
public:
  Projector(std::size_t width, std::size_t height, const Geometry &geom);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t n_angles() const { return n_angles_; }
  std::size_t n_bins() const { return n_bins_; }

  /// Adds the projection of `img` at `angle` into `row` (length n_bins).
  void forward_angle(std::span<const double> img, std::size_t angle, std::span<double> row) const;
  /// Adds the backprojection of `row` at `angle` into `img`.
  void back_angle(std::span<const double> row, std::size_t angle, std::span<double> img) const;

  Sinogram forward(const Image2D &img) const;
  Image2D back(const Sinogram &sino) const;

private:
  std::size_t width_, height_, n_angles_, n_bins_;
  // Indexed [angle][pixel]; a zero weight marks a tap that misses the detector.
  std::vector<double> lower_weight_, upper_weight_;
  std::vector<std::int32_t> lower_bin_;
};

Sinogram forward_project(const Image2D &img, const Geometry &geom);
Image2D back_project(const Sinogram &sino, const Geometry &geom, std::size_t width,
                     std::size_t height);

/// Rescales `sino` to total `scale` counts and draws independent Poisson counts.
Sinogram poisson_counts(const Sinogram &sino, double scale, RngStream &rng);

/// Keeps each detected count independently with probability p.
Sinogram binomial_thin(const Sinogram &sino, double p, RngStream &rng);

struct ReconResult {
  Image2D image;
  std::size_t n_excluded = 0; ///< voxels with zero total sensitivity, left at init
};

ReconResult osem_reconstruct(const Sinogram &sino, const Geometry &geom, const ReconConfig &cfg,
                             std::size_t width, std::size_t height);
ReconResult osem_reconstruct(const Sinogram &sino, const Projector &proj, const ReconConfig &cfg,
                             const Image2D &init);

/// Zero-phase Butterworth low-pass with |H|^2 = 1 / (1 + (rho/cutoff)^(2 order)).
Image2D post_filter(const Image2D &img, const FilterConfig &cfg);
Image3D post_filter(const Image3D &img, const FilterConfig &cfg);

} // namespace taskdn
