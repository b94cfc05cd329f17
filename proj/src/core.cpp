#include "taskdn/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace taskdn {

namespace {
void require_extent(std::size_t a, std::size_t b, const char *what) {
  if (a == 0 || b == 0)
    throw ValidationError(std::string(what) + ": dimensions must be positive");
}
} // namespace

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

Image2D::Image2D(std::size_t width, std::size_t height, double fill)
    : width_(width), height_(height), values_(width * height, fill) {
  require_extent(width, height, "Image2D");
}

Image2D::Image2D(std::size_t width, std::size_t height, std::vector<double> values)
    : width_(width), height_(height), values_(std::move(values)) {
  require_extent(width, height, "Image2D");
  if (values_.size() != width * height)
    throw ValidationError("Image2D: value count does not match width*height");
}

Image3D::Image3D(std::size_t width, std::size_t height, std::size_t n_slices, double fill)
    : width_(width), height_(height), n_slices_(n_slices), values_(width * height * n_slices, fill) {
  require_extent(width, height, "Image3D");
  if (n_slices == 0)
    throw ValidationError("Image3D: n_slices must be >= 1");
}

Image3D::Image3D(std::size_t width, std::size_t height, std::size_t n_slices,
                 std::vector<double> values)
    : width_(width), height_(height), n_slices_(n_slices), values_(std::move(values)) {
  require_extent(width, height, "Image3D");
  if (n_slices == 0)
    throw ValidationError("Image3D: n_slices must be >= 1");
  if (values_.size() != width * height * n_slices)
    throw ValidationError("Image3D: value count does not match dims");
}

Image2D Image3D::slice(std::size_t s) const {
  auto v = slice_values(s);
  return Image2D(width_, height_, std::vector<double>(v.begin(), v.end()));
}

void Image3D::set_slice(std::size_t s, const Image2D &img) {
  if (img.width() != width_ || img.height() != height_)
    throw ValidationError("Image3D::set_slice: slice dims mismatch");
  std::ranges::copy(img.values(), slice_values(s).begin());
}

Sinogram::Sinogram(std::size_t n_angles, std::size_t n_bins, SinogramKind kind)
    : n_angles_(n_angles), n_bins_(n_bins), kind_(kind), values_(n_angles * n_bins, 0.0) {
  require_extent(n_angles, n_bins, "Sinogram");
}

Sinogram::Sinogram(std::size_t n_angles, std::size_t n_bins, std::vector<double> values,
                   SinogramKind kind)
    : n_angles_(n_angles), n_bins_(n_bins), kind_(kind), values_(std::move(values)) {
  require_extent(n_angles, n_bins, "Sinogram");
  if (values_.size() != n_angles * n_bins)
    throw ValidationError("Sinogram: value count does not match dims");
  for (double v : values_) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw ValidationError("Sinogram: values must be finite and nonnegative");
    if (kind_ == SinogramKind::counts && v != std::floor(v))
      throw ValidationError("Sinogram: count data must be integral");
  }
}

double Sinogram::sum() const { return std::accumulate(values_.begin(), values_.end(), 0.0); }

std::uint64_t mix_ids(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined key
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + (b ^ 0xD1B54A32D192ED03ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id),
                    static_cast<std::uint32_t>(stream_id >> 32)};
  engine_.seed(seq);
}

RngStream RngStream::split(std::uint64_t child_id) const {
  return RngStream(seed_, mix_ids(stream_id_, child_id));
}

double RngStream::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

void acyclic_shift(std::span<const double> src, std::span<double> dst, std::size_t width,
                   std::size_t height, long dx, long dy) {
  std::ranges::fill(dst, 0.0);
  const long w = static_cast<long>(width);
  const long h = static_cast<long>(height);
  const long x0 = std::max(0L, dx), x1 = std::min(w, w + dx);
  const long y0 = std::max(0L, dy), y1 = std::min(h, h + dy);
  for (long y = y0; y < y1; ++y) {
    for (long x = x0; x < x1; ++x)
      dst[y * w + x] = src[(y - dy) * w + (x - dx)];
  }
}

ShiftResult acyclic_shift(const Image2D &img, long dx, long dy) {
  ShiftResult r{Image2D(img.width(), img.height()), false};
  r.out_of_range = std::labs(dx) >= static_cast<long>(img.width()) ||
                   std::labs(dy) >= static_cast<long>(img.height());
  acyclic_shift(img.values(), r.image.values(), img.width(), img.height(), dx, dy);
  return r;
}

} // namespace taskdn
