#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace taskdn {

// Error hierarchy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class ValidationError : public Error {
public:
  using Error::Error;
};
class FormatError : public Error {
public:
  using Error::Error;
};
class NumericError : public Error {
public:
  using Error::Error;
};
class ConfigError : public Error {
public:
  using Error::Error;
};
class DataError : public Error {
public:
  using Error::Error;
};

/// Single 2-D slice, row-major (x fastest). Values are uptake units.
class Image2D {
public:
  Image2D() = default;
  Image2D(std::size_t width, std::size_t height, double fill = 0.0);
  Image2D(std::size_t width, std::size_t height, std::vector<double> values);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return values_.size(); }

  double &operator()(std::size_t x, std::size_t y) { return values_[y * width_ + x]; }
  double operator()(std::size_t x, std::size_t y) const { return values_[y * width_ + x]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  bool operator==(const Image2D &) const = default;

private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> values_;
};

/// Stack of short-axis slices sharing one in-plane grid.
class Image3D {
public:
  Image3D() = default;
  Image3D(std::size_t width, std::size_t height, std::size_t n_slices, double fill = 0.0);
  Image3D(std::size_t width, std::size_t height, std::size_t n_slices,
          std::vector<double> values);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t n_slices() const { return n_slices_; }
  std::size_t slice_size() const { return width_ * height_; }
  std::size_t size() const { return values_.size(); }

  double &operator()(std::size_t x, std::size_t y, std::size_t s) {
    return values_[(s * height_ + y) * width_ + x];
  }
  double operator()(std::size_t x, std::size_t y, std::size_t s) const {
    return values_[(s * height_ + y) * width_ + x];
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> slice_values(std::size_t s) {
    return std::span<double>(values_).subspan(s * slice_size(), slice_size());
  }
  std::span<const double> slice_values(std::size_t s) const {
    return std::span<const double>(values_).subspan(s * slice_size(), slice_size());
  }

  Image2D slice(std::size_t s) const;
  void set_slice(std::size_t s, const Image2D &img);

  bool same_shape(const Image3D &o) const {
    return width_ == o.width_ && height_ == o.height_ && n_slices_ == o.n_slices_;
  }
  bool operator==(const Image3D &) const = default;

private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::size_t n_slices_ = 0;
  std::vector<double> values_;
};

enum class SinogramKind : std::uint8_t { expected = 0, counts = 1 };

/// Projection data for one slice: n_angles rows of n_bins detector bins.
/// Counts are stored as reals with an integrality invariant.
class Sinogram {
public:
  Sinogram() = default;
  Sinogram(std::size_t n_angles, std::size_t n_bins, SinogramKind kind = SinogramKind::expected);
  Sinogram(std::size_t n_angles, std::size_t n_bins, std::vector<double> values,
           SinogramKind kind);

  std::size_t n_angles() const { return n_angles_; }
  std::size_t n_bins() const { return n_bins_; }
  std::size_t size() const { return values_.size(); }
  SinogramKind kind() const { return kind_; }

  double &operator()(std::size_t bin, std::size_t angle) { return values_[angle * n_bins_ + bin]; }
  double operator()(std::size_t bin, std::size_t angle) const {
    return values_[angle * n_bins_ + bin];
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  double sum() const;
  bool operator==(const Sinogram &) const = default;

private:
  std::size_t n_angles_ = 0;
  std::size_t n_bins_ = 0;
  SinogramKind kind_ = SinogramKind::expected;
  std::vector<double> values_;
};

/// Reproducible random stream keyed by (seed, stream_id). Each stream is an
/// independent Mersenne twister seeded from both keys, so per-item streams do
/// not depend on iteration order.
class RngStream {
public:
  using result_type = std::mt19937_64::result_type;

  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  /// Derives a child stream; children of equal parents with equal keys agree.
  RngStream split(std::uint64_t child_id) const;

  result_type operator()() { return engine_(); }
  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }

  double uniform(double lo, double hi);

private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
};

/// Stable 64-bit mix used to derive stream ids from structured keys.
std::uint64_t mix_ids(std::uint64_t a, std::uint64_t b);

struct ShiftResult {
  Image2D image;
  bool out_of_range = false; ///< shift magnitude >= extent, output is all zeros
};

/// Zero-filled translation: out(x, y) = img(x - dx, y - dy) where in bounds.
ShiftResult acyclic_shift(const Image2D &img, long dx, long dy);

/// Same, over a raw row-major buffer.
void acyclic_shift(std::span<const double> src, std::span<double> dst, std::size_t width,
                   std::size_t height, long dx, long dy);

bool all_finite(std::span<const double> v);

} // namespace taskdn
