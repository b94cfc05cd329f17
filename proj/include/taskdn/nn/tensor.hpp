#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace taskdn::nn {

/// Contiguous storage aligned for Eigen's widest packets. Vectorized
/// reductions peel according to the start address, so alignment must not
/// vary between runs for results to be bit-reproducible.
template <typename T> using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense channels x height x width feature map, row-major.
template <typename T> struct Tensor {
  std::size_t channels = 0, height = 0, width = 0;
  Buffer<T> data;

  Tensor() = default;
  Tensor(std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  std::size_t plane() const { return height * width; }
  std::size_t size() const { return data.size(); }
  T *channel(std::size_t c) { return data.data() + c * plane(); }
  const T *channel(std::size_t c) const { return data.data() + c * plane(); }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }
  bool same_shape(const Tensor &o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

} // namespace taskdn::nn
