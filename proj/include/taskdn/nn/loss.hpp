#pragma once

// Two-term denoising loss: squared error over the whole volume plus lambda
// times the squared error of channel responses on slices s1..s2, with the
// channels moved onto the defect centroid.

#include "taskdn/channels.hpp"
#include "taskdn/nn/network.hpp"
#include "taskdn/phantom.hpp"

#include <optional>

namespace taskdn::nn {

enum class AbsentCentroidPolicy { canonical_random, lv_center };

struct LossConfig {
  double lambda = 0.0;
  /// Explicit [s1, s2]; when unset the range is centroid slice +- 1, clamped.
  std::optional<std::pair<std::size_t, std::size_t>> slice_range;
  ChannelSet channels; ///< built on the full slice grid, centred at the midpoint
  AbsentCentroidPolicy absent_policy = AbsentCentroidPolicy::canonical_random;
};

struct LossTerms {
  double total = 0.0;
  double mse = 0.0;
  double channel = 0.0;
};

template <typename T> struct ChannelRows {
  std::size_t grid = 0;
  std::size_t mid = 0;
  std::vector<Buffer<T>> rows;

  explicit ChannelRows(const ChannelSet &ch) : grid(ch.grid), mid(ch.midpoint()) {
    for (const auto &r : ch.templates)
      rows.emplace_back(r.begin(), r.end());
  }
};

inline std::pair<std::size_t, std::size_t> observer_slices(const LossConfig &cfg,
                                                           std::size_t centroid_slice,
                                                           std::size_t n_slices) {
  if (cfg.slice_range) {
    const auto [a, b] = *cfg.slice_range;
    if (a > b || b >= n_slices)
      throw ValidationError("loss: slice range outside the volume");
    return {a, b};
  }
  const std::size_t c = std::min(centroid_slice, n_slices - 1);
  return {c == 0 ? 0 : c - 1, std::min(c + 1, n_slices - 1)};
}

/// Top-left corner of a training crop inside the full slice grid.
struct CropOrigin {
  long x = 0, y = 0;
};

/// Loss of one sample; if `grad_pred` is given, adds scale * dLoss/dpred.
/// `pred`/`target` may be a crop of the full slice at `origin`; the channel
/// term then only sees the part of each shifted channel inside the crop.
template <typename T>
LossTerms sample_loss(const Tensor<T> &pred, const Tensor<T> &target, const ChannelRows<T> &ch,
                      const VoxelCoord &centroid, std::pair<std::size_t, std::size_t> slices,
                      double lambda, Tensor<T> *grad_pred, double scale, CropOrigin origin = {}) {
  if (!pred.same_shape(target))
    throw ValidationError("loss: prediction and target dims differ");
  if (origin.x < 0 || origin.y < 0 || origin.x + static_cast<long>(pred.width) > static_cast<long>(ch.grid) ||
      origin.y + static_cast<long>(pred.height) > static_cast<long>(ch.grid))
    throw ValidationError("loss: slice (or crop) does not fit the channel grid");
  LossTerms t;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(target.data[i]) - static_cast<double>(pred.data[i]);
    t.mse += d * d;
    if (grad_pred)
      grad_pred->data[i] += static_cast<T>(-2.0 * scale * d);
  }
  const long g = static_cast<long>(ch.grid);
  const long w = static_cast<long>(pred.width), h = static_cast<long>(pred.height);
  // Crop pixel (x, y) reads template pixel (x - dx, y - dy).
  const long dx = centroid.x - static_cast<long>(ch.mid) - origin.x;
  const long dy = centroid.y - static_cast<long>(ch.mid) - origin.y;
  const long x0 = std::max(0L, dx), x1 = std::min(w, g + dx);
  const long y0 = std::max(0L, dy), y1 = std::min(h, g + dy);
  for (std::size_t s = slices.first; s <= slices.second; ++s) {
    const T *pp = pred.channel(s);
    const T *tp = target.channel(s);
    for (const auto &row : ch.rows) {
      double resp = 0.0;
      for (long y = y0; y < y1; ++y)
        for (long x = x0; x < x1; ++x)
          resp += static_cast<double>(row[(y - dy) * g + (x - dx)]) *
                  (static_cast<double>(tp[y * w + x]) - static_cast<double>(pp[y * w + x]));
      t.channel += resp * resp;
      if (grad_pred && lambda != 0.0) {
        T *gp = grad_pred->channel(s);
        const T coef = static_cast<T>(-2.0 * scale * lambda * resp);
        for (long y = y0; y < y1; ++y)
          for (long x = x0; x < x1; ++x)
            gp[y * w + x] += coef * row[(y - dy) * g + (x - dx)];
      }
    }
  }
  t.total = t.mse + lambda * t.channel;
  return t;
}

template <typename T> struct BatchItem {
  const Tensor<T> *low = nullptr;
  const Tensor<T> *normal = nullptr;
  VoxelCoord centroid; ///< full-grid centroid the channels are moved to
  CropOrigin origin;   ///< where `low`/`normal` sit in the full grid
};

/// Batch-mean loss and, when `grad` is given, its accumulated parameter gradient.
template <typename T>
LossTerms loss_gradient(const Params<T> &p, const std::vector<BatchItem<T>> &batch,
                        const LossConfig &cfg, const ChannelRows<T> &ch, Params<T> *grad) {
  if (batch.empty())
    throw ValidationError("loss_gradient: empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  LossTerms acc;
  ForwardCache<T> cache;
  for (const auto &item : batch) {
    cache.x = *item.low;
    forward(p, cache);
    const auto slices = observer_slices(cfg, static_cast<std::size_t>(std::max(0L, item.centroid.slice)),
                                        cache.y.channels);
    Tensor<T> gy;
    if (grad)
      gy = Tensor<T>(cache.y.channels, cache.y.height, cache.y.width);
    const auto t = sample_loss(cache.y, *item.normal, ch, item.centroid, slices, cfg.lambda,
                               grad ? &gy : nullptr, scale, item.origin);
    acc.total += scale * t.total;
    acc.mse += scale * t.mse;
    acc.channel += scale * t.channel;
    if (grad)
      backward(p, cache, gy, *grad);
  }
  return acc;
}

} // namespace taskdn::nn
