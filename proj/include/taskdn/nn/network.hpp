#pragma once

// Two-level encoder-decoder over a short-axis stack, slices as channels:
//
//   enc1 = relu(conv3(x))                  full res, widths[0]
//   enc2 = relu(conv3(pool(enc1)))         1/2 res,  widths[1]
//   mid  = relu(conv3(pool(enc2)))         1/4 res,  widths[1]
//   dec2 = relu(conv3(up(mid) + enc2))     1/2 res,  widths[0]
//   dec1 = relu(conv3(up(dec2) + enc1))    full res, widths[0]
//   y    = relu(conv1(dec1))               full res, in_channels

#include "taskdn/core.hpp"
#include "taskdn/nn/layers.hpp"

#include <array>
#include <cmath>
#include <string>

#include <json.hpp>

namespace taskdn::nn {

struct ArchConfig {
  std::size_t in_channels = 8; ///< slices of the short-axis stack
  std::size_t height = 64;
  std::size_t width = 64;
  std::array<std::size_t, 2> widths{16, 32};
  std::size_t kernel = 3;

  void validate() const {
    if (in_channels == 0 || widths[0] == 0 || widths[1] == 0)
      throw ValidationError("ArchConfig: channel counts must be positive");
    if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0)
      throw ValidationError("ArchConfig: height and width must be positive multiples of 4");
    if (kernel % 2 == 0)
      throw ValidationError("ArchConfig: kernel must be odd");
  }
  bool operator==(const ArchConfig &) const = default;
};

inline void to_json(nlohmann::json &j, const ArchConfig &a) {
  j = {{"in_channels", a.in_channels}, {"height", a.height}, {"width", a.width},
       {"widths", a.widths},           {"kernel", a.kernel}};
}
inline void from_json(const nlohmann::json &j, ArchConfig &a) {
  ArchConfig d;
  a.in_channels = j.value("in_channels", d.in_channels);
  a.height = j.value("height", d.height);
  a.width = j.value("width", d.width);
  a.widths = j.value("widths", d.widths);
  a.kernel = j.value("kernel", d.kernel);
}

enum Layer : std::size_t { kEnc1, kEnc2, kMid, kDec2, kDec1, kOut, kLayerCount };

inline constexpr std::array<const char *, kLayerCount> kLayerNames{"enc1", "enc2", "mid",
                                                                   "dec2", "dec1", "out"};

struct LayerShape {
  std::size_t in, out, kernel;
};

inline std::array<LayerShape, kLayerCount> layer_shapes(const ArchConfig &a) {
  const std::size_t w0 = a.widths[0], w1 = a.widths[1], k = a.kernel;
  return {{{a.in_channels, w0, k}, {w0, w1, k}, {w1, w1, k}, {w1, w0, k}, {w0, w0, k},
           {w0, a.in_channels, 1}}};
}

template <typename T> struct Params {
  ArchConfig arch;
  std::array<Buffer<T>, kLayerCount> weight;
  std::array<Buffer<T>, kLayerCount> bias;

  static Params zeros(const ArchConfig &a) {
    a.validate();
    Params p;
    p.arch = a;
    const auto shapes = layer_shapes(a);
    for (std::size_t l = 0; l < kLayerCount; ++l) {
      p.weight[l].assign(shapes[l].out * shapes[l].in * shapes[l].kernel * shapes[l].kernel, T(0));
      p.bias[l].assign(shapes[l].out, T(0));
    }
    return p;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < kLayerCount; ++l)
      n += weight[l].size() + bias[l].size();
    return n;
  }

  template <typename U> Params<U> cast() const {
    Params<U> p;
    p.arch = arch;
    for (std::size_t l = 0; l < kLayerCount; ++l) {
      p.weight[l].assign(weight[l].begin(), weight[l].end());
      p.bias[l].assign(bias[l].begin(), bias[l].end());
    }
    return p;
  }

  /// Visits every scalar in canonical order (layer, weights then bias).
  template <typename F> void for_each(F &&f) {
    for (std::size_t l = 0; l < kLayerCount; ++l) {
      for (auto &v : weight[l])
        f(v);
      for (auto &v : bias[l])
        f(v);
    }
  }

  bool operator==(const Params &) const = default;
};

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases.
/// The output layer takes the magnitudes of its draws: its inputs are
/// rectified, so every output channel starts with a live final rectifier.
template <typename T> Params<T> init_network(const ArchConfig &a, RngStream &rng) {
  auto p = Params<T>::zeros(a);
  const auto shapes = layer_shapes(a);
  for (std::size_t l = 0; l < kLayerCount; ++l) {
    const double k2 = static_cast<double>(shapes[l].kernel * shapes[l].kernel);
    const double bound = std::sqrt(6.0 / (static_cast<double>(shapes[l].in) * k2 +
                                          static_cast<double>(shapes[l].out) * k2));
    for (auto &w : p.weight[l]) {
      const double u = rng.uniform(-bound, bound);
      w = static_cast<T>(l == kOut ? std::abs(u) : u);
    }
  }
  return p;
}

template <typename T> struct ForwardCache {
  Tensor<T> x, enc1, pool1, enc2, pool2, mid, up2, dec2, up1, dec1, y;
};

template <typename T> void forward(const Params<T> &p, ForwardCache<T> &c) {
  const auto k = p.arch.kernel;
  conv_forward(c.x, p.weight[kEnc1], p.bias[kEnc1], k, c.enc1);
  relu_forward(c.enc1);
  c.pool1 = avgpool2_forward(c.enc1);
  conv_forward(c.pool1, p.weight[kEnc2], p.bias[kEnc2], k, c.enc2);
  relu_forward(c.enc2);
  c.pool2 = avgpool2_forward(c.enc2);
  conv_forward(c.pool2, p.weight[kMid], p.bias[kMid], k, c.mid);
  relu_forward(c.mid);
  c.up2 = upsample2_forward(c.mid);
  add_inplace(c.up2, c.enc2);
  conv_forward(c.up2, p.weight[kDec2], p.bias[kDec2], k, c.dec2);
  relu_forward(c.dec2);
  c.up1 = upsample2_forward(c.dec2);
  add_inplace(c.up1, c.enc1);
  conv_forward(c.up1, p.weight[kDec1], p.bias[kDec1], k, c.dec1);
  relu_forward(c.dec1);
  conv_forward(c.dec1, p.weight[kOut], p.bias[kOut], 1, c.y);
  relu_forward(c.y);
}

/// Accumulates dLoss/dParams into `grad` given dLoss/dy (overwritten).
template <typename T>
void backward(const Params<T> &p, const ForwardCache<T> &c, Tensor<T> &grad_y, Params<T> &grad) {
  const auto k = p.arch.kernel;
  relu_backward(c.y, grad_y);
  Tensor<T> g_dec1(c.dec1.channels, c.dec1.height, c.dec1.width);
  conv_backward(c.dec1, p.weight[kOut], 1, grad_y, &g_dec1, grad.weight[kOut], grad.bias[kOut]);
  relu_backward(c.dec1, g_dec1);
  Tensor<T> g_up1(c.up1.channels, c.up1.height, c.up1.width);
  conv_backward(c.up1, p.weight[kDec1], k, g_dec1, &g_up1, grad.weight[kDec1], grad.bias[kDec1]);
  Tensor<T> g_enc1 = g_up1; // skip branch
  Tensor<T> g_dec2(c.dec2.channels, c.dec2.height, c.dec2.width);
  upsample2_backward(g_up1, g_dec2);
  relu_backward(c.dec2, g_dec2);
  Tensor<T> g_up2(c.up2.channels, c.up2.height, c.up2.width);
  conv_backward(c.up2, p.weight[kDec2], k, g_dec2, &g_up2, grad.weight[kDec2], grad.bias[kDec2]);
  Tensor<T> g_enc2 = g_up2;
  Tensor<T> g_mid(c.mid.channels, c.mid.height, c.mid.width);
  upsample2_backward(g_up2, g_mid);
  relu_backward(c.mid, g_mid);
  Tensor<T> g_pool2(c.pool2.channels, c.pool2.height, c.pool2.width);
  conv_backward(c.pool2, p.weight[kMid], k, g_mid, &g_pool2, grad.weight[kMid], grad.bias[kMid]);
  avgpool2_backward(g_pool2, g_enc2);
  relu_backward(c.enc2, g_enc2);
  Tensor<T> g_pool1(c.pool1.channels, c.pool1.height, c.pool1.width);
  conv_backward(c.pool1, p.weight[kEnc2], k, g_enc2, &g_pool1, grad.weight[kEnc2], grad.bias[kEnc2]);
  avgpool2_backward(g_pool1, g_enc1);
  relu_backward(c.enc1, g_enc1);
  conv_backward(c.x, p.weight[kEnc1], k, g_enc1, static_cast<Tensor<T> *>(nullptr),
                grad.weight[kEnc1], grad.bias[kEnc1]);
}

/// Sign pattern of every rectifier, used to detect finite-difference steps
/// that cross a kink.
template <typename T> std::vector<bool> activation_pattern(const ForwardCache<T> &c) {
  std::vector<bool> out;
  for (const auto *t : {&c.enc1, &c.enc2, &c.mid, &c.dec2, &c.dec1, &c.y})
    for (const T v : t->data)
      out.push_back(v > T(0));
  return out;
}

template <typename T> Tensor<T> to_tensor(const Image3D &img, double scale = 1.0) {
  Tensor<T> t(img.n_slices(), img.height(), img.width());
  auto v = img.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    t.data[i] = static_cast<T>(v[i] / scale);
  return t;
}

template <typename T> Image3D to_image(const Tensor<T> &t, double scale = 1.0) {
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<double>(t.data[i]) * scale;
  return Image3D(t.width, t.height, t.channels, std::move(v));
}

/// Network output for an image of the configured shape.
template <typename T> Image3D forward(const Params<T> &p, const Image3D &img) {
  if (img.n_slices() != p.arch.in_channels || img.height() != p.arch.height ||
      img.width() != p.arch.width)
    throw ValidationError("forward: image dims do not match the network input");
  ForwardCache<T> c;
  c.x = to_tensor<T>(img);
  forward(p, c);
  return to_image(c.y);
}

} // namespace taskdn::nn
