#pragma once

// Forward/backward kernels for the denoiser's layer types. Backward routines
// accumulate into their gradient outputs.

#include "taskdn/nn/tensor.hpp"

#include <cassert>

#include <Eigen/Core>

namespace taskdn::nn {

/// Square convolution with zero "same" padding, direct loops. Weights are
/// laid out [out][in][k][k].
template <typename T>
void conv_forward_direct(const Tensor<T> &in, const Buffer<T> &weight, const Buffer<T> &bias,
                  std::size_t kernel, Tensor<T> &out) {
  const std::size_t ci = in.channels, co = bias.size(), h = in.height, w = in.width;
  const long pad = static_cast<long>(kernel / 2);
  out = Tensor<T>(co, h, w);
  for (std::size_t o = 0; o < co; ++o) {
    T *dst = out.channel(o);
    std::fill(dst, dst + h * w, bias[o]);
    for (std::size_t i = 0; i < ci; ++i) {
      const T *src = in.channel(i);
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const long oy = static_cast<long>(ky) - pad;
        const std::size_t y0 = oy < 0 ? static_cast<std::size_t>(-oy) : 0;
        const std::size_t y1 = oy > 0 ? h - static_cast<std::size_t>(oy) : h;
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const long ox = static_cast<long>(kx) - pad;
          const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
          const std::size_t x1 = ox > 0 ? w - static_cast<std::size_t>(ox) : w;
          const T wv = weight[((o * ci + i) * kernel + ky) * kernel + kx];
          for (std::size_t y = y0; y < y1; ++y) {
            T *d = dst + y * w;
            const T *s = src + (static_cast<long>(y) + oy) * static_cast<long>(w) + ox;
            for (std::size_t x = x0; x < x1; ++x)
              d[x] += wv * s[x];
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_direct(const Tensor<T> &in, const Buffer<T> &weight, std::size_t kernel,
                   const Tensor<T> &grad_out, Tensor<T> *grad_in, Buffer<T> &grad_weight,
                   Buffer<T> &grad_bias) {
  const std::size_t ci = in.channels, co = grad_out.channels, h = in.height, w = in.width;
  const long pad = static_cast<long>(kernel / 2);
  std::vector<T> acc(w);
  for (std::size_t o = 0; o < co; ++o) {
    const T *g = grad_out.channel(o);
    T gb = 0;
    for (std::size_t p = 0; p < h * w; ++p)
      gb += g[p];
    grad_bias[o] += gb;
    for (std::size_t i = 0; i < ci; ++i) {
      const T *src = in.channel(i);
      T *gi = grad_in ? grad_in->channel(i) : nullptr;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const long oy = static_cast<long>(ky) - pad;
        const std::size_t y0 = oy < 0 ? static_cast<std::size_t>(-oy) : 0;
        const std::size_t y1 = oy > 0 ? h - static_cast<std::size_t>(oy) : h;
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const long ox = static_cast<long>(kx) - pad;
          const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
          const std::size_t x1 = ox > 0 ? w - static_cast<std::size_t>(ox) : w;
          const std::size_t widx = ((o * ci + i) * kernel + ky) * kernel + kx;
          const T wv = weight[widx];
          std::fill(acc.begin(), acc.end(), T(0));
          for (std::size_t y = y0; y < y1; ++y) {
            const T *gr = g + y * w;
            const long off = (static_cast<long>(y) + oy) * static_cast<long>(w) + ox;
            const T *s = src + off;
            for (std::size_t x = x0; x < x1; ++x)
              acc[x] += gr[x] * s[x];
            if (gi) {
              T *d = gi + off;
              for (std::size_t x = x0; x < x1; ++x)
                d[x] += wv * gr[x];
            }
          }
          T sum = 0;
          for (std::size_t x = x0; x < x1; ++x)
            sum += acc[x];
          grad_weight[widx] += sum;
        }
      }
    }
  }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Unfolds `in` into a (in_channels * k * k) x (h * w) patch matrix.
template <typename T> void im2col(const Tensor<T> &in, std::size_t kernel, RowMatrix<T> &cols) {
  const std::size_t ci = in.channels, h = in.height, w = in.width;
  const long pad = static_cast<long>(kernel / 2);
  cols.setZero(static_cast<Eigen::Index>(ci * kernel * kernel), static_cast<Eigen::Index>(h * w));
  for (std::size_t i = 0; i < ci; ++i) {
    const T *src = in.channel(i);
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      const long oy = static_cast<long>(ky) - pad;
      const std::size_t y0 = oy < 0 ? static_cast<std::size_t>(-oy) : 0;
      const std::size_t y1 = oy > 0 ? h - static_cast<std::size_t>(oy) : h;
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const long ox = static_cast<long>(kx) - pad;
        const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
        const std::size_t x1 = ox > 0 ? w - static_cast<std::size_t>(ox) : w;
        T *row = cols.row(static_cast<Eigen::Index>((i * kernel + ky) * kernel + kx)).data();
        for (std::size_t y = y0; y < y1; ++y) {
          const T *s = src + (static_cast<long>(y) + oy) * static_cast<long>(w) + ox;
          for (std::size_t x = x0; x < x1; ++x)
            row[y * w + x] = s[x];
        }
      }
    }
  }
}

/// Adds the folded patch gradients back onto the input gradient.
template <typename T>
void col2im_add(const RowMatrix<T> &cols, std::size_t kernel, Tensor<T> &grad_in) {
  const std::size_t ci = grad_in.channels, h = grad_in.height, w = grad_in.width;
  const long pad = static_cast<long>(kernel / 2);
  for (std::size_t i = 0; i < ci; ++i) {
    T *dst = grad_in.channel(i);
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      const long oy = static_cast<long>(ky) - pad;
      const std::size_t y0 = oy < 0 ? static_cast<std::size_t>(-oy) : 0;
      const std::size_t y1 = oy > 0 ? h - static_cast<std::size_t>(oy) : h;
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const long ox = static_cast<long>(kx) - pad;
        const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
        const std::size_t x1 = ox > 0 ? w - static_cast<std::size_t>(ox) : w;
        const T *row = cols.row(static_cast<Eigen::Index>((i * kernel + ky) * kernel + kx)).data();
        for (std::size_t y = y0; y < y1; ++y) {
          T *d = dst + (static_cast<long>(y) + oy) * static_cast<long>(w) + ox;
          for (std::size_t x = x0; x < x1; ++x)
            d[x] += row[y * w + x];
        }
      }
    }
  }
}

/// Same convolution as conv_forward_direct, computed as a matrix product.
template <typename T>
void conv_forward(const Tensor<T> &in, const Buffer<T> &weight, const Buffer<T> &bias,
                  std::size_t kernel, Tensor<T> &out) {
  const auto co = static_cast<Eigen::Index>(bias.size());
  const auto hw = static_cast<Eigen::Index>(in.plane());
  const auto kk = static_cast<Eigen::Index>(in.channels * kernel * kernel);
  out = Tensor<T>(bias.size(), in.height, in.width);
  Eigen::Map<RowMatrix<T>> o(out.data.data(), co, hw);
  Eigen::Map<const RowMatrix<T>> wm(weight.data(), co, kk);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data(), co);
  if (kernel == 1) {
    Eigen::Map<const RowMatrix<T>> x(in.data.data(), kk, hw);
    o.noalias() = wm * x;
  } else {
    RowMatrix<T> cols;
    im2col(in, kernel, cols);
    o.noalias() = wm * cols;
  }
  o.colwise() += b;
}

template <typename T>
void conv_backward(const Tensor<T> &in, const Buffer<T> &weight, std::size_t kernel,
                   const Tensor<T> &grad_out, Tensor<T> *grad_in, Buffer<T> &grad_weight,
                   Buffer<T> &grad_bias) {
  const auto co = static_cast<Eigen::Index>(grad_out.channels);
  const auto hw = static_cast<Eigen::Index>(in.plane());
  const auto kk = static_cast<Eigen::Index>(in.channels * kernel * kernel);
  Eigen::Map<const RowMatrix<T>> g(grad_out.data.data(), co, hw);
  Eigen::Map<const RowMatrix<T>> wm(weight.data(), co, kk);
  Eigen::Map<RowMatrix<T>> gw(grad_weight.data(), co, kk);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(grad_bias.data(), co);
  gb += g.rowwise().sum();
  if (kernel == 1) {
    Eigen::Map<const RowMatrix<T>> x(in.data.data(), kk, hw);
    gw.noalias() += g * x.transpose();
    if (grad_in) {
      Eigen::Map<RowMatrix<T>> gi(grad_in->data.data(), kk, hw);
      gi.noalias() += wm.transpose() * g;
    }
    return;
  }
  RowMatrix<T> cols;
  im2col(in, kernel, cols);
  gw.noalias() += g * cols.transpose();
  if (grad_in) {
    RowMatrix<T> gcols = wm.transpose() * g;
    col2im_add(gcols, kernel, *grad_in);
  }
}

template <typename T> void relu_forward(Tensor<T> &t) {
  for (auto &v : t.data)
    v = v > T(0) ? v : T(0);
}

/// grad *= (activation > 0), with `activation` the post-rectifier output.
template <typename T> void relu_backward(const Tensor<T> &activation, Tensor<T> &grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activation.data[i] > T(0)))
      grad.data[i] = T(0);
}

template <typename T> Tensor<T> avgpool2_forward(const Tensor<T> &in) {
  Tensor<T> out(in.channels, in.height / 2, in.width / 2);
  for (std::size_t c = 0; c < in.channels; ++c) {
    const T *s = in.channel(c);
    T *d = out.channel(c);
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x) {
        const T *p = s + 2 * y * in.width + 2 * x;
        d[y * out.width + x] = T(0.25) * (p[0] + p[1] + p[in.width] + p[in.width + 1]);
      }
  }
  return out;
}

template <typename T> void avgpool2_backward(const Tensor<T> &grad_out, Tensor<T> &grad_in) {
  for (std::size_t c = 0; c < grad_out.channels; ++c) {
    const T *g = grad_out.channel(c);
    T *d = grad_in.channel(c);
    for (std::size_t y = 0; y < grad_out.height; ++y)
      for (std::size_t x = 0; x < grad_out.width; ++x) {
        const T v = T(0.25) * g[y * grad_out.width + x];
        T *p = d + 2 * y * grad_in.width + 2 * x;
        p[0] += v;
        p[1] += v;
        p[grad_in.width] += v;
        p[grad_in.width + 1] += v;
      }
  }
}

template <typename T> Tensor<T> upsample2_forward(const Tensor<T> &in) {
  Tensor<T> out(in.channels, in.height * 2, in.width * 2);
  for (std::size_t c = 0; c < in.channels; ++c) {
    const T *s = in.channel(c);
    T *d = out.channel(c);
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x)
        d[y * out.width + x] = s[(y / 2) * in.width + x / 2];
  }
  return out;
}

template <typename T> void upsample2_backward(const Tensor<T> &grad_out, Tensor<T> &grad_in) {
  for (std::size_t c = 0; c < grad_out.channels; ++c) {
    const T *g = grad_out.channel(c);
    T *d = grad_in.channel(c);
    for (std::size_t y = 0; y < grad_out.height; ++y)
      for (std::size_t x = 0; x < grad_out.width; ++x)
        d[(y / 2) * grad_in.width + x / 2] += g[y * grad_out.width + x];
  }
}

template <typename T> void add_inplace(Tensor<T> &dst, const Tensor<T> &src) {
  assert(dst.same_shape(src));
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst.data[i] += src.data[i];
}

} // namespace taskdn::nn
