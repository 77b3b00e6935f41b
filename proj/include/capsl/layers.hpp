#pragma once

// Per-sample layer kernels with hand-written reverse passes. Activations are
// laid out channel-major (C x H x W). Backward functions accumulate (+=) into
// their gradient outputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace capsl::layers {

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
  const std::size_t pad = kernel / 2;
  return (in + 2 * pad - kernel) / stride + 1;
}

// ---- conv2d, zero "same" padding of kernel/2 --------------------------------

// Patch matrix: row r = (c*k + ky)*k + kx, column p = y*ow + x, holding the
// input value under tap r for output position p (0 outside the image).
template <class T>
void im2col(std::span<const T> in, Shape3 is, std::size_t k, std::size_t stride, std::size_t oh, std::size_t ow, std::vector<T>& col) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  col.assign(is.c * k * k * oh * ow, T{});
  for (std::size_t c = 0; c < is.c; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((c * k + ky) * k + kx) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.h)) continue;
          for (std::size_t x = 0; x < ow; ++x) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.w)) continue;
            dst[y * ow + x] = in[(c * is.h + static_cast<std::size_t>(iy)) * is.w + static_cast<std::size_t>(ix)];
          }
        }
      }
}

// Dot product with eight interleaved partial sums, combined pairwise.
template <class T>
T dot8(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class T>
void conv2d_forward(std::span<const T> in, Shape3 is, std::span<const T> weight, std::span<const T> bias,
                    std::size_t out_c, std::size_t k, std::size_t stride, std::span<T> out) {
  const std::size_t oh = conv_out_extent(is.h, k, stride), ow = conv_out_extent(is.w, k, stride);
  const std::size_t taps = is.c * k * k, np = oh * ow;
  std::vector<T> col;
  im2col(in, is, k, stride, oh, ow, col);
  for (std::size_t o = 0; o < out_c; ++o) {
    T* dst = out.data() + o * np;
    std::fill(dst, dst + np, bias[o]);
    const T* w = weight.data() + o * taps;
    for (std::size_t r = 0; r < taps; ++r) {
      const T wv = w[r];
      const T* src = col.data() + r * np;
      for (std::size_t p = 0; p < np; ++p) dst[p] += wv * src[p];
    }
  }
}

// grad_in may be empty when the input gradient is not needed.
template <class T>
void conv2d_backward(std::span<const T> in, Shape3 is, std::span<const T> weight, std::size_t out_c, std::size_t k,
                     std::size_t stride, std::span<const T> grad_out, std::span<T> grad_in, std::span<T> grad_weight,
                     std::span<T> grad_bias) {
  const std::size_t oh = conv_out_extent(is.h, k, stride), ow = conv_out_extent(is.w, k, stride);
  const std::size_t taps = is.c * k * k, np = oh * ow;
  const bool want_params = !grad_weight.empty();
  const bool want_input = !grad_in.empty();
  std::vector<T> col;
  if (want_params) {
    im2col(in, is, k, stride, oh, ow, col);
    for (std::size_t o = 0; o < out_c; ++o) {
      const T* g = grad_out.data() + o * np;
      T sum{};
      for (std::size_t p = 0; p < np; ++p) sum += g[p];
      grad_bias[o] += sum;
      T* gw = grad_weight.data() + o * taps;
      for (std::size_t r = 0; r < taps; ++r) gw[r] += dot8(g, col.data() + r * np, np);
    }
  }
  if (!want_input) return;
  std::vector<T> gcol(taps * np, T{});
  for (std::size_t o = 0; o < out_c; ++o) {
    const T* g = grad_out.data() + o * np;
    const T* w = weight.data() + o * taps;
    for (std::size_t r = 0; r < taps; ++r) {
      const T wv = w[r];
      T* dst = gcol.data() + r * np;
      for (std::size_t p = 0; p < np; ++p) dst[p] += wv * g[p];
    }
  }
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  for (std::size_t c = 0; c < is.c; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = gcol.data() + ((c * k + ky) * k + kx) * np;
        for (std::size_t y = 0; y < oh; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.h)) continue;
          for (std::size_t x = 0; x < ow; ++x) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.w)) continue;
            grad_in[(c * is.h + static_cast<std::size_t>(iy)) * is.w + static_cast<std::size_t>(ix)] += src[y * ow + x];
          }
        }
      }
}

// ---- ReLU -----------------------------------------------------------------

template <class T>
void relu_forward(std::span<const T> in, std::span<T> out) {
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T{} ? in[i] : T{};
}

template <class T>
void relu_backward(std::span<const T> in, std::span<const T> grad_out, std::span<T> grad_in) {
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in[i] > T{}) grad_in[i] += grad_out[i];
}

// ---- 2x2 max-pool, stride 2 (odd trailing rows/cols dropped) ---------------

inline Shape3 maxpool_out_shape(Shape3 is) { return {is.c, is.h / 2, is.w / 2}; }

template <class T>
void maxpool_forward(std::span<const T> in, Shape3 is, std::span<T> out, std::span<std::uint32_t> argmax) {
  const Shape3 os = maxpool_out_shape(is);
  for (std::size_t c = 0; c < is.c; ++c)
    for (std::size_t y = 0; y < os.h; ++y)
      for (std::size_t x = 0; x < os.w; ++x) {
        std::size_t best = (c * is.h + 2 * y) * is.w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (c * is.h + 2 * y + dy) * is.w + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (c * os.h + y) * os.w + x;
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
}

template <class T>
void maxpool_backward(std::span<const std::uint32_t> argmax, std::span<const T> grad_out, std::span<T> grad_in) {
  for (std::size_t o = 0; o < grad_out.size(); ++o) grad_in[argmax[o]] += grad_out[o];
}

// ---- global average pool ----------------------------------------------------

template <class T>
void gap_forward(std::span<const T> in, Shape3 is, std::span<T> out) {
  const std::size_t hw = is.h * is.w;
  for (std::size_t c = 0; c < is.c; ++c) {
    T sum{};
    for (std::size_t i = 0; i < hw; ++i) sum += in[c * hw + i];
    out[c] = sum / static_cast<T>(hw);
  }
}

template <class T>
void gap_backward(Shape3 is, std::span<const T> grad_out, std::span<T> grad_in) {
  const std::size_t hw = is.h * is.w;
  for (std::size_t c = 0; c < is.c; ++c) {
    const T g = grad_out[c] / static_cast<T>(hw);
    for (std::size_t i = 0; i < hw; ++i) grad_in[c * hw + i] += g;
  }
}

// ---- dense: out = W in + b, W is (out x in) ----------------------------------

template <class T>
void dense_forward(std::span<const T> in, std::span<const T> weight, std::span<const T> bias, std::span<T> out) {
  const std::size_t n_in = in.size();
  for (std::size_t o = 0; o < out.size(); ++o) {
    T sum = bias[o];
    const T* w = weight.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) sum += w[i] * in[i];
    out[o] = sum;
  }
}

template <class T>
void dense_backward(std::span<const T> in, std::span<const T> weight, std::span<const T> grad_out, std::span<T> grad_in,
                    std::span<T> grad_weight, std::span<T> grad_bias) {
  const std::size_t n_in = in.size();
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    const T g = grad_out[o];
    if (!grad_weight.empty()) {
      grad_bias[o] += g;
      T* gw = grad_weight.data() + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) gw[i] += g * in[i];
    }
    if (!grad_in.empty()) {
      const T* w = weight.data() + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) grad_in[i] += g * w[i];
    }
  }
}

// ---- per-sample normalization (no affine, no batch statistics) -------------

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
void layernorm_forward(std::span<const T> in, std::span<T> out) {
  const auto n = static_cast<T>(in.size());
  T mean{};
  for (T v : in) mean += v;
  mean /= n;
  T var{};
  for (T v : in) var += (v - mean) * (v - mean);
  var /= n;
  const T inv = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = (in[i] - mean) * inv;
}

template <class T>
void layernorm_backward(std::span<const T> in, std::span<const T> out, std::span<const T> grad_out, std::span<T> grad_in) {
  const auto n = static_cast<T>(in.size());
  T mean{};
  for (T v : in) mean += v;
  mean /= n;
  T var{};
  for (T v : in) var += (v - mean) * (v - mean);
  var /= n;
  const T inv = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
  T g_mean{}, gy_mean{};
  for (std::size_t i = 0; i < in.size(); ++i) {
    g_mean += grad_out[i];
    gy_mean += grad_out[i] * out[i];
  }
  g_mean /= n;
  gy_mean /= n;
  for (std::size_t i = 0; i < in.size(); ++i) grad_in[i] += inv * (grad_out[i] - g_mean - out[i] * gy_mean);
}

// ---- L2 normalization -------------------------------------------------------

inline constexpr double kL2NormFloor = 1e-12;

template <class T>
T l2norm_forward(std::span<const T> in, std::span<T> out) {
  T sq{};
  for (T v : in) sq += v * v;
  const T norm = std::max(std::sqrt(sq), static_cast<T>(kL2NormFloor));
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] / norm;
  return norm;
}

// grad_in += (g - y (y . g)) / |x|; the result is orthogonal to y.
template <class T>
void l2norm_backward(std::span<const T> in, std::span<const T> out, std::span<const T> grad_out, std::span<T> grad_in) {
  T sq{};
  for (T v : in) sq += v * v;
  const T norm = std::max(std::sqrt(sq), static_cast<T>(kL2NormFloor));
  T dot{};
  for (std::size_t i = 0; i < in.size(); ++i) dot += out[i] * grad_out[i];
  for (std::size_t i = 0; i < in.size(); ++i) grad_in[i] += (grad_out[i] - out[i] * dot) / norm;
}

}  // namespace capsl::layers
