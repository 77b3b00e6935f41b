#pragma once

// GradCAM over the last conv block:
//   alpha_c = spatial mean of d(class score)/d(A_c)
//   raw     = sum_c alpha_c A_c                      (h x w)
//   map     = max_normalize(upsample(ReLU(raw)))     (H x W)
// Upsampling is bilinear with corner-aligned sampling: output pixel y reads
// source coordinate y * (h - 1) / (H - 1).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "capsl/encoder.hpp"
#include "capsl/error.hpp"
#include "capsl/tensor.hpp"

namespace capsl {

struct SaliencyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, in [0, 1]
  bool all_zero = false;
};

inline std::vector<double> bilinear_upsample(std::span<const double> src, std::size_t h, std::size_t w, std::size_t out_h,
                                             std::size_t out_w) {
  if (src.size() != h * w || h == 0 || w == 0) throw ShapeError("bilinear_upsample: source shape mismatch");
  std::vector<double> out(out_h * out_w);
  auto coord = [](std::size_t i, std::size_t in, std::size_t out_n) {
    return out_n <= 1 || in <= 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out_n - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, h, out_h);
    const auto y0 = std::min(static_cast<std::size_t>(sy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, w, out_w);
      const auto x0 = std::min(static_cast<std::size_t>(sx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
      const double bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
      out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

// Low-resolution class activation map before the ReLU.
template <class T>
std::vector<double> gradcam_raw(const Encoder<T>& enc, const ParamSet<T>& params, std::span<const T> image,
                                const Tensor<T>& class_weights, std::size_t target_class, layers::Shape3* shape = nullptr) {
  if (class_weights.shape.size() != 2 || class_weights.cols() != enc.feature_dim())
    throw ShapeError("gradcam: class weights must be (classes x embed_dim)");
  if (target_class >= class_weights.rows()) throw ValidationError("gradcam: target class out of range");
  const auto tap = enc.tap(params, image, class_weights.row(target_class));
  const std::size_t hw = tap.shape.h * tap.shape.w;
  std::vector<double> raw(hw, 0.0);
  for (std::size_t c = 0; c < tap.shape.c; ++c) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < hw; ++i) alpha += static_cast<double>(tap.gradient[c * hw + i]);
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) raw[i] += alpha * static_cast<double>(tap.activation[c * hw + i]);
  }
  if (shape) *shape = tap.shape;
  return raw;
}

template <class T>
SaliencyMap gradcam(const Encoder<T>& enc, const ParamSet<T>& params, std::span<const T> image, const Tensor<T>& class_weights,
                    std::size_t target_class) {
  layers::Shape3 shape;
  auto raw = gradcam_raw(enc, params, image, class_weights, target_class, &shape);
  for (double& v : raw) v = std::max(v, 0.0);
  SaliencyMap m;
  m.height = enc.spec().input.height;
  m.width = enc.spec().input.width;
  m.values = bilinear_upsample(raw, shape.h, shape.w, m.height, m.width);
  const double peak = *std::max_element(m.values.begin(), m.values.end());
  if (peak <= 0.0) {
    m.all_zero = true;
    std::fill(m.values.begin(), m.values.end(), 0.0);
    return m;
  }
  for (double& v : m.values) v /= peak;
  return m;
}

}  // namespace capsl
