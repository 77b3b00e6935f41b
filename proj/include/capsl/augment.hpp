#pragma once

// Image augmentations: random resized crop (bilinear, corner-aligned),
// horizontal flip, per-channel gain/offset jitter and additive noise.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"
#include "capsl/rng.hpp"

namespace capsl {

struct AugmentSpec {
  double crop_min_scale = 0.5;
  double crop_max_scale = 1.0;
  double crop_min_ratio = 3.0 / 4.0;
  double crop_max_ratio = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter = 0.4;
  double noise = 0.1;

  // All augmentations off: the output equals the input.
  static AugmentSpec identity() { return {1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0}; }
};

inline void validate(const AugmentSpec& a) {
  if (!(a.crop_min_scale > 0.0 && a.crop_min_scale <= a.crop_max_scale && a.crop_max_scale <= 1.0))
    throw ConfigError("augment: crop scales must satisfy 0 < min <= max <= 1");
  if (!(a.crop_min_ratio > 0.0 && a.crop_min_ratio <= a.crop_max_ratio)) throw ConfigError("augment: bad crop ratios");
  if (!(a.flip_prob >= 0.0 && a.flip_prob <= 1.0)) throw ConfigError("augment: flip probability outside [0,1]");
  if (!(a.jitter >= 0.0) || !(a.noise >= 0.0)) throw ConfigError("augment: jitter and noise must be non-negative");
}

// Writes an augmented copy of `image` (C x H x W) into `out`.
inline void augment(std::span<const float> image, const ImageShape& shape, const AugmentSpec& spec, Rng& rng, std::span<float> out) {
  const std::size_t C = shape.channels, H = shape.height, W = shape.width;
  if (image.size() != shape.size() || out.size() != shape.size()) throw ShapeError("augment: image shape mismatch");

  const double area = rng.uniform(spec.crop_min_scale, spec.crop_max_scale);
  const double log_ratio = rng.uniform(std::log(spec.crop_min_ratio), std::log(spec.crop_max_ratio));
  const double ratio = std::exp(log_ratio);
  const double cw = std::clamp(std::sqrt(area * ratio), 0.0, 1.0) * static_cast<double>(W - 1);
  const double ch = std::clamp(std::sqrt(area / ratio), 0.0, 1.0) * static_cast<double>(H - 1);
  const double x0 = rng.uniform(0.0, 1.0) * (static_cast<double>(W - 1) - cw);
  const double y0 = rng.uniform(0.0, 1.0) * (static_cast<double>(H - 1) - ch);
  const bool flip = rng.uniform() < spec.flip_prob;

  std::vector<double> gain(C), offset(C);
  for (std::size_t c = 0; c < C; ++c) {
    gain[c] = 1.0 + spec.jitter * rng.uniform(-1.0, 1.0);
    offset[c] = spec.jitter * rng.uniform(-1.0, 1.0);
  }

  for (std::size_t c = 0; c < C; ++c) {
    const float* src = image.data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      const double sy = y0 + (H > 1 ? static_cast<double>(y) * ch / static_cast<double>(H - 1) : 0.0);
      const auto iy = std::min(static_cast<std::size_t>(sy), H - 1);
      const std::size_t iy1 = std::min(iy + 1, H - 1);
      const double fy = sy - static_cast<double>(iy);
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t xd = flip ? W - 1 - x : x;
        const double sx = x0 + (W > 1 ? static_cast<double>(xd) * cw / static_cast<double>(W - 1) : 0.0);
        const auto ix = std::min(static_cast<std::size_t>(sx), W - 1);
        const std::size_t ix1 = std::min(ix + 1, W - 1);
        const double fx = sx - static_cast<double>(ix);
        const double top = src[iy * W + ix] * (1.0 - fx) + src[iy * W + ix1] * fx;
        const double bottom = src[iy1 * W + ix] * (1.0 - fx) + src[iy1 * W + ix1] * fx;
        double v = top * (1.0 - fy) + bottom * fy;
        v = v * gain[c] + offset[c];
        if (spec.noise > 0.0) v += spec.noise * rng.normal();
        out[(c * H + y) * W + x] = static_cast<float>(v);
      }
    }
  }
}

}  // namespace capsl
