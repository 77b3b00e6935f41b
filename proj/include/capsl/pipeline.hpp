#pragma once

// Glue between a trained checkpoint and the evaluation routines.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "capsl/checkpoint.hpp"
#include "capsl/encoder.hpp"
#include "capsl/evaluation.hpp"
#include "capsl/gradcam.hpp"
#include "capsl/parallel.hpp"
#include "capsl/trainer.hpp"

namespace capsl {

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

inline Tensor<double> checkpoint_features(const Checkpoint& ckpt, const ImageTensorSet& images) {
  const Encoder<float> enc(ckpt.spec);
  if (!(images.shape == ckpt.spec.input)) throw ShapeError("dataset images do not match the checkpoint's input shape");
  return extract_features(enc, ckpt.params, images, all_rows(images.count()));
}

struct LinearEvalResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  LinearProbe probe;
  std::size_t train_size = 0, test_size = 0;
};

// Probe fitted on a seeded split of the rows, scored on the held-out part.
inline LinearEvalResult linear_eval(const Tensor<double>& features, std::span<const int> labels, double test_fraction, std::uint64_t seed,
                                    const ProbeConfig& cfg = {}) {
  const auto split = split_indices(features.rows(), test_fraction, seed);
  auto pick = [&](const std::vector<std::size_t>& rows, std::vector<int>& y) {
    Tensor<double> out = matrix<double>(rows.size(), features.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(features.row(rows[i]).begin(), features.row(rows[i]).end(), out.row(i).begin());
      y.push_back(labels[rows[i]]);
    }
    return out;
  };
  std::vector<int> ytrain, ytest;
  auto ftrain = pick(split.train, ytrain);
  auto ftest = pick(split.val, ytest);
  standardize(ftrain, ftest);
  LinearEvalResult r;
  r.probe = linear_probe(ftrain, ytrain, cfg);
  r.train_accuracy = r.probe.accuracy(ftrain, ytrain);
  r.test_accuracy = r.probe.accuracy(ftest, ytest);
  r.train_size = ytrain.size();
  r.test_size = ytest.size();
  return r;
}

// Probe weights on all rows expressed against raw (unstandardized) features,
// for use as GradCAM class weights.
inline Tensor<float> probe_class_weights(const Tensor<double>& features, std::span<const int> labels, const ProbeConfig& cfg = {}) {
  Tensor<double> fit = features;
  const std::size_t n = fit.rows(), d = fit.cols();
  std::vector<double> inv_sd(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += fit(i, k);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) var += (fit(i, k) - mean) * (fit(i, k) - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    inv_sd[k] = sd > 1e-12 ? 1.0 / sd : 0.0;
    for (std::size_t i = 0; i < n; ++i) fit(i, k) = (fit(i, k) - mean) * inv_sd[k];
  }
  const auto probe = linear_probe(fit, labels, cfg);
  Tensor<float> w = matrix<float>(probe.num_classes(), d);
  for (std::size_t c = 0; c < probe.num_classes(); ++c)
    for (std::size_t k = 0; k < d; ++k) w(c, k) = static_cast<float>(probe.weights(c, k) * inv_sd[k]);
  return w;
}

// One GradCAM map per image, targeting the image's own label.
inline std::vector<SaliencyMap> saliency_maps(const Checkpoint& ckpt, const ImageTensorSet& images, std::span<const int> labels) {
  if (labels.size() != images.count()) throw ValidationError("saliency: labels do not cover the dataset");
  const Encoder<float> enc(ckpt.spec);
  const auto features = checkpoint_features(ckpt, images);
  const auto weights = probe_class_weights(features, labels);
  std::vector<SaliencyMap> maps(images.count());
  parallel_for(images.count(), [&](std::size_t i) {
    maps[i] = gradcam(enc, ckpt.params, images.image(i), weights, static_cast<std::size_t>(labels[i]));
  });
  return maps;
}

inline ImageTensorSet maps_to_images(const std::vector<SaliencyMap>& maps, const std::vector<std::string>& ids) {
  ImageTensorSet s;
  s.ids = ids;
  if (maps.empty()) return s;
  s.shape = {1, maps[0].height, maps[0].width};
  for (const auto& m : maps)
    for (double v : m.values) s.data.push_back(static_cast<float>(v));
  return s;
}

}  // namespace capsl
