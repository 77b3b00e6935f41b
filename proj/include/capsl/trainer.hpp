#pragma once

// Self-supervised training loop over an image set. Positive pairs come either
// from two augmentations of the same image or from a caption-neighbor
// manifest (image i paired with image NN(i), both augmented).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capsl/augment.hpp"
#include "capsl/checkpoint.hpp"
#include "capsl/datamodel.hpp"
#include "capsl/encoder.hpp"
#include "capsl/error.hpp"
#include "capsl/evaluation.hpp"
#include "capsl/objectives.hpp"
#include "capsl/optim.hpp"
#include "capsl/pair_sampler.hpp"
#include "capsl/parallel.hpp"
#include "capsl/rng.hpp"

namespace capsl {

enum class PairSource { augment, manifest };

inline std::string to_string(PairSource s) { return s == PairSource::augment ? "augment" : "manifest"; }

inline PairSource pair_source_from_string(const std::string& s) {
  if (s == "augment") return PairSource::augment;
  if (s == "manifest") return PairSource::manifest;
  throw ConfigError("unknown pair_source '" + s + "' (expected augment or manifest)");
}

struct TrainConfig {
  ObjectiveConfig objective;
  PairSource pair_source = PairSource::augment;
  std::optional<std::string> manifest_path;
  double lr_peak = 1e-3;
  double weight_decay = 1e-2;
  // Defaults to 5% of the total step count.
  std::optional<std::size_t> warmup_steps;
  std::size_t epochs = 25;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  bool early_stop = true;
  EncoderSpec encoder;
  AugmentSpec augment;
  // Validation probe budget (full-batch iterations) and strength.
  std::size_t probe_iters = 200;
  double probe_l2 = 1e-3;
};

inline void validate(const TrainConfig& c) {
  if (c.pair_source == PairSource::manifest && !c.manifest_path) throw ConfigError("manifest_path is required when pair_source is manifest");
  if (c.pair_source == PairSource::augment && c.manifest_path) throw ConfigError("manifest_path is only valid when pair_source is manifest");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (c.batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(c.lr_peak >= 0.0) || !std::isfinite(c.lr_peak)) throw ConfigError("lr_peak must be a finite non-negative number");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (c.probe_iters == 0) throw ConfigError("probe_iters must be positive");
  validate(c.objective, c.batch_size);
  validate(c.encoder);
  validate(c.augment);
  if (c.objective.kind == ObjectiveKind::simsiam && c.encoder.pred_dims.empty()) throw ConfigError("simsiam needs a predictor head (pred_dims)");
}

// Flat JSON mirror of TrainConfig. Unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  bool pred_given = false;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "objective") c.objective.kind = objective_from_string(v.get<std::string>());
      else if (key == "temperature") c.objective.temperature = v.get<double>();
      else if (key == "queue_size") c.objective.queue_size = v.get<std::size_t>();
      else if (key == "num_prototypes") c.objective.num_prototypes = v.get<std::size_t>();
      else if (key == "sinkhorn_eps") c.objective.sinkhorn_eps = v.get<double>();
      else if (key == "sinkhorn_iters") c.objective.sinkhorn_iters = v.get<std::size_t>();
      else if (key == "pair_source") c.pair_source = pair_source_from_string(v.get<std::string>());
      else if (key == "manifest_path") c.manifest_path = v.get<std::string>();
      else if (key == "lr_peak") c.lr_peak = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "warmup_steps") c.warmup_steps = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "val_fraction") c.val_fraction = v.get<double>();
      else if (key == "early_stop") c.early_stop = v.get<bool>();
      else if (key == "conv_channels") {
        c.encoder.conv_blocks.clear();
        for (auto ch : v.get<std::vector<std::size_t>>()) c.encoder.conv_blocks.push_back({ch, 3, 1, true, true});
      } else if (key == "embed_dim") c.encoder.embed_dim = v.get<std::size_t>();
      else if (key == "proj_dims") c.encoder.proj_dims = v.get<std::vector<std::size_t>>();
      else if (key == "pred_dims") {
        c.encoder.pred_dims = v.get<std::vector<std::size_t>>();
        pred_given = true;
      } else if (key == "proj_layernorm") c.encoder.proj_layernorm = v.get<bool>();
      else if (key == "crop_min_scale") c.augment.crop_min_scale = v.get<double>();
      else if (key == "flip_prob") c.augment.flip_prob = v.get<double>();
      else if (key == "jitter") c.augment.jitter = v.get<double>();
      else if (key == "noise") c.augment.noise = v.get<double>();
      else if (key == "probe_iters") c.probe_iters = v.get<std::size_t>();
      else if (key == "probe_l2") c.probe_l2 = v.get<double>();
      else throw ConfigError("unknown train config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (c.objective.kind == ObjectiveKind::simsiam && !pred_given) c.encoder.pred_dims = {c.encoder.proj_dims.back(), c.encoder.proj_dims.back()};
  return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["objective"] = to_string(c.objective.kind);
  j["temperature"] = c.objective.temperature;
  j["queue_size"] = c.objective.queue_size;
  j["num_prototypes"] = c.objective.num_prototypes;
  j["sinkhorn_eps"] = c.objective.sinkhorn_eps;
  j["sinkhorn_iters"] = c.objective.sinkhorn_iters;
  j["pair_source"] = to_string(c.pair_source);
  if (c.manifest_path) j["manifest_path"] = *c.manifest_path;
  j["lr_peak"] = c.lr_peak;
  j["weight_decay"] = c.weight_decay;
  if (c.warmup_steps) j["warmup_steps"] = *c.warmup_steps;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["val_fraction"] = c.val_fraction;
  j["early_stop"] = c.early_stop;
  // Conv blocks are written as channel counts, the only form the parser
  // accepts; checkpoints carry the complete block specs.
  std::vector<std::size_t> channels;
  for (const auto& b : c.encoder.conv_blocks) channels.push_back(b.out_channels);
  j["conv_channels"] = channels;
  j["embed_dim"] = c.encoder.embed_dim;
  j["proj_dims"] = c.encoder.proj_dims;
  if (!c.encoder.pred_dims.empty()) j["pred_dims"] = c.encoder.pred_dims;
  j["proj_layernorm"] = c.encoder.proj_layernorm;
  j["crop_min_scale"] = c.augment.crop_min_scale;
  j["flip_prob"] = c.augment.flip_prob;
  j["jitter"] = c.augment.jitter;
  j["noise"] = c.augment.noise;
  j["probe_iters"] = c.probe_iters;
  j["probe_l2"] = c.probe_l2;
  return j;
}

// Two views per anchor, written as contiguous (B x C*H*W) batches.
struct Batch {
  std::vector<float> view1, view2;
  std::size_t size = 0;
};

// Augment mode: both views come from the anchor image. Manifest mode: view2
// comes from the anchor's partner. Every sample's augmentation is seeded from
// (batch_seed, slot, view), so a batch is reproducible regardless of threads.
inline Batch make_batch(PairSource source, const ImageTensorSet& images, std::span<const std::optional<std::size_t>> partners,
                        std::span<const std::size_t> anchors, const AugmentSpec& spec, std::uint64_t batch_seed) {
  const std::size_t per = images.shape.size();
  Batch b;
  b.size = anchors.size();
  b.view1.resize(b.size * per);
  b.view2.resize(b.size * per);
  std::vector<std::size_t> second(b.size);
  for (std::size_t s = 0; s < b.size; ++s) {
    const std::size_t a = anchors[s];
    if (a >= images.count()) throw ValidationError("make_batch: anchor index out of range");
    if (source == PairSource::augment) {
      second[s] = a;
    } else {
      if (a >= partners.size() || !partners[a]) throw ValidationError("make_batch: image '" + images.ids[a] + "' has no manifest partner");
      second[s] = *partners[a];
    }
  }
  parallel_for(b.size, [&](std::size_t s) {
    Rng r1(derive_seed(batch_seed, {s, 0}));
    Rng r2(derive_seed(batch_seed, {s, 1}));
    augment(images.image(anchors[s]), images.shape, spec, r1, {b.view1.data() + s * per, per});
    augment(images.image(second[s]), images.shape, spec, r2, {b.view2.data() + s * per, per});
  });
  return b;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
};

struct TrainHistory {
  double initial_val_acc = 0.0;  // before any update
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
};

// Index (1-based epoch) of the highest accuracy; the earliest wins ties.
inline std::size_t best_epoch(std::span<const double> val_acc) {
  if (val_acc.empty()) throw ValidationError("best_epoch: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_acc.size(); ++i)
    if (val_acc[i] > val_acc[best]) best = i;
  return best + 1;
}

inline std::string format_history_csv(const TrainHistory& h) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,val_acc,lr\n";
  for (const auto& e : h.epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_acc << ',' << e.lr << '\n';
  return out.str();
}

struct TrainResult {
  Checkpoint best;
  Checkpoint final;
  TrainHistory history;
};

// Deterministic train/validation split of `n` rows.
struct Split {
  std::vector<std::size_t> train, val;
};

inline Split split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  if (n < 4) throw ValidationError("need at least 4 images to split off a validation set");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, {0x5911}));
  rng.shuffle(idx.begin(), idx.end());
  auto nval = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  nval = std::clamp<std::size_t>(nval, 1, n - 2);
  Split s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// Frozen features for a subset of rows, in double.
template <class T>
Tensor<double> extract_features(const Encoder<T>& enc, const ParamSet<T>& params, const ImageTensorSet& images,
                                std::span<const std::size_t> rows) {
  const std::size_t per = images.shape.size();
  std::vector<T> batch(rows.size() * per);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto img = images.image(rows[i]);
    std::copy(img.begin(), img.end(), batch.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return enc.features(params, batch).template cast<double>();
}

// Z-scores columns of `fit` and applies the same transform to `other`.
inline void standardize(Tensor<double>& fit, Tensor<double>& other) {
  const std::size_t n = fit.rows(), d = fit.cols();
  for (std::size_t k = 0; k < d; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += fit(i, k);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (fit(i, k) - mean) * (fit(i, k) - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    const double inv = sd > 1e-12 ? 1.0 / sd : 0.0;
    for (std::size_t i = 0; i < n; ++i) fit(i, k) = (fit(i, k) - mean) * inv;
    for (std::size_t i = 0; i < other.rows(); ++i) other(i, k) = (other(i, k) - mean) * inv;
  }
}

// Probe accuracy on the validation rows after fitting on the training rows.
inline double probe_accuracy(const Encoder<float>& enc, const ParamSet<float>& params, const ImageTensorSet& images,
                             std::span<const int> labels, const Split& split, const ProbeConfig& probe_cfg) {
  auto ftrain = extract_features(enc, params, images, split.train);
  auto fval = extract_features(enc, params, images, split.val);
  if (!ftrain.all_finite() || !fval.all_finite()) return 0.0;
  standardize(ftrain, fval);
  std::vector<int> ytrain, yval;
  for (auto i : split.train) ytrain.push_back(labels[i]);
  for (auto i : split.val) yval.push_back(labels[i]);
  const auto probe = linear_probe(ftrain, ytrain, probe_cfg);
  return probe.accuracy(fval, yval);
}

namespace detail {

inline void normalize_prototypes(ParamSet<float>& params) {
  if (!params.contains("prototypes")) return;
  const auto& e = params.entries()[params.index_of("prototypes")];
  auto v = params.value("prototypes");
  const std::size_t K = e.shape[0], d = e.shape[1];
  for (std::size_t k = 0; k < K; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(v[k * d + j]) * v[k * d + j];
    const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < d; ++j) v[k * d + j] = static_cast<float>(v[k * d + j] * inv);
  }
  params.touch();
}

inline Tensor<float> prototype_tensor(const ParamSet<float>& params) {
  const auto& e = params.entries()[params.index_of("prototypes")];
  Tensor<float> c = matrix<float>(e.shape[0], e.shape[1]);
  const auto v = params.value("prototypes");
  std::copy(v.begin(), v.end(), c.data.begin());
  return c;
}

}  // namespace detail

// Initial parameters for a run: encoder weights plus, for SwAV, unit-norm
// prototypes.
inline ParamSet<float> init_train_params(const TrainConfig& cfg, const Encoder<float>& enc) {
  auto params = enc.init_params(derive_seed(cfg.seed, {0x1417}));
  if (cfg.objective.kind == ObjectiveKind::swav) {
    const auto K = cfg.objective.num_prototypes, d = enc.projection_dim();
    params.add("prototypes", {K, d});
    Rng rng(derive_seed(cfg.seed, {0x9607}));
    for (float& v : params.value("prototypes")) v = static_cast<float>(rng.normal());
    detail::normalize_prototypes(params);
  }
  return params;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// `labels` (aligned with images) feed the validation probe only. `manifest`
// is required in manifest mode.
inline TrainResult train(const TrainConfig& cfg, const ImageTensorSet& images, std::span<const int> labels,
                         const PairManifest* manifest = nullptr, const EpochCallback& on_epoch = {}) {
  validate(cfg);
  if (labels.size() != images.count()) throw ValidationError("train: labels do not cover the dataset");
  if (!(images.shape == cfg.encoder.input))
    throw ShapeError("train: dataset images do not match the encoder input shape");
  std::vector<std::optional<std::size_t>> partners;
  if (cfg.pair_source == PairSource::manifest) {
    if (!manifest) throw ConfigError("train: manifest mode needs a manifest");
    partners = resolve_manifest(*manifest, images.ids);
  }

  const Encoder<float> enc(cfg.encoder);
  auto params = init_train_params(cfg, enc);
  AdamW<float> opt(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  const Split split = split_indices(images.count(), cfg.val_fraction, cfg.seed);
  std::vector<std::size_t> pool;
  for (auto i : split.train)
    if (cfg.pair_source == PairSource::augment || partners[i]) pool.push_back(i);
  if (pool.size() < 2) throw ValidationError("train: fewer than 2 usable training images");

  const std::size_t B = std::min(cfg.batch_size, pool.size());
  const std::size_t steps_per_epoch = pool.size() / B;
  TrainHistory hist;
  hist.total_steps = steps_per_epoch * cfg.epochs;
  hist.warmup_steps = cfg.warmup_steps.value_or(static_cast<std::size_t>(0.05 * static_cast<double>(hist.total_steps)));
  if (hist.warmup_steps >= hist.total_steps) throw ConfigError("warmup_steps must be < total steps (" + std::to_string(hist.total_steps) + ")");

  const ProbeConfig probe_cfg{cfg.probe_l2, cfg.probe_iters, 1e-4};
  hist.initial_val_acc = probe_accuracy(enc, params, images, labels, split, probe_cfg);

  SupportQueue<float> queue(cfg.objective.kind == ObjectiveKind::nnclr ? cfg.objective.queue_size : 1);
  TrainResult result;
  result.best = {cfg.encoder, to_string(cfg.objective.kind), params};
  double best_acc = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = pool;
    Rng shuffler(derive_seed(cfg.seed, {0xe90c, epoch}));
    shuffler.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::span<const std::size_t> anchors(order.data() + s * B, B);
      const auto batch = make_batch(cfg.pair_source, images, partners, anchors, cfg.augment, derive_seed(cfg.seed, {0xba7c, epoch, s}));
      params.zero_grad();
      const auto f1 = enc.forward(params, batch.view1);
      const auto f2 = enc.forward(params, batch.view2);
      double loss = 0.0;
      switch (cfg.objective.kind) {
        case ObjectiveKind::ntxent: {
          const auto l = ntxent_loss(f1.projections, f2.projections, cfg.objective.temperature);
          loss = l.loss;
          enc.backward(f1, nullptr, &l.grad_a, nullptr, params);
          enc.backward(f2, nullptr, &l.grad_b, nullptr, params);
          break;
        }
        case ObjectiveKind::simsiam: {
          const auto l = simsiam_loss(f1.predictions, f2.predictions, f1.projections, f2.projections);
          loss = l.loss;
          enc.backward(f1, nullptr, nullptr, &l.grad_p1, params);
          enc.backward(f2, nullptr, nullptr, &l.grad_p2, params);
          break;
        }
        case ObjectiveKind::nnclr: {
          if (queue.empty()) queue.push(f1.projections);
          const auto l = nnclr_loss(f1.projections, f2.projections, queue, cfg.objective.temperature);
          loss = l.loss;
          enc.backward(f2, nullptr, &l.grad_z2, nullptr, params);
          break;
        }
        case ObjectiveKind::swav: {
          const auto C = detail::prototype_tensor(params);
          const auto l = swav_loss(f1.projections, f2.projections, C, cfg.objective.sinkhorn_eps, cfg.objective.sinkhorn_iters,
                                   cfg.objective.temperature);
          loss = l.loss;
          enc.backward(f1, nullptr, &l.grad_z1, nullptr, params);
          enc.backward(f2, nullptr, &l.grad_z2, nullptr, params);
          auto g = params.grad("prototypes");
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += l.grad_prototypes.data[k];
          break;
        }
      }
      if (!std::isfinite(loss))
        throw ValidationError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(s) + " (global step " +
                              std::to_string(step) + ")");
      lr = lr_at(step, hist.total_steps, hist.warmup_steps, cfg.lr_peak);
      try {
        opt.step(params, lr);
      } catch (const ValidationError& e) {
        throw ValidationError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(s));
      }
      detail::normalize_prototypes(params);
      loss_sum += loss;
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(steps_per_epoch), probe_accuracy(enc, params, images, labels, split, probe_cfg), lr};
    hist.epochs.push_back(rec);
    if (rec.val_acc > best_acc) {
      best_acc = rec.val_acc;
      hist.best_epoch = epoch;
      result.best.params = params;
    }
    if (on_epoch) on_epoch(rec);
  }
  result.final = {cfg.encoder, to_string(cfg.objective.kind), params};
  if (!cfg.early_stop) {
    result.best = result.final;
    hist.best_epoch = cfg.epochs;
  }
  result.history = std::move(hist);
  return result;
}

}  // namespace capsl
