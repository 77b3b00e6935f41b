#pragma once

// Frozen-feature evaluation: multinomial logistic-regression probe,
// N-way K-shot nearest-centroid episodes, pixel-level saliency AUCs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"
#include "capsl/gradcam.hpp"
#include "capsl/rng.hpp"
#include "capsl/tensor.hpp"

namespace capsl {

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeConfig {
  double l2 = 1e-3;
  std::size_t max_iters = 500;
  double tol = 1e-4;
};

struct LinearProbe {
  Tensor<double> weights;  // classes x d
  std::vector<double> bias;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> loss_history;

  std::size_t num_classes() const { return bias.size(); }

  std::size_t predict(std::span<const double> x) const {
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < bias.size(); ++c) {
      double s = bias[c];
      const auto w = weights.row(c);
      for (std::size_t k = 0; k < x.size(); ++k) s += w[k] * x[k];
      if (s > best_s) {
        best_s = s;
        best = c;
      }
    }
    return best;
  }

  double accuracy(const Tensor<double>& x, std::span<const int> labels) const {
    if (x.rows() != labels.size()) throw ShapeError("probe accuracy: features and labels differ in length");
    if (labels.empty()) throw ValidationError("probe accuracy: empty evaluation set");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predict(x.row(i)) == static_cast<std::size_t>(labels[i]) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(labels.size());
  }
};

namespace detail {

// Mean cross-entropy + (l2 / 2) |W|^2 and its gradient with respect to the
// packed parameters [W (C x d), b (C)].
inline double probe_objective(const Tensor<double>& x, std::span<const int> y, std::size_t classes, double l2,
                              std::span<const double> params, std::vector<double>* grad) {
  const std::size_t n = x.rows(), d = x.cols();
  const double* w = params.data();
  const double* b = params.data() + classes * d;
  if (grad) grad->assign(params.size(), 0.0);
  std::vector<double> logits(classes);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = x.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      double s = b[c];
      for (std::size_t k = 0; k < d; ++k) s += w[c * d + k] * xi[k];
      logits[c] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(logits[c] - mx);
    const double lse = mx + std::log(z);
    total += lse - logits[static_cast<std::size_t>(y[i])];
    if (grad) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = (std::exp(logits[c] - lse) - (static_cast<std::size_t>(y[i]) == c ? 1.0 : 0.0)) / static_cast<double>(n);
        for (std::size_t k = 0; k < d; ++k) (*grad)[c * d + k] += g * xi[k];
        (*grad)[classes * d + c] += g;
      }
    }
  }
  double reg = 0.0;
  for (std::size_t k = 0; k < classes * d; ++k) {
    reg += w[k] * w[k];
    if (grad) (*grad)[k] += l2 * w[k];
  }
  return total / static_cast<double>(n) + 0.5 * l2 * reg;
}

}  // namespace detail

// Full-batch gradient descent with Armijo backtracking from the given start
// (zeros by default). The objective is convex, strictly so in W for l2 > 0.
inline LinearProbe linear_probe(const Tensor<double>& x, std::span<const int> labels, const ProbeConfig& cfg = {},
                                std::optional<std::vector<double>> init = std::nullopt) {
  if (x.shape.size() != 2 || x.rows() != labels.size()) throw ShapeError("linear_probe: features and labels differ in length");
  if (x.rows() == 0) throw ValidationError("linear_probe: no training examples");
  if (!x.all_finite()) throw ValidationError("linear_probe: non-finite features");
  int max_label = 0;
  for (int l : labels) {
    if (l < 0) throw ValidationError("linear_probe: negative label");
    max_label = std::max(max_label, l);
  }
  const auto classes = static_cast<std::size_t>(max_label) + 1;
  {
    std::vector<char> seen(classes, 0);
    std::size_t distinct = 0;
    for (int l : labels) distinct += seen[static_cast<std::size_t>(l)]++ == 0 ? 1 : 0;
    if (distinct < 2) throw ValidationError("linear_probe: need at least 2 classes");
  }
  const std::size_t d = x.cols();
  std::vector<double> params = init.value_or(std::vector<double>(classes * d + classes, 0.0));
  if (params.size() != classes * d + classes) throw ShapeError("linear_probe: initial parameters have wrong size");

  LinearProbe probe;
  std::vector<double> grad, trial(params.size());
  double f = detail::probe_objective(x, labels, classes, cfg.l2, params, &grad);
  probe.loss_history.push_back(f);
  double step = 1.0;
  std::size_t it = 0;
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double e : v) s += e * e;
    return std::sqrt(s);
  };
  double gnorm = norm(grad);
  while (gnorm > cfg.tol && it < cfg.max_iters) {
    const double g2 = gnorm * gnorm;
    step *= 2.0;
    double f_new = 0.0;
    for (;;) {
      for (std::size_t k = 0; k < params.size(); ++k) trial[k] = params[k] - step * grad[k];
      f_new = detail::probe_objective(x, labels, classes, cfg.l2, trial, nullptr);
      if (f_new <= f - 0.5 * step * g2) break;
      step *= 0.5;
      if (step < 1e-20) break;
    }
    if (step < 1e-20) break;
    params.swap(trial);
    f = detail::probe_objective(x, labels, classes, cfg.l2, params, &grad);
    gnorm = norm(grad);
    probe.loss_history.push_back(f);
    ++it;
  }
  probe.weights = matrix<double>(classes, d);
  std::copy(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(classes * d), probe.weights.data.begin());
  probe.bias.assign(params.begin() + static_cast<std::ptrdiff_t>(classes * d), params.end());
  probe.loss = f;
  probe.grad_norm = gnorm;
  probe.iterations = it;
  probe.converged = gnorm <= cfg.tol;
  return probe;
}

// ---------------------------------------------------------------------------
// Few-shot episodes
// ---------------------------------------------------------------------------

struct FewShotConfig {
  std::size_t episodes = 200;
  std::size_t way = 5;
  std::size_t shot = 5;
  std::size_t queries = 15;
  std::uint64_t seed = 0;
};

struct FewShotResult {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::vector<double> episode_accuracy;
  std::vector<int> excluded_classes;  // too few examples for shot + queries
};

namespace detail {

inline std::vector<double> unit(std::span<const double> v) {
  double s = 0.0;
  for (double e : v) s += e * e;
  std::vector<double> out(v.begin(), v.end());
  if (s > 0.0) {
    const double inv = 1.0 / std::sqrt(s);
    for (double& e : out) e *= inv;
  }
  return out;
}

}  // namespace detail

// Each episode samples `way` classes, `shot` support and `queries` query
// examples per class. Centroids are means of L2-normalized support features,
// normalized again; queries go to the centroid with the highest cosine.
inline FewShotResult fewshot_eval(const Tensor<double>& x, std::span<const int> labels, const FewShotConfig& cfg) {
  if (x.shape.size() != 2 || x.rows() != labels.size()) throw ShapeError("fewshot: features and labels differ in length");
  if (cfg.way < 2 || cfg.shot < 1 || cfg.queries < 1 || cfg.episodes < 1) throw ConfigError("fewshot: invalid episode shape");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  FewShotResult result;
  std::vector<int> pool;
  for (const auto& [cls, idx] : by_class) {
    if (idx.size() >= cfg.shot + cfg.queries) pool.push_back(cls);
    else result.excluded_classes.push_back(cls);
  }
  if (pool.size() < cfg.way)
    throw ValidationError("fewshot: only " + std::to_string(pool.size()) + " classes have enough examples for " + std::to_string(cfg.way) + "-way episodes");

  std::vector<std::vector<double>> unit_rows(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) unit_rows[i] = detail::unit(x.row(i));
  const std::size_t d = x.cols();

  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    Rng rng(derive_seed(cfg.seed, {e}));
    std::vector<int> classes = pool;
    rng.shuffle(classes.begin(), classes.end());
    classes.resize(cfg.way);
    std::vector<std::vector<double>> centroids;
    std::vector<std::pair<std::size_t, std::size_t>> queries;  // (row, class position)
    for (std::size_t c = 0; c < cfg.way; ++c) {
      std::vector<std::size_t> idx = by_class[classes[c]];
      rng.shuffle(idx.begin(), idx.end());
      std::vector<double> centroid(d, 0.0);
      for (std::size_t s = 0; s < cfg.shot; ++s)
        for (std::size_t k = 0; k < d; ++k) centroid[k] += unit_rows[idx[s]][k];
      for (double& v : centroid) v /= static_cast<double>(cfg.shot);
      centroids.push_back(detail::unit(centroid));
      for (std::size_t q = 0; q < cfg.queries; ++q) queries.emplace_back(idx[cfg.shot + q], c);
    }
    std::size_t hit = 0;
    for (const auto& [row, truth] : queries) {
      std::size_t best = 0;
      double best_s = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < cfg.way; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += unit_rows[row][k] * centroids[c][k];
        if (s > best_s) {
          best_s = s;
          best = c;
        }
      }
      hit += best == truth ? 1 : 0;
    }
    result.episode_accuracy.push_back(static_cast<double>(hit) / static_cast<double>(queries.size()));
  }
  const double n = static_cast<double>(result.episode_accuracy.size());
  double sum = 0.0;
  for (double a : result.episode_accuracy) sum += a;
  result.mean = sum / n;
  double var = 0.0;
  for (double a : result.episode_accuracy) var += (a - result.mean) * (a - result.mean);
  result.stderr_ = n > 1 ? std::sqrt(var / (n - 1)) / std::sqrt(n) : 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// Saliency AUCs
// ---------------------------------------------------------------------------

namespace detail {

inline void check_binary(std::span<const double> scores, std::span<const std::uint8_t> labels, std::size_t& pos, std::size_t& neg) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  pos = 0;
  for (auto l : labels) {
    if (l > 1) throw ValidationError("auc: labels must be 0 or 1");
    pos += l;
  }
  neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValidationError("auc: undefined when all targets belong to one class");
}

}  // namespace detail

// Rank statistic with midranks for ties.
inline double auc_roc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos = 0, neg = 0;
  detail::check_binary(scores, labels, pos, neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum += midrank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

// Step integration of precision over recall at each unique threshold, from
// the highest score down: sum_t (R_t - R_{t-1}) * P_t.
inline double auc_pr(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t pos = 0, neg = 0;
  detail::check_binary(scores, labels, pos, neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double area = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0, i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]];
      ++seen;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

enum class AucAveraging { pooled, per_image };

struct SaliencyScores {
  double auc_roc = 0.0;
  double auc_pr = 0.0;
  std::size_t images = 0;
  std::size_t pixels = 0;
};

// Pixel-level AUCs of saliency maps against binary masks, matched by position.
// Pooled: all pixels form one ranking. Per-image: mean over images whose mask
// has both classes.
inline SaliencyScores saliency_auc(std::span<const SaliencyMap> maps, const MaskSet& masks, AucAveraging mode = AucAveraging::pooled) {
  if (maps.size() != masks.count()) throw ShapeError("saliency_auc: " + std::to_string(maps.size()) + " maps vs " + std::to_string(masks.count()) + " masks");
  SaliencyScores out;
  out.images = maps.size();
  std::vector<double> scores;
  std::vector<std::uint8_t> targets;
  double roc_sum = 0.0, pr_sum = 0.0;
  std::size_t scored = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto& m = maps[i];
    if (m.height != masks.height || m.width != masks.width || m.values.size() != m.height * m.width)
      throw ShapeError("saliency_auc: map " + std::to_string(i) + " does not match mask shape");
    const auto mk = masks.mask(i);
    if (mode == AucAveraging::pooled) {
      scores.insert(scores.end(), m.values.begin(), m.values.end());
      targets.insert(targets.end(), mk.begin(), mk.end());
    } else {
      std::size_t p = 0;
      for (auto v : mk) p += v;
      if (p == 0 || p == mk.size()) continue;
      roc_sum += auc_roc(m.values, mk);
      pr_sum += auc_pr(m.values, mk);
      ++scored;
    }
    out.pixels += m.values.size();
  }
  if (mode == AucAveraging::pooled) {
    out.auc_roc = auc_roc(scores, targets);
    out.auc_pr = auc_pr(scores, targets);
  } else {
    if (scored == 0) throw ValidationError("saliency_auc: no image has both foreground and background");
    out.auc_roc = roc_sum / static_cast<double>(scored);
    out.auc_pr = pr_sum / static_cast<double>(scored);
  }
  return out;
}

}  // namespace capsl
