#pragma once

// Contrastive objectives with closed-form gradients:
//   NT-Xent (SimCLR), negative cosine with stop-gradient (SimSiam),
//   nearest-neighbor NT-Xent with a support queue (NNCLR),
//   swapped prediction over Sinkhorn codes (SwAV).
// Inputs are (B x d) matrices. Stop-gradient outputs are exact zeros.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "capsl/error.hpp"
#include "capsl/tensor.hpp"

namespace capsl {

enum class ObjectiveKind { ntxent, simsiam, nnclr, swav };

inline std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::ntxent: return "ntxent";
    case ObjectiveKind::simsiam: return "simsiam";
    case ObjectiveKind::nnclr: return "nnclr";
    case ObjectiveKind::swav: return "swav";
  }
  return "?";
}

inline ObjectiveKind objective_from_string(const std::string& s) {
  if (s == "ntxent" || s == "simclr") return ObjectiveKind::ntxent;
  if (s == "simsiam") return ObjectiveKind::simsiam;
  if (s == "nnclr") return ObjectiveKind::nnclr;
  if (s == "swav") return ObjectiveKind::swav;
  throw ConfigError("unknown objective '" + s + "'");
}

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::ntxent;
  double temperature = 0.1;
  std::size_t queue_size = 1024;
  std::size_t num_prototypes = 30;
  double sinkhorn_eps = 0.05;
  std::size_t sinkhorn_iters = 3;
};

inline void validate(const ObjectiveConfig& c, std::size_t batch_size) {
  if (!(c.temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(c.sinkhorn_eps > 0.0)) throw ConfigError("sinkhorn_eps must be positive");
  if (c.sinkhorn_iters == 0) throw ConfigError("sinkhorn_iters must be positive");
  if (c.kind == ObjectiveKind::nnclr && c.queue_size < batch_size) throw ConfigError("queue_size must be >= batch size");
  if (c.kind == ObjectiveKind::swav && c.num_prototypes < 2) throw ConfigError("swav needs at least 2 prototypes");
}

template <class T>
struct PairLoss {
  T loss{};
  Tensor<T> grad_a;
  Tensor<T> grad_b;
};

namespace detail {

template <class T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape != b.shape)
    throw ShapeError(std::string(what) + ": inputs must be two matrices of equal shape");
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s{};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// NT-Xent over the 2B views u = [a; b]. Anchor i's positive is i +/- B; the
// other 2B - 2 views are negatives. Loss is averaged over the 2B anchors.
template <class T>
PairLoss<T> ntxent_loss(const Tensor<T>& a, const Tensor<T>& b, double temperature) {
  detail::check_pair(a, b, "ntxent");
  const std::size_t B = a.rows(), d = a.cols(), n = 2 * B;
  if (B < 2) throw ValidationError("ntxent: batch size must be >= 2 (no negatives)");
  if (!(temperature > 0.0)) throw ConfigError("ntxent: temperature must be positive");
  const T inv_tau = static_cast<T>(1.0 / temperature);
  auto view = [&](std::size_t i) { return i < B ? a.row(i) : b.row(i - B); };

  Tensor<T> sim = matrix<T>(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) sim(i, j) = sim(j, i) = detail::dot<T>(view(i), view(j)) * inv_tau;

  // g(i, j) = dL/dsim(i, j) contributed by anchor i.
  Tensor<T> g = matrix<T>(n, n);
  T total{};
  const T scale = T{1} / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = i < B ? i + B : i - B;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, sim(i, j));
    T z{};
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) z += std::exp(sim(i, j) - mx);
    const T lse = mx + std::log(z);
    total += lse - sim(i, pos);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) g(i, j) = scale * (std::exp(sim(i, j) - lse) - (j == pos ? T{1} : T{0}));
  }

  PairLoss<T> out;
  out.loss = total * scale;
  out.grad_a = matrix<T>(B, d);
  out.grad_b = matrix<T>(B, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto gi = i < B ? out.grad_a.row(i) : out.grad_b.row(i - B);
    for (std::size_t j = 0; j < n; ++j) {
      const T w = (g(i, j) + g(j, i)) * inv_tau;
      if (w == T{}) continue;
      const auto vj = view(j);
      for (std::size_t k = 0; k < d; ++k) gi[k] += w * vj[k];
    }
  }
  return out;
}

template <class T>
struct SimSiamLoss {
  T loss{};
  Tensor<T> grad_p1, grad_p2;
  // Always exactly zero: the projector outputs are stop-gradient targets.
  Tensor<T> grad_z1, grad_z2;
};

// loss = 1/2 mean_i(-cos(p1_i, z2_i)) + 1/2 mean_i(-cos(p2_i, z1_i)).
template <class T>
SimSiamLoss<T> simsiam_loss(const Tensor<T>& p1, const Tensor<T>& p2, const Tensor<T>& z1, const Tensor<T>& z2) {
  detail::check_pair(p1, p2, "simsiam");
  detail::check_pair(z1, z2, "simsiam");
  detail::check_pair(p1, z1, "simsiam");
  const std::size_t B = p1.rows(), d = p1.cols();
  if (B == 0) throw ValidationError("simsiam: empty batch");
  SimSiamLoss<T> out;
  out.grad_p1 = matrix<T>(B, d);
  out.grad_p2 = matrix<T>(B, d);
  out.grad_z1 = matrix<T>(B, d);
  out.grad_z2 = matrix<T>(B, d);
  const T scale = T{1} / (T{2} * static_cast<T>(B));
  auto term = [&](const Tensor<T>& p, const Tensor<T>& z, Tensor<T>& gp) {
    T sum{};
    for (std::size_t i = 0; i < B; ++i) {
      const auto pr = p.row(i);
      const auto zr = z.row(i);
      const T pn = std::sqrt(detail::dot<T>(pr, pr));
      const T zn = std::sqrt(detail::dot<T>(zr, zr));
      if (pn == T{} || zn == T{}) throw ValidationError("simsiam: zero-norm row " + std::to_string(i));
      const T cos = detail::dot<T>(pr, zr) / (pn * zn);
      sum -= cos;
      auto g = gp.row(i);
      for (std::size_t k = 0; k < d; ++k) g[k] = -scale * (zr[k] / (pn * zn) - cos * pr[k] / (pn * pn));
    }
    return sum * scale;
  };
  out.loss = term(p1, z2, out.grad_p1) + term(p2, z1, out.grad_p2);
  return out;
}

// FIFO buffer of past embeddings; index 0 is the oldest row.
template <class T>
class SupportQueue {
 public:
  explicit SupportQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("support queue capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  std::size_t dim() const { return dim_; }
  const std::vector<T>& row(std::size_t i) const { return rows_.at(i); }

  void push(const Tensor<T>& batch) {
    if (batch.shape.size() != 2) throw ShapeError("queue push: expected a matrix");
    if (!rows_.empty() && batch.cols() != dim_) throw ShapeError("queue push: dimension mismatch");
    dim_ = batch.cols();
    for (std::size_t i = 0; i < batch.rows(); ++i) {
      rows_.emplace_back(batch.row(i).begin(), batch.row(i).end());
      if (rows_.size() > capacity_) rows_.pop_front();
    }
  }

  // Index of the row with the largest dot product; lowest index wins ties.
  std::size_t nearest(std::span<const T> q) const {
    if (rows_.empty()) throw ValidationError("support queue is empty");
    if (q.size() != dim_) throw ShapeError("queue lookup: dimension mismatch");
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rows_.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim_; ++k) s += static_cast<double>(q[k]) * static_cast<double>(rows_[j][k]);
      if (j == 0 || s > best_s) {
        best = j;
        best_s = s;
      }
    }
    return best;
  }

 private:
  std::size_t capacity_;
  std::size_t dim_ = 0;
  std::deque<std::vector<T>> rows_;
};

template <class T>
struct NNCLRLoss {
  T loss{};
  Tensor<T> grad_z1;  // exactly zero: the neighbor lookup blocks gradients
  Tensor<T> grad_z2;
  std::vector<std::size_t> neighbors;
};

// NT-Xent between NN(z1) (looked up in the queue, treated as constant) and
// z2 with in-batch negatives; afterwards z1 is pushed into the queue.
template <class T>
NNCLRLoss<T> nnclr_loss(const Tensor<T>& z1, const Tensor<T>& z2, SupportQueue<T>& queue, double temperature) {
  detail::check_pair(z1, z2, "nnclr");
  if (queue.empty()) throw ValidationError("nnclr: support queue is empty");
  const std::size_t B = z1.rows(), d = z1.cols();
  Tensor<T> nn = matrix<T>(B, d);
  NNCLRLoss<T> out;
  out.neighbors.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    out.neighbors[i] = queue.nearest(z1.row(i));
    const auto& r = queue.row(out.neighbors[i]);
    std::copy(r.begin(), r.end(), nn.row(i).begin());
  }
  auto base = ntxent_loss(nn, z2, temperature);
  out.loss = base.loss;
  out.grad_z2 = std::move(base.grad_b);
  out.grad_z1 = matrix<T>(B, d);
  queue.push(z1);
  return out;
}

template <class T>
struct SinkhornResult {
  // Balanced plan after the final column step (rows ~ 1/B, columns = 1/K).
  Tensor<T> plan;
  // Codes: the plan with each row rescaled to sum to 1.
  Tensor<T> codes;
  // L1 deviation of row sums from 1/B after each iteration.
  std::vector<double> row_error;
};

// Sinkhorn-Knopp on exp(scores / eps), shifted by each row's maximum. Each
// iteration normalizes rows to 1/B, then columns to 1/K.
template <class T>
SinkhornResult<T> sinkhorn_balance(const Tensor<T>& scores, double eps, std::size_t iters) {
  if (scores.shape.size() != 2 || scores.rows() == 0 || scores.cols() == 0) throw ShapeError("sinkhorn: scores must be a non-empty matrix");
  if (!(eps > 0.0)) throw ConfigError("sinkhorn: eps must be positive");
  if (!scores.all_finite()) throw ValidationError("sinkhorn: non-finite scores");
  const std::size_t B = scores.rows(), K = scores.cols();
  SinkhornResult<T> r;
  r.plan = matrix<T>(B, K);
  for (std::size_t i = 0; i < B; ++i) {
    const auto s = scores.row(i);
    const T mx = *std::max_element(s.begin(), s.end());
    for (std::size_t k = 0; k < K; ++k) r.plan(i, k) = std::exp((s[k] - mx) / static_cast<T>(eps));
  }
  const T row_target = T{1} / static_cast<T>(B);
  const T col_target = T{1} / static_cast<T>(K);
  std::vector<T> col(K);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < B; ++i) {
      T sum{};
      for (std::size_t k = 0; k < K; ++k) sum += r.plan(i, k);
      const T f = row_target / sum;
      for (std::size_t k = 0; k < K; ++k) r.plan(i, k) *= f;
    }
    std::fill(col.begin(), col.end(), T{});
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < K; ++k) col[k] += r.plan(i, k);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < K; ++k) r.plan(i, k) *= col_target / col[k];
    double err = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
      T sum{};
      for (std::size_t k = 0; k < K; ++k) sum += r.plan(i, k);
      err += std::abs(static_cast<double>(sum - row_target));
    }
    r.row_error.push_back(err);
  }
  r.codes = r.plan;
  for (std::size_t i = 0; i < B; ++i) {
    T sum{};
    for (std::size_t k = 0; k < K; ++k) sum += r.codes(i, k);
    for (std::size_t k = 0; k < K; ++k) r.codes(i, k) /= sum;
  }
  return r;
}

template <class T>
Tensor<T> sinkhorn(const Tensor<T>& scores, double eps, std::size_t iters) {
  return sinkhorn_balance(scores, eps, iters).codes;
}

template <class T>
struct SwAVLoss {
  T loss{};
  Tensor<T> grad_z1, grad_z2;
  Tensor<T> grad_prototypes;
  Tensor<T> codes1, codes2;
};

template <class T>
Tensor<T> prototype_scores(const Tensor<T>& z, const Tensor<T>& prototypes) {
  const std::size_t B = z.rows(), K = prototypes.rows();
  Tensor<T> s = matrix<T>(B, K);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < K; ++k) s(i, k) = detail::dot<T>(z.row(i), prototypes.row(k));
  return s;
}

// Swapped prediction with the codes held fixed:
//   loss = -1/(2B) sum_i [ sum_k q2_ik log softmax(z1_i C^T / tau)_k
//                        + sum_k q1_ik log softmax(z2_i C^T / tau)_k ]
template <class T>
SwAVLoss<T> swav_loss_with_codes(const Tensor<T>& z1, const Tensor<T>& z2, const Tensor<T>& prototypes, const Tensor<T>& codes1,
                                 const Tensor<T>& codes2, double temperature) {
  detail::check_pair(z1, z2, "swav");
  if (prototypes.shape.size() != 2 || prototypes.cols() != z1.cols()) throw ShapeError("swav: prototypes must be (K x d)");
  const std::size_t B = z1.rows(), d = z1.cols(), K = prototypes.rows();
  if (K < 2) throw ValidationError("swav: need at least 2 prototypes");
  if (codes1.rows() != B || codes1.cols() != K || codes2.rows() != B || codes2.cols() != K) throw ShapeError("swav: codes must be (B x K)");
  if (!(temperature > 0.0)) throw ConfigError("swav: temperature must be positive");
  const T inv_tau = static_cast<T>(1.0 / temperature);
  const T scale = T{1} / (T{2} * static_cast<T>(B));

  SwAVLoss<T> out;
  out.grad_z1 = matrix<T>(B, d);
  out.grad_z2 = matrix<T>(B, d);
  out.grad_prototypes = matrix<T>(K, d);
  out.codes1 = codes1;
  out.codes2 = codes2;
  T total{};
  auto term = [&](const Tensor<T>& z, const Tensor<T>& target, Tensor<T>& gz) {
    const auto s = prototype_scores(z, prototypes);
    std::vector<T> logits(K), ds(K);
    for (std::size_t i = 0; i < B; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < K; ++k) {
        logits[k] = s(i, k) * inv_tau;
        mx = std::max(mx, logits[k]);
      }
      T zsum{};
      for (std::size_t k = 0; k < K; ++k) zsum += std::exp(logits[k] - mx);
      const T lse = mx + std::log(zsum);
      T qsum{};
      for (std::size_t k = 0; k < K; ++k) {
        total -= target(i, k) * (logits[k] - lse);
        qsum += target(i, k);
      }
      for (std::size_t k = 0; k < K; ++k) ds[k] = scale * inv_tau * (std::exp(logits[k] - lse) * qsum - target(i, k));
      auto g = gz.row(i);
      const auto zr = z.row(i);
      for (std::size_t k = 0; k < K; ++k) {
        const auto c = prototypes.row(k);
        auto gc = out.grad_prototypes.row(k);
        for (std::size_t j = 0; j < d; ++j) {
          g[j] += ds[k] * c[j];
          gc[j] += ds[k] * zr[j];
        }
      }
    }
  };
  term(z1, codes2, out.grad_z1);
  term(z2, codes1, out.grad_z2);
  out.loss = total * scale;
  return out;
}

// Codes come from Sinkhorn on each view's prototype scores and are treated
// as constants, so no gradient flows through the assignment.
template <class T>
SwAVLoss<T> swav_loss(const Tensor<T>& z1, const Tensor<T>& z2, const Tensor<T>& prototypes, double eps, std::size_t iters,
                      double temperature) {
  detail::check_pair(z1, z2, "swav");
  if (prototypes.shape.size() != 2 || prototypes.rows() < 2) throw ValidationError("swav: need at least 2 prototypes");
  if (prototypes.cols() != z1.cols()) throw ShapeError("swav: prototypes must be (K x d)");
  const auto q1 = sinkhorn(prototype_scores(z1, prototypes), eps, iters);
  const auto q2 = sinkhorn(prototype_scores(z2, prototypes), eps, iters);
  return swav_loss_with_codes(z1, z2, prototypes, q1, q2, temperature);
}

}  // namespace capsl
