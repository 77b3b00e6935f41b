#pragma once

// Exact cosine nearest-neighbor search over unit-norm caption embeddings.
//
// Every dot product is evaluated in one canonical order: four f64 partial sums
// over the dimensions k = l (mod 4), l = 0..3, each accumulated in increasing
// k, combined as (s0 + s1) + (s2 + s3). Products of two f32 values are exact
// in f64, so any implementation that keeps this order (scalar loop, SIMD
// lanes, with or without FMA) produces bit-identical similarities. The
// scalar oracle and the blocked search therefore agree exactly on ties.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"
#include "capsl/parallel.hpp"

namespace capsl {

struct NNQueryConfig {
  bool exclude_self = true;
  // Ties are always broken toward the lowest row index.
  std::size_t block_size = 256;
};

struct Neighbor {
  std::size_t index = 0;
  double similarity = 0.0;
  bool operator==(const Neighbor&) const = default;
};

class NoNeighborError : public Error {
 public:
  using Error::Error;
};

inline double canonical_dot(std::span<const float> a, std::span<const float> b) {
  const std::size_t d = a.size();
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t k = 0;
  for (; k + 4 <= d; k += 4) {
    s0 += static_cast<double>(a[k]) * static_cast<double>(b[k]);
    s1 += static_cast<double>(a[k + 1]) * static_cast<double>(b[k + 1]);
    s2 += static_cast<double>(a[k + 2]) * static_cast<double>(b[k + 2]);
    s3 += static_cast<double>(a[k + 3]) * static_cast<double>(b[k + 3]);
  }
  if (k < d) s0 += static_cast<double>(a[k]) * static_cast<double>(b[k]);
  if (k + 1 < d) s1 += static_cast<double>(a[k + 1]) * static_cast<double>(b[k + 1]);
  if (k + 2 < d) s2 += static_cast<double>(a[k + 2]) * static_cast<double>(b[k + 2]);
  return (s0 + s1) + (s2 + s3);
}

// Reference search: a plain scan over every candidate row.
inline Neighbor nn_oracle(const EmbeddingMatrix& m, std::size_t query, const NNQueryConfig& cfg = {}) {
  if (query >= m.rows()) throw ValidationError("query index out of range");
  const std::size_t candidates = m.rows() - (cfg.exclude_self ? 1 : 0);
  if (candidates == 0) throw NoNeighborError("no neighbor: matrix has a single row and self is excluded");
  Neighbor best{0, -std::numeric_limits<double>::infinity()};
  bool found = false;
  for (std::size_t j = 0; j < m.rows(); ++j) {
    if (cfg.exclude_self && j == query) continue;
    const double s = canonical_dot(m.row(query), m.row(j));
    if (!found || s > best.similarity) {
      best = {j, s};
      found = true;
    }
  }
  return best;
}

namespace detail {

typedef double lane4 __attribute__((vector_size(32)));

// f64 copy of the matrix, rows zero-padded to a multiple of four so that lane
// l of each vector holds the dimensions k = l (mod 4).
struct PaddedRows {
  std::size_t rows = 0;
  std::size_t lanes = 0;  // vectors per row
  std::vector<lane4> data;

  explicit PaddedRows(const EmbeddingMatrix& m) : rows(m.rows()), lanes((m.dim + 3) / 4), data(rows * lanes) {
    for (std::size_t i = 0; i < rows; ++i) {
      const auto src = m.row(i);
      for (std::size_t v = 0; v < lanes; ++v) {
        lane4 x = {0.0, 0.0, 0.0, 0.0};
        for (std::size_t l = 0; l < 4; ++l) {
          const std::size_t k = 4 * v + l;
          if (k < m.dim) x[l] = static_cast<double>(src[k]);
        }
        data[i * lanes + v] = x;
      }
    }
  }
  const lane4* row(std::size_t i) const { return data.data() + i * lanes; }
};

inline double reduce(lane4 s) { return (s[0] + s[1]) + (s[2] + s[3]); }

// Scores one query tile against one row tile, updating the running best for
// each query. Rows are visited in increasing index and only a strictly larger
// score replaces the incumbent, which keeps the lowest index on ties.
inline void scan_tile(const PaddedRows& x, std::size_t q_begin, std::size_t q_end, std::size_t r_begin, std::size_t r_end,
                      bool exclude_self, std::span<Neighbor> best, std::span<char> found) {
  const std::size_t nv = x.lanes;
  for (std::size_t q = q_begin; q < q_end; ++q) {
    const lane4* qv = x.row(q);
    Neighbor& b = best[q - q_begin];
    char& f = found[q - q_begin];
    auto offer = [&](std::size_t j, double s) {
      if (exclude_self && j == q) return;
      if (!f || s > b.similarity) {
        b = {j, s};
        f = 1;
      }
    };
    std::size_t r = r_begin;
    for (; r + 4 <= r_end; r += 4) {
      const lane4* x0 = x.row(r);
      const lane4* x1 = x0 + nv;
      const lane4* x2 = x1 + nv;
      const lane4* x3 = x2 + nv;
      lane4 s0 = {0.0, 0.0, 0.0, 0.0}, s1 = s0, s2 = s0, s3 = s0;
      for (std::size_t k = 0; k < nv; ++k) {
        const lane4 a = qv[k];
        s0 += a * x0[k];
        s1 += a * x1[k];
        s2 += a * x2[k];
        s3 += a * x3[k];
      }
      offer(r, reduce(s0));
      offer(r + 1, reduce(s1));
      offer(r + 2, reduce(s2));
      offer(r + 3, reduce(s3));
    }
    for (; r < r_end; ++r) {
      const lane4* x0 = x.row(r);
      lane4 s = {0.0, 0.0, 0.0, 0.0};
      for (std::size_t k = 0; k < nv; ++k) s += qv[k] * x0[k];
      offer(r, reduce(s));
    }
  }
}

}  // namespace detail

// Blocked search: query blocks are distributed across workers, each block
// sweeps row tiles in increasing order. Output is identical to nn_oracle for
// every query and independent of block size and worker count.
inline std::vector<Neighbor> nearest_neighbors(const EmbeddingMatrix& m, const NNQueryConfig& cfg = {}) {
  if (cfg.block_size == 0) throw ConfigError("block_size must be >= 1");
  const std::size_t n = m.rows();
  if (m.data.size() != n * m.dim) throw ValidationError("embedding payload does not match ids x dim");
  if (n == 0) return {};
  if (cfg.exclude_self && n < 2) throw NoNeighborError("no neighbor: matrix has a single row and self is excluded");

  const detail::PaddedRows padded(m);
  const std::size_t bs = cfg.block_size;
  const std::size_t blocks = (n + bs - 1) / bs;
  std::vector<Neighbor> out(n);
  parallel_for(blocks, [&](std::size_t b) {
    const std::size_t q0 = b * bs;
    const std::size_t q1 = std::min(n, q0 + bs);
    std::vector<Neighbor> best(q1 - q0);
    std::vector<char> found(q1 - q0, 0);
    for (std::size_t r0 = 0; r0 < n; r0 += bs)
      detail::scan_tile(padded, q0, q1, r0, std::min(n, r0 + bs), cfg.exclude_self, best, found);
    std::copy(best.begin(), best.end(), out.begin() + static_cast<std::ptrdiff_t>(q0));
  });
  return out;
}

inline PairManifest build_pair_manifest(const EmbeddingMatrix& m, const NNQueryConfig& cfg = {}) {
  const auto nn = nearest_neighbors(m, cfg);
  PairManifest p;
  p.entries.reserve(nn.size());
  for (std::size_t i = 0; i < nn.size(); ++i) p.entries.push_back({m.ids[i], m.ids[nn[i].index], nn[i].similarity});
  return p;
}

struct ManifestStats {
  std::size_t pairs = 0;
  double mean_similarity = 0.0;
  double min_similarity = 0.0;
  std::optional<double> same_class_rate;
};

// `labels` maps id -> class. When given it must cover every id in the manifest.
inline ManifestStats manifest_stats(const PairManifest& p, const std::unordered_map<std::string, int>* labels = nullptr) {
  if (p.entries.empty()) throw ValidationError("empty manifest");
  ManifestStats s;
  s.pairs = p.entries.size();
  s.min_similarity = std::numeric_limits<double>::infinity();
  double sum = 0.0;
  std::size_t same = 0;
  for (const auto& e : p.entries) {
    sum += e.similarity;
    s.min_similarity = std::min(s.min_similarity, e.similarity);
    if (labels) {
      auto a = labels->find(e.query_id);
      auto b = labels->find(e.neighbor_id);
      if (a == labels->end()) throw ValidationError("missing label for id '" + e.query_id + "'");
      if (b == labels->end()) throw ValidationError("missing label for id '" + e.neighbor_id + "'");
      same += (a->second == b->second) ? 1 : 0;
    }
  }
  s.mean_similarity = sum / static_cast<double>(s.pairs);
  if (labels) s.same_class_rate = static_cast<double>(same) / static_cast<double>(s.pairs);
  return s;
}

// Resolves manifest ids against `ids`; result[i] is the partner of row i, or
// nullopt when row i has no entry.
inline std::vector<std::optional<std::size_t>> resolve_manifest(const PairManifest& p, std::span<const std::string> ids) {
  const auto index = index_ids(ids);
  std::vector<std::optional<std::size_t>> out(ids.size());
  for (const auto& e : p.entries) {
    auto q = index.find(e.query_id);
    auto nb = index.find(e.neighbor_id);
    if (q == index.end()) throw ValidationError("manifest id '" + e.query_id + "' not in dataset");
    if (nb == index.end()) throw ValidationError("manifest id '" + e.neighbor_id + "' not in dataset");
    out[q->second] = nb->second;
  }
  return out;
}

}  // namespace capsl
