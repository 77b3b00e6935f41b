#pragma once

// Deterministic bag-of-words sentence embedder based on signed feature
// hashing. Stands in for a pretrained sentence encoder so that the pipeline
// runs without external models.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"
#include "capsl/rng.hpp"

namespace capsl {

// Lowercases ASCII letters and splits on ASCII characters that are not
// letters or digits. Bytes >= 0x80 are kept as token bytes, so UTF-8 text
// tokenizes the same way in every locale.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool word = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
    if (word) {
      cur.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// FNV-1a 64-bit.
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct ToyEmbedding {
  std::vector<float> values;
  // True when the caption had no usable tokens and the first basis vector
  // was returned instead.
  bool fallback = false;
};

inline ToyEmbedding toy_embed(std::string_view caption, std::size_t dim, std::uint64_t seed) {
  if (dim < 2) throw ConfigError("toy_embed: dim must be >= 2");
  std::vector<double> acc(dim, 0.0);
  for (const auto& tok : tokenize(caption)) {
    const std::uint64_t h = mix64(fnv1a64(tok) ^ mix64(seed));
    const std::size_t bucket = static_cast<std::size_t>(h % dim);
    const double sign = (mix64(h ^ 0x5851f42d4c957f2dULL) >> 63) ? -1.0 : 1.0;
    acc[bucket] += sign;
  }
  double sq = 0.0;
  for (double v : acc) sq += v * v;
  ToyEmbedding out;
  out.values.assign(dim, 0.0f);
  if (sq == 0.0) {
    out.values[0] = 1.0f;
    out.fallback = true;
    return out;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t i = 0; i < dim; ++i) out.values[i] = static_cast<float>(acc[i] * inv);
  return out;
}

struct EmbedSummary {
  std::size_t fallbacks = 0;
};

// Embeds `caption` of every record, one row per record in input order.
inline EmbeddingMatrix embed_captions(std::span<const CaptionRecord> records, std::size_t dim, std::uint64_t seed,
                                      EmbedSummary* summary = nullptr) {
  EmbeddingMatrix m;
  m.dim = dim;
  m.ids.reserve(records.size());
  m.data.reserve(records.size() * dim);
  std::size_t fallbacks = 0;
  for (const auto& r : records) {
    auto e = toy_embed(r.caption, dim, seed);
    fallbacks += e.fallback ? 1 : 0;
    m.ids.push_back(r.id);
    m.data.insert(m.data.end(), e.values.begin(), e.values.end());
  }
  if (summary) summary->fallbacks = fallbacks;
  return m;
}

}  // namespace capsl
