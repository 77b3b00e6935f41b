#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "capsl/error.hpp"

namespace capsl {

struct CaptionRecord {
  std::string id;
  std::string caption;
  std::optional<std::string> generated_caption;
  std::optional<double> itm_original;
  std::optional<double> itm_generated;
  // Synthetic ground truth. Training code never reads it.
  std::optional<std::string> class_hint;
  // Set by caption filtering: "original" or "generated".
  std::optional<std::string> source;

  bool operator==(const CaptionRecord&) const = default;
};

inline void validate_record(const CaptionRecord& r) {
  if (r.id.empty()) throw ValidationError("record has empty id");
  auto check_score = [&](const std::optional<double>& s, const char* name) {
    if (s && !(*s >= 0.0 && *s <= 1.0))
      throw ValidationError("record '" + r.id + "': " + name + " outside [0,1]");
  };
  check_score(r.itm_original, "itm_original");
  check_score(r.itm_generated, "itm_generated");
  if (r.itm_generated && !r.generated_caption)
    throw ValidationError("record '" + r.id + "': itm_generated without generated_caption");
  if (r.source && *r.source != "original" && *r.source != "generated")
    throw ValidationError("record '" + r.id + "': unknown source '" + *r.source + "'");
}

inline void validate_records(std::span<const CaptionRecord> records) {
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    validate_record(r);
    if (!seen.insert(r.id).second) throw ValidationError("duplicate id '" + r.id + "'");
  }
}

// Row-major f32 matrix of unit-norm rows aligned with `ids`.
struct EmbeddingMatrix {
  std::vector<std::string> ids;
  std::size_t dim = 0;
  std::vector<float> data;

  std::size_t rows() const { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * dim, dim}; }

  bool operator==(const EmbeddingMatrix&) const = default;
};

inline constexpr double kUnitNormTolerance = 1e-6;

inline void validate(const EmbeddingMatrix& m) {
  if (m.dim == 0) throw ValidationError("embedding dim must be positive");
  if (m.data.size() != m.ids.size() * m.dim)
    throw ValidationError("embedding payload does not match ids x dim");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (float v : m.row(i)) {
      if (!std::isfinite(v)) throw ValidationError("non-finite entry in embedding row " + std::to_string(i));
      sq += static_cast<double>(v) * v;
    }
    if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance)
      throw ValidationError("embedding row " + std::to_string(i) + " is not unit norm");
  }
}

// Normalizes every row in place (zero rows are left as-is).
inline void normalize_rows(EmbeddingMatrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double sq = 0.0;
    for (float v : r) sq += static_cast<double>(v) * v;
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (float& v : r) v = static_cast<float>(v * inv);
  }
}

struct PairEntry {
  std::string query_id;
  std::string neighbor_id;
  double similarity = 0.0;

  bool operator==(const PairEntry&) const = default;
};

struct PairManifest {
  std::vector<PairEntry> entries;
  bool operator==(const PairManifest&) const = default;
};

struct ImageShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct ImageTensorSet {
  std::vector<std::string> ids;
  ImageShape shape;
  std::vector<float> data;

  std::size_t count() const { return ids.size(); }
  std::span<const float> image(std::size_t i) const { return {data.data() + i * shape.size(), shape.size()}; }
  std::span<float> image(std::size_t i) { return {data.data() + i * shape.size(), shape.size()}; }

  bool operator==(const ImageTensorSet&) const = default;
};

inline void validate(const ImageTensorSet& s) {
  if (s.data.size() != s.count() * s.shape.size()) throw ValidationError("image payload does not match count x shape");
  for (float v : s.data)
    if (!std::isfinite(v)) throw ValidationError("non-finite pixel in image set");
}

struct MaskSet {
  std::vector<std::string> ids;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  std::size_t count() const { return ids.size(); }
  std::span<const std::uint8_t> mask(std::size_t i) const { return {data.data() + i * height * width, height * width}; }

  bool operator==(const MaskSet&) const = default;
};

inline void validate(const MaskSet& s) {
  if (s.data.size() != s.count() * s.height * s.width) throw ValidationError("mask payload does not match count x shape");
  for (auto v : s.data)
    if (v > 1) throw ValidationError("mask values must be 0 or 1");
}

// Maps id -> row position; throws on duplicates.
inline std::unordered_map<std::string, std::size_t> index_ids(std::span<const std::string> ids) {
  std::unordered_map<std::string, std::size_t> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!out.emplace(ids[i], i).second) throw ValidationError("duplicate id '" + ids[i] + "'");
  return out;
}

}  // namespace capsl
