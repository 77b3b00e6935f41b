#pragma once

// Caption selection by image-text matching score: keep the generated caption
// only when it scores strictly higher than the original.

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"

namespace capsl {

struct FilterPolicy {
  // Off by default; when set, records whose retained score is below it (or
  // who have no score at all) are dropped.
  std::optional<double> min_score;
};

struct FilterReport {
  std::size_t total = 0;
  std::size_t kept_original = 0;
  std::size_t kept_generated = 0;
  std::size_t dropped = 0;
  bool thresholded = false;
  std::optional<double> min_score;
};

struct ScoredCaption {
  std::string caption;
  double score = 0.0;
  bool operator==(const ScoredCaption&) const = default;
};

// Highest score wins; the earliest candidate wins ties.
inline ScoredCaption best_of_k(std::span<const ScoredCaption> candidates) {
  if (candidates.empty()) throw ValidationError("best_of_k: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i)
    if (candidates[i].score > candidates[best].score) best = i;
  return candidates[best];
}

inline std::pair<std::vector<CaptionRecord>, FilterReport> filter_captions(std::span<const CaptionRecord> records,
                                                                            const FilterPolicy& policy = {}) {
  FilterReport report;
  report.total = records.size();
  report.thresholded = policy.min_score.has_value();
  report.min_score = policy.min_score;
  std::vector<CaptionRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    validate_record(r);
    CaptionRecord kept;
    kept.id = r.id;
    kept.class_hint = r.class_hint;
    std::optional<double> score;
    bool generated = false;
    if (r.generated_caption) {
      if (!r.itm_generated) throw ValidationError("record '" + r.id + "': generated caption has no itm_generated score");
      if (!r.itm_original) throw ValidationError("record '" + r.id + "': generated caption present but itm_original missing");
      generated = *r.itm_generated > *r.itm_original;
    }
    if (generated) {
      kept.caption = *r.generated_caption;
      score = r.itm_generated;
      kept.source = "generated";
    } else {
      kept.caption = r.caption;
      score = r.itm_original;
      // A record that went through filtering before keeps its provenance.
      kept.source = r.generated_caption ? std::string("original") : r.source.value_or("original");
    }
    kept.itm_original = score;
    if (policy.min_score && (!score || *score < *policy.min_score)) {
      ++report.dropped;
      continue;
    }
    ++(*kept.source == "generated" ? report.kept_generated : report.kept_original);
    out.push_back(std::move(kept));
  }
  return {std::move(out), report};
}

}  // namespace capsl
