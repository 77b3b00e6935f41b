#pragma once

// Self-contained image/caption dataset used in place of web-scale data.
//
// Each class owns a spatial template: a blob of pixels at a fixed location
// painted with a class color. Every image is its class template plus a
// per-image nuisance pattern (a smooth colored background field and pixel
// noise) scaled by the noise level. Captions combine class-specific words
// with distractor words shared by all classes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "capsl/datamodel.hpp"
#include "capsl/error.hpp"
#include "capsl/pair_sampler.hpp"
#include "capsl/rng.hpp"
#include "capsl/toy_embed.hpp"

namespace capsl {

struct SyntheticConfig {
  std::size_t num_classes = 5;
  std::size_t per_class = 100;
  ImageShape shape{3, 16, 16};
  // Scale of all per-image variation.
  double noise_level = 0.7;
  // Distractor tokens appended to each caption.
  std::size_t distractor_tokens = 3;
  std::size_t class_words = 4;
  std::size_t class_words_per_caption = 3;
  std::size_t distractor_pool = 40;
  // Relative strengths of the nuisance components (multiplied by noise_level).
  double background_offset = 0.3;
  double background_wave = 0.8;
  double pixel_noise = 0.1;
  std::uint64_t seed = 0;
};

class CaptionVocabulary {
 public:
  CaptionVocabulary() = default;
  CaptionVocabulary(std::vector<std::vector<std::string>> class_words, std::vector<std::string> distractors,
                    std::size_t words_per_caption, std::size_t distractor_tokens)
      : class_words_(std::move(class_words)),
        distractors_(std::move(distractors)),
        words_per_caption_(words_per_caption),
        distractor_tokens_(distractor_tokens) {}

  std::size_t num_classes() const { return class_words_.size(); }
  const std::vector<std::string>& class_words(std::size_t k) const { return class_words_.at(k); }

  // A class phrase (a random subset of the class words) mixed with distractors.
  std::string caption(std::size_t cls, Rng& rng) const {
    std::vector<std::string> words = class_words_.at(cls);
    rng.shuffle(words.begin(), words.end());
    words.resize(std::min(words_per_caption_, words.size()));
    for (std::size_t i = 0; i < distractor_tokens_; ++i) words.push_back(distractors_[rng.below(distractors_.size())]);
    rng.shuffle(words.begin(), words.end());
    std::string out;
    for (const auto& w : words) {
      if (!out.empty()) out += ' ';
      out += w;
    }
    return out;
  }

 private:
  std::vector<std::vector<std::string>> class_words_;
  std::vector<std::string> distractors_;
  std::size_t words_per_caption_ = 0;
  std::size_t distractor_tokens_ = 0;
};

struct SyntheticDataset {
  ImageTensorSet images;
  std::vector<CaptionRecord> captions;
  MaskSet masks;
  std::vector<int> labels;
  CaptionVocabulary vocabulary;
};

namespace detail {

inline std::string pseudo_word(Rng& rng) {
  static constexpr std::array<const char*, 14> onsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
  static constexpr std::array<const char*, 5> vowels = {"a", "e", "i", "o", "u"};
  std::string w;
  const std::size_t syllables = 2 + rng.below(2);
  for (std::size_t i = 0; i < syllables; ++i) {
    w += onsets[rng.below(onsets.size())];
    w += vowels[rng.below(vowels.size())];
  }
  return w;
}

inline CaptionVocabulary make_vocabulary(const SyntheticConfig& cfg, Rng& rng) {
  std::unordered_set<std::string> used;
  auto fresh = [&] {
    for (;;) {
      std::string w = pseudo_word(rng);
      if (used.insert(w).second) return w;
    }
  };
  std::vector<std::vector<std::string>> classes(cfg.num_classes);
  for (auto& c : classes)
    for (std::size_t i = 0; i < cfg.class_words; ++i) c.push_back(fresh());
  std::vector<std::string> distractors;
  for (std::size_t i = 0; i < cfg.distractor_pool; ++i) distractors.push_back(fresh());
  return {std::move(classes), std::move(distractors), cfg.class_words_per_caption, cfg.distractor_tokens};
}

struct ClassTemplate {
  std::vector<std::uint8_t> mask;  // H x W
  std::vector<float> color;        // C
};

inline std::vector<ClassTemplate> make_templates(const SyntheticConfig& cfg, Rng& rng) {
  const std::size_t h = cfg.shape.height, w = cfg.shape.width, c = cfg.shape.channels;
  const std::size_t box = std::max<std::size_t>(4, std::min(h, w) / 2);
  std::vector<ClassTemplate> out;
  std::unordered_set<std::string> seen;
  std::size_t attempts = 0;
  while (out.size() < cfg.num_classes) {
    if (++attempts > 1000 * cfg.num_classes) throw ConfigError("cannot place distinct class templates in this image shape");
    ClassTemplate t;
    t.mask.assign(h * w, 0);
    const std::size_t top = rng.below(h - box + 1);
    const std::size_t left = rng.below(w - box + 1);
    for (int rect = 0; rect < 3; ++rect) {
      const std::size_t rh = 2 + rng.below(box - 1);
      const std::size_t rw = 2 + rng.below(box - 1);
      const std::size_t ry = top + rng.below(box - rh + 1);
      const std::size_t rx = left + rng.below(box - rw + 1);
      for (std::size_t y = ry; y < ry + rh; ++y)
        for (std::size_t x = rx; x < rx + rw; ++x) t.mask[y * w + x] = 1;
    }
    std::string key(t.mask.begin(), t.mask.end());
    if (!seen.insert(key).second) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double mag = rng.uniform(0.5, 1.0);
      t.color.push_back(static_cast<float>(rng.bernoulli(0.5) ? mag : -mag));
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

inline SyntheticDataset gen_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_classes < 2) throw ConfigError("gen_synthetic: need at least 2 classes");
  if (cfg.per_class < 2) throw ConfigError("gen_synthetic: need at least 2 images per class");
  if (cfg.shape.channels < 1) throw ConfigError("gen_synthetic: need at least 1 channel");
  if (cfg.shape.height < 8 || cfg.shape.width < 8) throw ConfigError("gen_synthetic: image shape too small for class templates (min 8x8)");
  if (cfg.class_words < 1 || cfg.class_words_per_caption < 1) throw ConfigError("gen_synthetic: captions need class words");
  if (cfg.distractor_tokens > 0 && cfg.distractor_pool == 0) throw ConfigError("gen_synthetic: distractor pool is empty");
  if (!(cfg.noise_level >= 0.0)) throw ConfigError("gen_synthetic: noise level must be non-negative");

  Rng setup(derive_seed(cfg.seed, {1}));
  SyntheticDataset ds;
  ds.vocabulary = detail::make_vocabulary(cfg, setup);
  const auto templates = detail::make_templates(cfg, setup);

  const std::size_t n = cfg.num_classes * cfg.per_class;
  const std::size_t c = cfg.shape.channels, h = cfg.shape.height, w = cfg.shape.width;
  ds.images.shape = cfg.shape;
  ds.images.data.assign(n * cfg.shape.size(), 0.0f);
  ds.masks.height = h;
  ds.masks.width = w;
  ds.masks.data.assign(n * h * w, 0);

  const int digits = static_cast<int>(std::to_string(n - 1).size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % cfg.num_classes;
    std::string id = std::to_string(i);
    id = "img" + std::string(static_cast<std::size_t>(std::max(0, digits - static_cast<int>(id.size()))), '0') + id;
    ds.images.ids.push_back(id);
    ds.masks.ids.push_back(id);
    ds.labels.push_back(static_cast<int>(cls));

    Rng rng(derive_seed(cfg.seed, {2, i}));
    const auto& t = templates[cls];
    auto img = ds.images.image(i);
    const double sigma = cfg.noise_level;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double offset = sigma * cfg.background_offset * rng.normal();
      const double amp = sigma * cfg.background_wave * rng.normal();
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double freq = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / static_cast<double>(w);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double v = offset + amp * std::sin(freq * (std::cos(theta) * x + std::sin(theta) * y) + phase);
          if (t.mask[y * w + x]) v += t.color[ch];
          if (sigma > 0.0) v += sigma * cfg.pixel_noise * rng.normal();
          img[(ch * h + y) * w + x] = static_cast<float>(v);
        }
      }
    }
    std::copy(t.mask.begin(), t.mask.end(), ds.masks.data.begin() + static_cast<std::ptrdiff_t>(i * h * w));

    CaptionRecord r;
    r.id = id;
    r.caption = ds.vocabulary.caption(cls, rng);
    r.class_hint = "class" + std::to_string(cls);
    ds.captions.push_back(std::move(r));
  }
  return ds;
}

// Fraction of records whose caption nearest neighbor (toy embedding, exact
// search) has the same label. The generator's defaults keep this >= 0.95.
inline double caption_pair_rate(std::span<const CaptionRecord> captions, std::span<const int> labels,
                                std::size_t dim = 128, std::uint64_t seed = 0) {
  if (captions.size() != labels.size()) throw ValidationError("captions and labels differ in length");
  const auto m = embed_captions(captions, dim, seed);
  const auto nn = nearest_neighbors(m);
  std::size_t same = 0;
  for (std::size_t i = 0; i < nn.size(); ++i) same += labels[i] == labels[nn[i].index] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(nn.size());
}

struct CorruptionConfig {
  double fraction = 0.5;
  // Hand-assigned image-text matching scores. Corrupted records get a low
  // score on their (wrong) original caption and a high score on the clean
  // replacement; untouched records keep the original as the better caption.
  double corrupted_original_itm = 0.21;
  double corrupted_generated_itm = 0.83;
  double clean_original_itm = 0.74;
  double clean_generated_itm = 0.62;
  std::uint64_t seed = 0;
};

// Replaces the caption of a `fraction` of records with text from another
// class, attaching a clean generated caption and ITM scores to every record.
inline std::vector<CaptionRecord> corrupt_captions(std::span<const CaptionRecord> records, std::span<const int> labels,
                                                   const CaptionVocabulary& vocab, const CorruptionConfig& cfg) {
  if (records.size() != labels.size()) throw ValidationError("records and labels differ in length");
  if (vocab.num_classes() < 2) throw ConfigError("corruption needs at least two classes");
  Rng rng(derive_seed(cfg.seed, {3}));
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const auto corrupt_count = static_cast<std::size_t>(std::llround(cfg.fraction * static_cast<double>(records.size())));
  std::vector<char> corrupt(records.size(), 0);
  for (std::size_t i = 0; i < corrupt_count && i < order.size(); ++i) corrupt[order[i]] = 1;

  std::vector<CaptionRecord> out(records.begin(), records.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng r(derive_seed(cfg.seed, {4, i}));
    const auto cls = static_cast<std::size_t>(labels[i]);
    auto& rec = out[i];
    if (corrupt[i]) {
      std::size_t other = r.below(vocab.num_classes() - 1);
      if (other >= cls) ++other;
      rec.generated_caption = rec.caption;
      rec.caption = vocab.caption(other, r);
      rec.itm_original = cfg.corrupted_original_itm;
      rec.itm_generated = cfg.corrupted_generated_itm;
    } else {
      rec.generated_caption = vocab.caption(cls, r);
      rec.itm_original = cfg.clean_original_itm;
      rec.itm_generated = cfg.clean_generated_itm;
    }
  }
  return out;
}

}  // namespace capsl
