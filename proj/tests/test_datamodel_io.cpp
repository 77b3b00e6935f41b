#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "capsl/io.hpp"
#include "capsl/pair_sampler.hpp"
#include "capsl/synthetic.hpp"
#include "capsl/toy_embed.hpp"
#include "test_util.hpp"

using namespace capsl;
using capsl::testutil::TempDir;

namespace {

EmbeddingMatrix small_matrix(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingMatrix m;
  m.dim = dim;
  for (std::size_t i = 0; i < rows; ++i) {
    m.ids.push_back("r" + std::to_string(i));
    for (std::size_t k = 0; k < dim; ++k) m.data.push_back(static_cast<float>(rng.normal()));
  }
  normalize_rows(m);
  return m;
}

std::uint32_t le32(const std::string& bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(bytes[at + static_cast<std::size_t>(b)]);
  return v;
}

}  // namespace

TEST(Captions, TwoWellFormedLinesParse) {
  TempDir dir;
  io::write_file(dir / "c.jsonl", "{\"id\":\"a\",\"caption\":\"red fox\"}\n{\"id\":\"b\",\"caption\":\"blue jay\",\"class_hint\":\"bird\"}\n");
  const auto recs = io::read_captions(dir / "c.jsonl");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].id, "a");
  EXPECT_EQ(recs[0].caption, "red fox");
  EXPECT_FALSE(recs[0].generated_caption);
  EXPECT_EQ(recs[1].class_hint.value(), "bird");
}

TEST(Captions, MissingIdNamesLineOne) {
  try {
    io::parse_captions("{\"caption\":\"no id here\"}\n");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("id"), std::string::npos);
  }
}

TEST(Captions, MalformedLineReportsItsNumber) {
  try {
    io::parse_captions("{\"id\":\"a\",\"caption\":\"x\"}\n{\"id\":\"b\",\"caption\":\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Captions, DuplicateIdRejected) {
  EXPECT_THROW(io::parse_captions("{\"id\":\"a\",\"caption\":\"x\"}\n{\"id\":\"a\",\"caption\":\"y\"}\n"), ValidationError);
  try {
    io::parse_captions("{\"id\":\"a\",\"caption\":\"x\"}\n{\"id\":\"a\",\"caption\":\"y\"}\n");
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate"), std::string::npos);
  }
}

TEST(Captions, ScoreWithoutCaptionRejected) {
  EXPECT_THROW(io::parse_captions("{\"id\":\"a\",\"caption\":\"x\",\"itm_generated\":0.5}\n"), ParseError);
  EXPECT_THROW(io::parse_captions("{\"id\":\"a\",\"caption\":\"x\",\"itm_original\":1.5}\n"), ParseError);
  EXPECT_THROW(io::parse_captions("{\"id\":\"\",\"caption\":\"x\"}\n"), ParseError);
  EXPECT_THROW(io::parse_captions("[1,2]\n"), ParseError);
}

TEST(Captions, RoundTripIsExact) {
  std::vector<CaptionRecord> recs(3);
  recs[0] = {"a", "caf\xc3\xa9 \"quoted\"", std::nullopt, 0.1, std::nullopt, std::nullopt, std::nullopt};
  recs[1] = {"b", "two", std::string("generated text"), 0.3333333333333333, 0.9999999999999999, std::string("cls1"), std::nullopt};
  recs[2] = {"c", "", std::nullopt, std::nullopt, std::nullopt, std::nullopt, std::string("original")};
  TempDir dir;
  io::write_captions(recs, dir / "c.jsonl");
  EXPECT_EQ(io::read_captions(dir / "c.jsonl"), recs);
  const auto text = io::format_captions(recs);
  EXPECT_EQ(io::format_captions(io::parse_captions(text)), text);
}

TEST(Embeddings, RoundTrip3x4) {
  const auto m = small_matrix(3, 4, 1);
  TempDir dir;
  io::write_embeddings(m, dir / "e.bin", dir / "e.ids");
  const auto back = io::read_embeddings(dir / "e.bin", dir / "e.ids");
  EXPECT_EQ(back, m);
  EXPECT_EQ(std::memcmp(back.data.data(), m.data.data(), m.data.size() * sizeof(float)), 0);
}

TEST(Embeddings, LayoutIsLittleEndianHeaderThenRows) {
  const auto m = small_matrix(3, 4, 2);
  const auto bytes = io::encode_embeddings(m);
  ASSERT_EQ(bytes.size(), 4u + 8u + 3u * 4u * 4u);
  EXPECT_EQ(bytes.substr(0, 4), "EMB1");
  EXPECT_EQ(le32(bytes, 4), 3u);
  EXPECT_EQ(le32(bytes, 8), 4u);
  // Row 1, column 2 sits at float offset 6 of the payload.
  EXPECT_EQ(le32(bytes, 12 + 6 * 4), std::bit_cast<std::uint32_t>(m.data[6]));
}

TEST(Embeddings, WrongMagicIsFormatError) {
  auto bytes = io::encode_embeddings(small_matrix(3, 4, 3));
  bytes[3] = '2';
  EXPECT_THROW(io::decode_embeddings(bytes, {"r0", "r1", "r2"}), FormatError);
}

TEST(Embeddings, TruncatedPayloadIsLengthError) {
  auto bytes = io::encode_embeddings(small_matrix(3, 4, 4));
  bytes.resize(bytes.size() - 5);
  try {
    io::decode_embeddings(bytes, {"r0", "r1", "r2"});
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("length"), std::string::npos);
  }
  auto longer = io::encode_embeddings(small_matrix(3, 4, 4)) + "xx";
  EXPECT_THROW(io::decode_embeddings(longer, {"r0", "r1", "r2"}), FormatError);
}

TEST(Embeddings, CountMustMatchSidecar) {
  const auto bytes = io::encode_embeddings(small_matrix(3, 4, 5));
  EXPECT_THROW(io::decode_embeddings(bytes, {"r0", "r1"}), FormatError);
}

TEST(Embeddings, InvariantsEnforced) {
  auto m = small_matrix(2, 4, 6);
  m.data[0] *= 2.0f;
  EXPECT_THROW(validate(m), ValidationError);
  auto n = small_matrix(2, 4, 6);
  n.data[1] = std::nanf("");
  EXPECT_THROW(validate(n), ValidationError);
  TempDir dir;
  EXPECT_THROW(io::write_embeddings(m, dir / "e.bin", dir / "e.ids"), ValidationError);
}

TEST(Images, RoundTripWithIds) {
  ImageTensorSet s;
  s.ids = {"x", "y"};
  s.shape = {2, 3, 4};
  Rng rng(7);
  for (std::size_t i = 0; i < 2 * 24; ++i) s.data.push_back(static_cast<float>(rng.normal()));
  TempDir dir;
  io::write_images(s, dir / "i.img");
  EXPECT_EQ(io::read_images(dir / "i.img"), s);
  const auto bytes = io::encode_images(s);
  EXPECT_EQ(bytes.substr(0, 4), "IMG1");
  EXPECT_EQ(le32(bytes, 4), 2u);
  EXPECT_EQ(le32(bytes, 8), 2u);
  EXPECT_EQ(le32(bytes, 12), 3u);
  EXPECT_EQ(le32(bytes, 16), 4u);
  EXPECT_EQ(bytes.size(), 20u + 48u * 4u);
}

TEST(Images, WithoutSidecarIdsAreIndices) {
  ImageTensorSet s;
  s.ids = {"0", "1"};
  s.shape = {1, 2, 2};
  s.data = {1, 2, 3, 4, 5, 6, 7, 8};
  EXPECT_EQ(io::decode_images(io::encode_images(s), {}), s);
  auto bad = io::encode_images(s);
  bad.pop_back();
  EXPECT_THROW(io::decode_images(bad, {}), FormatError);
}

TEST(Masks, RoundTripAndBinaryValues) {
  MaskSet m;
  m.ids = {"p", "q"};
  m.height = 2;
  m.width = 3;
  m.data = {0, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 0};
  TempDir dir;
  io::write_masks(m, dir / "m.msk");
  EXPECT_EQ(io::read_masks(dir / "m.msk"), m);
  auto bytes = io::encode_masks(m);
  EXPECT_EQ(bytes.substr(0, 4), "MSK1");
  bytes[12 + 4] = 2;
  EXPECT_THROW(io::decode_masks(bytes, {"p", "q"}), ValidationError);
}

TEST(Manifest, RoundTripBitExact) {
  PairManifest p;
  p.entries = {{"a", "b", 0.1 + 0.2}, {"b", "a", -1.0 / 3.0}, {"c", "a", 1.0}};
  TempDir dir;
  io::write_manifest(p, dir / "m.jsonl");
  EXPECT_EQ(io::read_manifest(dir / "m.jsonl"), p);
}

TEST(Manifest, SelfPairAndMalformedLinesRejected) {
  EXPECT_THROW(io::parse_manifest("{\"query_id\":\"a\",\"neighbor_id\":\"a\",\"similarity\":1}\n"), ParseError);
  EXPECT_THROW(io::parse_manifest("{\"query_id\":\"a\",\"similarity\":1}\n"), ParseError);
}

TEST(Labels, RoundTripAndAlignment) {
  io::LabelTable t{{"a", "b", "c"}, {2, 0, 1}};
  TempDir dir;
  io::write_labels(t, dir / "l.tsv");
  const auto back = io::read_labels(dir / "l.tsv");
  EXPECT_EQ(back.ids, t.ids);
  EXPECT_EQ(back.labels, t.labels);
  const std::vector<std::string> order{"c", "a"};
  EXPECT_EQ(io::align_labels(back, order), (std::vector<int>{1, 2}));
  const std::vector<std::string> missing{"z"};
  EXPECT_THROW(io::align_labels(back, missing), ValidationError);
  EXPECT_THROW(io::parse_labels("a\tx\n"), ParseError);
  EXPECT_THROW(io::parse_labels("a\t1\na\t2\n"), ValidationError);
}

TEST(ToyEmbed, DeterministicAndUnitNorm) {
  const auto a = toy_embed("a small red fox jumps", 64, 3);
  const auto b = toy_embed("a small red fox jumps", 64, 3);
  EXPECT_EQ(a.values, b.values);
  EXPECT_FALSE(a.fallback);
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    std::string cap;
    const auto words = 1 + rng.below(12);
    for (std::size_t w = 0; w < words; ++w) cap += "w" + std::to_string(rng.below(50)) + (rng.bernoulli(0.5) ? ", " : " ");
    const auto e = toy_embed(cap, 2 + rng.below(300), rng.next());
    double s = 0.0;
    for (float v : e.values) s += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(ToyEmbed, BagOfWordsOrderInvariant) {
  EXPECT_EQ(toy_embed("red fox", 32, 0).values, toy_embed("fox red", 32, 0).values);
  EXPECT_EQ(toy_embed("Red, FOX!", 32, 0).values, toy_embed("fox red", 32, 0).values);
}

TEST(ToyEmbed, EmptyCaptionFallsBackToFirstBasisVector) {
  for (const char* cap : {"", "   ", "?!,."}) {
    const auto e = toy_embed(cap, 8, 5);
    EXPECT_TRUE(e.fallback);
    EXPECT_EQ(e.values[0], 1.0f);
    for (std::size_t k = 1; k < 8; ++k) EXPECT_EQ(e.values[k], 0.0f);
  }
  EXPECT_THROW(toy_embed("x", 1, 0), ConfigError);
}

TEST(ToyEmbed, FixedHashConstants) {
  // Published FNV-1a test vectors pin the hashing constants.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
  // splitmix64 output for state 0 (first value of the reference generator).
  EXPECT_EQ(mix64(0), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(tokenize("Hello, World-2x caf\xc3\xa9"), (std::vector<std::string>{"hello", "world", "2x", "caf\xc3\xa9"}));
}

TEST(ToyEmbed, SeedChangesHashing) {
  EXPECT_NE(toy_embed("alpha beta gamma delta", 64, 1).values, toy_embed("alpha beta gamma delta", 64, 2).values);
}

TEST(Synthetic, ZeroNoiseTemplatesIdenticalWithinClass) {
  SyntheticConfig cfg;
  cfg.num_classes = 2;
  cfg.per_class = 2;
  cfg.noise_level = 0.0;
  const auto ds = gen_synthetic(cfg);
  ASSERT_EQ(ds.images.count(), 4u);
  ASSERT_EQ(ds.labels.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) {
      const auto a = ds.images.image(i), b = ds.images.image(j);
      const bool same = std::equal(a.begin(), a.end(), b.begin());
      EXPECT_EQ(same, ds.labels[i] == ds.labels[j]) << i << " vs " << j;
    }
}

TEST(Synthetic, CaptionNeighborsShareClassAtDefaults) {
  SyntheticConfig cfg;
  cfg.num_classes = 5;
  cfg.per_class = 100;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    cfg.seed = seed;
    const auto ds = gen_synthetic(cfg);
    // Independent oracle: plain double-precision scan over the embeddings,
    // labels taken from class_hint rather than the label vector.
    const auto m = embed_captions(ds.captions, 128, 0);
    std::size_t same = 0;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double best = -2.0;
      std::size_t arg = 0;
      for (std::size_t j = 0; j < m.rows(); ++j) {
        if (j == i) continue;
        double s = 0.0;
        for (std::size_t k = 0; k < m.dim; ++k) s += static_cast<double>(m.row(i)[k]) * m.row(j)[k];
        if (s > best) {
          best = s;
          arg = j;
        }
      }
      same += ds.captions[i].class_hint == ds.captions[arg].class_hint ? 1 : 0;
    }
    const double rate = static_cast<double>(same) / static_cast<double>(m.rows());
    EXPECT_GE(rate, 0.95) << "seed " << seed;
    EXPECT_GE(caption_pair_rate(ds.captions, ds.labels), 0.95);
  }
}

TEST(Synthetic, MasksBinaryAndMatchTemplates) {
  SyntheticConfig cfg;
  cfg.per_class = 10;
  const auto ds = gen_synthetic(cfg);
  std::size_t ones = 0;
  for (auto v : ds.masks.data) {
    ASSERT_LE(v, 1);
    ones += v;
  }
  EXPECT_GT(ones, 0u);
  EXPECT_LT(ones, ds.masks.data.size());
  EXPECT_EQ(ds.masks.ids, ds.images.ids);
  for (std::size_t i = 0; i < ds.images.count(); ++i) {
    const auto a = ds.masks.mask(i), b = ds.masks.mask(static_cast<std::size_t>(ds.labels[i]));
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(Synthetic, SameSeedSameDataset) {
  SyntheticConfig cfg;
  cfg.per_class = 20;
  cfg.seed = 9;
  const auto a = gen_synthetic(cfg), b = gen_synthetic(cfg);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.captions, b.captions);
  EXPECT_EQ(a.masks, b.masks);
  EXPECT_EQ(a.labels, b.labels);
  cfg.seed = 10;
  EXPECT_NE(gen_synthetic(cfg).images, a.images);
}

TEST(Synthetic, ConfigErrors) {
  SyntheticConfig cfg;
  cfg.shape = {3, 6, 16};
  EXPECT_THROW(gen_synthetic(cfg), ConfigError);
  cfg = {};
  cfg.num_classes = 1;
  EXPECT_THROW(gen_synthetic(cfg), ConfigError);
  cfg = {};
  cfg.per_class = 1;
  EXPECT_THROW(gen_synthetic(cfg), ConfigError);
}

TEST(Synthetic, CorruptionSwapsClassText) {
  SyntheticConfig cfg;
  cfg.per_class = 40;
  const auto ds = gen_synthetic(cfg);
  CorruptionConfig cc;
  const auto bad = corrupt_captions(ds.captions, ds.labels, ds.vocabulary, cc);
  std::size_t corrupted = 0;
  for (std::size_t i = 0; i < bad.size(); ++i) {
    ASSERT_TRUE(bad[i].generated_caption && bad[i].itm_original && bad[i].itm_generated);
    if (*bad[i].itm_original < *bad[i].itm_generated) {
      ++corrupted;
      EXPECT_EQ(*bad[i].generated_caption, ds.captions[i].caption);
      EXPECT_NE(bad[i].caption, ds.captions[i].caption);
    } else {
      EXPECT_EQ(bad[i].caption, ds.captions[i].caption);
    }
  }
  EXPECT_EQ(corrupted, bad.size() / 2);
  EXPECT_LT(caption_pair_rate(bad, ds.labels), 0.75);
}
