#include <gtest/gtest.h>

#include <algorithm>

#include "capsl/caption_filter.hpp"
#include "capsl/io.hpp"
#include "capsl/rng.hpp"

using namespace capsl;

namespace {

CaptionRecord rec(std::string id, std::optional<double> orig, std::optional<double> gen) {
  CaptionRecord r;
  r.id = std::move(id);
  r.caption = "orig " + r.id;
  r.itm_original = orig;
  if (gen) {
    r.generated_caption = "gen " + r.id;
    r.itm_generated = gen;
  }
  return r;
}

std::vector<CaptionRecord> fixture() { return io::read_captions(std::string(CAPSL_FIXTURE_DIR) + "/itm_fixture.jsonl"); }

}  // namespace

TEST(FilterCaptions, HigherGeneratedScoreWins) {
  const std::vector<CaptionRecord> in{rec("a", 0.3, 0.7)};
  const auto [out, report] = filter_captions(in);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].caption, "gen a");
  EXPECT_EQ(out[0].source.value(), "generated");
  EXPECT_EQ(out[0].itm_original.value(), 0.7);
  EXPECT_EQ(report.kept_generated, 1u);
}

TEST(FilterCaptions, TieKeepsOriginal) {
  const std::vector<CaptionRecord> in{rec("a", 0.5, 0.5)};
  const auto [out, report] = filter_captions(in);
  EXPECT_EQ(out[0].caption, "orig a");
  EXPECT_EQ(out[0].source.value(), "original");
  EXPECT_EQ(report.kept_original, 1u);
}

TEST(FilterCaptions, MissingGeneratedKeepsOriginal) {
  const std::vector<CaptionRecord> in{rec("a", 0.2, std::nullopt), rec("b", std::nullopt, std::nullopt)};
  const auto [out, report] = filter_captions(in);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].caption, "orig a");
  EXPECT_EQ(out[1].caption, "orig b");
  EXPECT_EQ(report.dropped, 0u);
}

TEST(FilterCaptions, GeneratedWithoutScoreIsError) {
  auto r = rec("a", 0.4, std::nullopt);
  r.generated_caption = "unscored";
  const std::vector<CaptionRecord> in{r};
  EXPECT_THROW(filter_captions(in), ValidationError);
}

TEST(FilterCaptions, MinScoreDropsThreeOfTen) {
  std::vector<CaptionRecord> in;
  // Retained scores: max of the pair; three of them fall below 0.4.
  const double orig[10] = {0.1, 0.3, 0.5, 0.2, 0.9, 0.35, 0.6, 0.05, 0.45, 0.7};
  const double gen[10] = {0.2, 0.6, 0.1, 0.39, 0.3, 0.1, 0.8, 0.42, 0.2, 0.7};
  std::size_t expected_drop = 0;
  for (int i = 0; i < 10; ++i) {
    in.push_back(rec("r" + std::to_string(i), orig[i], gen[i]));
    expected_drop += std::max(orig[i], gen[i]) < 0.4 ? 1 : 0;
  }
  ASSERT_EQ(expected_drop, 3u);
  const auto [out, report] = filter_captions(in, FilterPolicy{0.4});
  EXPECT_EQ(out.size(), 7u);
  EXPECT_EQ(report.dropped, 3u);
  EXPECT_TRUE(report.thresholded);
  EXPECT_EQ(report.kept_original + report.kept_generated, 7u);
}

TEST(FilterCaptions, FixtureFile) {
  const auto in = fixture();
  ASSERT_EQ(in.size(), 10u);
  const auto [out, report] = filter_captions(in);
  ASSERT_EQ(out.size(), 10u);
  EXPECT_EQ(report.kept_generated, 6u);
  EXPECT_EQ(report.kept_original, 4u);
  EXPECT_EQ(out[0].caption, "a brown dog running on a lawn");
  EXPECT_EQ(out[2].caption, "sunset at the pier");
  EXPECT_EQ(out[4].caption, "two cats sleeping");
  EXPECT_EQ(out[5].caption, "first snow this year");
}

TEST(FilterCaptions, RetainedScoreIsMaxAndSizeBounded) {
  Rng rng(3);
  std::vector<CaptionRecord> in;
  for (int i = 0; i < 200; ++i) {
    const bool has_gen = rng.bernoulli(0.7);
    in.push_back(rec("r" + std::to_string(i), rng.uniform(), has_gen ? std::optional<double>(rng.uniform()) : std::nullopt));
  }
  const auto [out, report] = filter_captions(in);
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double expect = std::max(*in[i].itm_original, in[i].itm_generated.value_or(0.0));
    EXPECT_EQ(out[i].itm_original.value(), expect);
    EXPECT_EQ(out[i].id, in[i].id);
  }
  const auto [thr, rep2] = filter_captions(in, FilterPolicy{0.5});
  EXPECT_LE(thr.size(), in.size());
  EXPECT_EQ(thr.size() + rep2.dropped, in.size());
}

TEST(FilterCaptions, Idempotent) {
  const auto in = fixture();
  const auto [once, r1] = filter_captions(in);
  const auto [twice, r2] = filter_captions(once);
  EXPECT_EQ(once, twice);
  EXPECT_EQ(r1.kept_generated, r2.kept_generated);
  const auto [t1, q1] = filter_captions(in, FilterPolicy{0.6});
  const auto [t2, q2] = filter_captions(t1, FilterPolicy{0.6});
  EXPECT_EQ(t1, t2);
  EXPECT_EQ(q2.dropped, 0u);
}

TEST(BestOfK, Argmax) {
  const std::vector<ScoredCaption> c{{"a", 0.2}, {"b", 0.9}, {"c", 0.4}};
  EXPECT_EQ(best_of_k(c), (ScoredCaption{"b", 0.9}));
}

TEST(BestOfK, TieKeepsEarliest) {
  const std::vector<ScoredCaption> c{{"a", 0.5}, {"b", 0.5}};
  EXPECT_EQ(best_of_k(c), (ScoredCaption{"a", 0.5}));
}

TEST(BestOfK, EmptyIsError) { EXPECT_THROW(best_of_k({}), ValidationError); }

TEST(BestOfK, MatchesLinearScan) {
  Rng rng(8);
  std::vector<ScoredCaption> c;
  for (int i = 0; i < 100; ++i) c.push_back({"c" + std::to_string(i), std::round(rng.uniform() * 20.0) / 20.0});
  std::size_t arg = 0;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c[i].score > c[arg].score) arg = i;
  EXPECT_EQ(best_of_k(c), c[arg]);
}
