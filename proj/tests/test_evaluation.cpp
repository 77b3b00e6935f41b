#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "capsl/evaluation.hpp"
#include "capsl/pipeline.hpp"
#include "capsl/report.hpp"
#include "test_util.hpp"

using namespace capsl;

namespace {

using M = Tensor<double>;

// Gaussian blobs around well-separated random centers.
void blobs(std::size_t classes, std::size_t per, std::size_t d, double spread, std::uint64_t seed, M& x, std::vector<int>& y) {
  Rng rng(seed);
  const auto centers = testutil::random_matrix<double>(classes, d, rng, 2.0);
  x = matrix<double>(classes * per, d);
  y.clear();
  for (std::size_t i = 0; i < classes * per; ++i) {
    const std::size_t c = i % classes;
    for (std::size_t k = 0; k < d; ++k) x(i, k) = centers(c, k) + spread * rng.normal();
    y.push_back(static_cast<int>(c));
  }
}

// Plain fixed-step gradient descent on mean softmax cross-entropy with
// (l2/2)|W|^2, written without reference to the library solver.
struct OracleProbe {
  std::vector<std::vector<double>> w;
  std::vector<double> b;
  std::size_t predict(std::span<const double> x) const {
    std::size_t best = 0;
    double best_s = -1e300;
    for (std::size_t c = 0; c < b.size(); ++c) {
      double s = b[c];
      for (std::size_t k = 0; k < x.size(); ++k) s += w[c][k] * x[k];
      if (s > best_s) best_s = s, best = c;
    }
    return best;
  }
};

OracleProbe oracle_probe(const M& x, const std::vector<int>& y, std::size_t classes, double l2, std::size_t iters, double lr) {
  const std::size_t n = x.rows(), d = x.cols();
  OracleProbe p{std::vector<std::vector<double>>(classes, std::vector<double>(d, 0.0)), std::vector<double>(classes, 0.0)};
  for (std::size_t it = 0; it < iters; ++it) {
    auto gw = std::vector<std::vector<double>>(classes, std::vector<double>(d, 0.0));
    std::vector<double> gb(classes, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(classes);
      for (std::size_t c = 0; c < classes; ++c) {
        z[c] = p.b[c];
        for (std::size_t k = 0; k < d; ++k) z[c] += p.w[c][k] * x(i, k);
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (auto& v : z) sum += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = z[c] / sum - (static_cast<int>(c) == y[i] ? 1.0 : 0.0);
        gb[c] += g / static_cast<double>(n);
        for (std::size_t k = 0; k < d; ++k) gw[c][k] += g * x(i, k) / static_cast<double>(n);
      }
    }
    for (std::size_t c = 0; c < classes; ++c) {
      p.b[c] -= lr * gb[c];
      for (std::size_t k = 0; k < d; ++k) p.w[c][k] -= lr * (gw[c][k] + l2 * p.w[c][k]);
    }
  }
  return p;
}

std::vector<std::uint8_t> bits(std::initializer_list<int> v) {
  std::vector<std::uint8_t> out;
  for (int b : v) out.push_back(static_cast<std::uint8_t>(b));
  return out;
}

// Fraction of (positive, negative) pairs ordered correctly, ties counting 1/2.
double pairwise_auc(std::span<const double> s, std::span<const std::uint8_t> y) {
  double good = 0.0, total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        total += 1.0;
        good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return good / total;
}

}  // namespace

TEST(LinearProbe, SeparableClassesReachFullAccuracy) {
  M x = matrix<double>(40, 2);
  std::vector<int> y;
  Rng rng(1);
  for (std::size_t i = 0; i < 40; ++i) {
    const int c = static_cast<int>(i % 2);
    x(i, 0) = (c == 0 ? -3.0 : 3.0) + 0.5 * rng.normal();
    x(i, 1) = rng.normal();
    y.push_back(c);
  }
  const auto p = linear_probe(x, y, ProbeConfig{1e-6, 500, 1e-4});
  EXPECT_EQ(p.accuracy(x, y), 1.0);
}

TEST(LinearProbe, ConvexUniqueOptimum) {
  M x;
  std::vector<int> y;
  blobs(3, 30, 5, 1.5, 2, x, y);
  const ProbeConfig cfg{1e-3, 20000, 1e-6};
  const auto a = linear_probe(x, y, cfg);
  Rng rng(3);
  std::vector<double> init(3 * 5 + 3);
  for (auto& v : init) v = rng.normal();
  const auto b = linear_probe(x, y, cfg, init);
  EXPECT_TRUE(a.converged);
  EXPECT_TRUE(b.converged);
  EXPECT_NEAR(a.loss, b.loss, 1e-6);
}

TEST(LinearProbe, LossNonIncreasing) {
  M x;
  std::vector<int> y;
  blobs(4, 25, 6, 2.0, 4, x, y);
  const auto p = linear_probe(x, y, ProbeConfig{1e-3, 300, 1e-8});
  ASSERT_GT(p.loss_history.size(), 2u);
  for (std::size_t i = 1; i < p.loss_history.size(); ++i) EXPECT_LE(p.loss_history[i], p.loss_history[i - 1]);
}

TEST(LinearProbe, MatchesIndependentGradientDescent) {
  M x, xt;
  std::vector<int> y, yt;
  blobs(3, 100, 4, 2.0, 5, x, y);
  blobs(3, 100, 4, 2.0, 5, xt, yt);
  // Different noise draw for the evaluation set, same centers.
  Rng rng(6);
  for (auto& v : xt.data) v += 0.3 * rng.normal();
  const auto p = linear_probe(x, y, ProbeConfig{1e-3, 2000, 1e-6});
  const auto o = oracle_probe(x, y, 3, 1e-3, 4000, 0.1);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < xt.rows(); ++i) hit += o.predict(xt.row(i)) == static_cast<std::size_t>(yt[i]) ? 1 : 0;
  const double oracle_acc = static_cast<double>(hit) / static_cast<double>(xt.rows());
  EXPECT_NEAR(p.accuracy(xt, yt), oracle_acc, 0.005);
}

TEST(LinearProbe, ObjectiveGradientMatchesFiniteDifferences) {
  M x;
  std::vector<int> y;
  blobs(3, 10, 4, 1.0, 7, x, y);
  Rng rng(8);
  std::vector<double> params = testutil::random_vector(3 * 4 + 3, rng);
  std::vector<double> grad;
  detail::probe_objective(x, y, 3, 0.1, params, &grad);
  const auto num = testutil::numeric_gradient(params, [&] { return detail::probe_objective(x, y, 3, 0.1, params, nullptr); });
  EXPECT_LT(testutil::max_relative_error(grad, num), 1e-6);
}

TEST(LinearProbe, NonConvergenceIsFlagged) {
  M x;
  std::vector<int> y;
  blobs(3, 20, 4, 3.0, 9, x, y);
  const auto p = linear_probe(x, y, ProbeConfig{1e-3, 2, 1e-12});
  EXPECT_FALSE(p.converged);
  EXPECT_EQ(p.iterations, 2u);
  EXPECT_GT(p.grad_norm, 1e-12);
}

TEST(LinearProbe, InputErrors) {
  M x = matrix<double>(4, 2);
  const std::vector<int> one_class{0, 0, 0, 0}, neg{0, 1, -1, 0}, short_labels{0, 1};
  EXPECT_THROW(linear_probe(x, one_class), ValidationError);
  EXPECT_THROW(linear_probe(x, neg), ValidationError);
  EXPECT_THROW(linear_probe(x, short_labels), ShapeError);
  x(1, 1) = std::nan("");
  EXPECT_THROW(linear_probe(x, std::vector<int>{0, 1, 0, 1}), ValidationError);
}

TEST(FewShot, QueryEqualToSupportIsRecovered) {
  // Two classes, each with identical rows: every query coincides with a support point.
  M x = matrix<double>(4, 3);
  x(0, 0) = x(1, 0) = 1.0;
  x(2, 1) = x(3, 1) = 1.0;
  x(0, 2) = x(1, 2) = x(2, 2) = x(3, 2) = 0.5;
  const std::vector<int> y{0, 0, 1, 1};
  const auto r = fewshot_eval(x, y, FewShotConfig{20, 2, 1, 1, 3});
  EXPECT_EQ(r.mean, 1.0);
}

TEST(FewShot, SeparableFeaturesScorePerfectly) {
  M x;
  std::vector<int> y;
  blobs(8, 30, 16, 0.05, 10, x, y);
  // Independent check: every point is closest (cosine) to its own class mean.
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto xi = detail::unit(x.row(i));
    std::size_t best = 0;
    double best_s = -2.0;
    for (int c = 0; c < 8; ++c) {
      std::vector<double> mean(16, 0.0);
      for (std::size_t j = 0; j < x.rows(); ++j)
        if (y[j] == c) {
          const auto u = detail::unit(x.row(j));
          for (std::size_t k = 0; k < 16; ++k) mean[k] += u[k];
        }
      const double s = testutil::dot(xi, detail::unit(mean));
      if (s > best_s) best_s = s, best = static_cast<std::size_t>(c);
    }
    ASSERT_EQ(best, static_cast<std::size_t>(y[i]));
  }
  const auto r = fewshot_eval(x, y, FewShotConfig{200, 5, 5, 15, 11});
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_EQ(r.episode_accuracy.size(), 200u);
  EXPECT_EQ(r.stderr_, 0.0);
}

TEST(FewShot, ScaleAndRotationInvariant) {
  M x;
  std::vector<int> y;
  blobs(6, 25, 8, 2.5, 12, x, y);
  const FewShotConfig cfg{100, 5, 5, 15, 13};
  const auto base = fewshot_eval(x, y, cfg);
  M scaled = x;
  for (auto& v : scaled.data) v *= 10.0;
  EXPECT_EQ(fewshot_eval(scaled, y, cfg).episode_accuracy, base.episode_accuracy);
  // Random orthogonal matrix by Gram-Schmidt.
  Rng rng(14);
  auto q = testutil::random_matrix<double>(8, 8, rng);
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const double p = testutil::dot(q.row(i), q.row(j));
      for (std::size_t k = 0; k < 8; ++k) q(i, k) -= p * q(j, k);
    }
    const double n = std::sqrt(testutil::dot(q.row(i), q.row(i)));
    for (std::size_t k = 0; k < 8; ++k) q(i, k) /= n;
  }
  M rotated = matrix<double>(x.rows(), 8);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t k = 0; k < 8; ++k) rotated(i, k) = testutil::dot(x.row(i), q.row(k));
  const auto rot = fewshot_eval(rotated, y, cfg);
  EXPECT_NEAR(rot.mean, base.mean, 1e-12);
}

TEST(FewShot, DeterministicGivenSeed) {
  M x;
  std::vector<int> y;
  blobs(5, 30, 6, 3.0, 15, x, y);
  const auto a = fewshot_eval(x, y, FewShotConfig{50, 5, 5, 15, 1});
  const auto b = fewshot_eval(x, y, FewShotConfig{50, 5, 5, 15, 1});
  const auto c = fewshot_eval(x, y, FewShotConfig{50, 5, 5, 15, 2});
  EXPECT_EQ(a.episode_accuracy, b.episode_accuracy);
  EXPECT_NE(a.episode_accuracy, c.episode_accuracy);
}

TEST(FewShot, SmallClassesExcludedAndPoolChecked) {
  M x;
  std::vector<int> y;
  blobs(6, 20, 4, 1.0, 16, x, y);
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] == 5 && i > 40) y[i] = 0;  // class 5 keeps only a few rows
  const auto r = fewshot_eval(x, y, FewShotConfig{10, 5, 5, 10, 1});
  EXPECT_EQ(r.excluded_classes, std::vector<int>{5});
  EXPECT_THROW(fewshot_eval(x, y, FewShotConfig{10, 6, 5, 10, 1}), ValidationError);
}

TEST(AucRoc, HandFixtures) {
  const std::vector<double> s{0.8, 0.7, 0.6, 0.5};
  const auto y = bits({1, 0, 1, 0});
  EXPECT_EQ(auc_roc(s, y), 0.75);
  EXPECT_EQ(auc_roc(s, y), pairwise_auc(s, y));
  EXPECT_EQ(auc_roc(s, bits({1, 1, 0, 0})), 1.0);
  EXPECT_EQ(auc_roc(s, bits({0, 0, 1, 1})), 0.0);
  const std::vector<double> tied{0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(auc_roc(tied, y), 0.5);
}

TEST(AucRoc, MatchesPairwiseOracleWithTies) {
  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(6)) / 5.0;
      y[i] = static_cast<std::uint8_t>(i < 1 ? 1 : (i < 2 ? 0 : rng.below(2)));
    }
    EXPECT_NEAR(auc_roc(s, y), pairwise_auc(s, y), 1e-12);
  }
}

TEST(AucRoc, MonotoneTransformInvariant) {
  Rng rng(18);
  std::vector<double> s(500), t(500), u(500);
  std::vector<std::uint8_t> y(500);
  for (std::size_t i = 0; i < 500; ++i) {
    y[i] = static_cast<std::uint8_t>(rng.below(2));
    s[i] = rng.normal() + (y[i] ? 0.5 : 0.0);
    t[i] = std::exp(3.0 * s[i]);
    u[i] = s[i] * s[i] * s[i] + 2.0 * s[i] - 7.0;
  }
  EXPECT_NEAR(auc_roc(s, y), auc_roc(t, y), 1e-9);
  EXPECT_NEAR(auc_roc(s, y), auc_roc(u, y), 1e-9);
  EXPECT_NEAR(auc_pr(s, y), auc_pr(t, y), 1e-9);
}

TEST(AucRoc, RandomScoresNearHalf) {
  Rng rng(19);
  std::vector<double> s(10000);
  std::vector<std::uint8_t> y(10000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    y[i] = static_cast<std::uint8_t>(rng.bernoulli(0.3));
  }
  EXPECT_NEAR(auc_roc(s, y), 0.5, 0.03);
}

TEST(AucRoc, DegenerateTargetsAreErrors) {
  const std::vector<double> s{0.1, 0.2};
  EXPECT_THROW(auc_roc(s, bits({1, 1})), ValidationError);
  EXPECT_THROW(auc_pr(s, bits({0, 0})), ValidationError);
  EXPECT_THROW(auc_roc(s, bits({0, 2})), ValidationError);
  EXPECT_THROW(auc_roc(s, bits({0})), ShapeError);
}

TEST(AucPr, StepIntegrationFixture) {
  const std::vector<double> s{0.8, 0.7, 0.6, 0.5};
  // Thresholds 0.8, 0.7, 0.6, 0.5 give (recall, precision) (1/2, 1), (1/2, 1/2), (1, 2/3), (1, 1/2).
  EXPECT_NEAR(auc_pr(s, bits({1, 0, 1, 0})), 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-15);
  EXPECT_EQ(auc_pr(s, bits({1, 1, 0, 0})), 1.0);
}

TEST(AucPr, RandomScoresNearPrevalence) {
  Rng rng(20);
  std::vector<double> s(10000);
  std::vector<std::uint8_t> y(10000);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    y[i] = static_cast<std::uint8_t>(rng.bernoulli(0.25));
    pos += y[i];
  }
  const double prevalence = static_cast<double>(pos) / static_cast<double>(s.size());
  EXPECT_NEAR(auc_pr(s, y), prevalence, 0.03);
  // A perfect ranker sits at 1.0, above the prevalence floor.
  std::vector<double> perfect(y.begin(), y.end());
  EXPECT_EQ(auc_pr(perfect, y), 1.0);
  EXPECT_GE(auc_pr(perfect, y), prevalence);
}

TEST(SaliencyAuc, PerfectSeparation) {
  MaskSet masks;
  masks.height = 2;
  masks.width = 3;
  masks.ids = {"a", "b"};
  masks.data = {1, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0};
  std::vector<SaliencyMap> maps(2);
  for (std::size_t i = 0; i < 2; ++i) {
    maps[i] = {2, 3, {}, false};
    for (std::size_t p = 0; p < 6; ++p) maps[i].values.push_back(masks.data[i * 6 + p] ? 0.9 : 0.1);
  }
  const auto pooled = saliency_auc(maps, masks);
  EXPECT_EQ(pooled.auc_roc, 1.0);
  EXPECT_EQ(pooled.auc_pr, 1.0);
  EXPECT_EQ(pooled.pixels, 12u);
  const auto per = saliency_auc(maps, masks, AucAveraging::per_image);
  EXPECT_EQ(per.auc_roc, 1.0);
  masks.data.assign(12, 0);
  EXPECT_THROW(saliency_auc(maps, masks), ValidationError);
  maps.pop_back();
  EXPECT_THROW(saliency_auc(maps, masks), ShapeError);
}

TEST(Report, SingleResultSingleRow) {
  MetricsReport r;
  r.task = "fewshot";
  r.corner = "Model";
  r.columns = {"accuracy"};
  r.add_row("simclr", {0.61234});
  const auto t = render_table(r);
  EXPECT_EQ(t, "| Model  | accuracy |\n|--------|----------|\n| simclr | 0.6123   |\n");
  EXPECT_EQ(render_kv(r), "task=fewshot\nsimclr.accuracy=0.6123\n");
  EXPECT_THROW(r.add_row("x", {1.0, 2.0}), ShapeError);
  EXPECT_THROW(render_table(MetricsReport{}), ValidationError);
}

TEST(Report, SaliencyFixtureLayout) {
  const auto r = saliency_fixture();
  const std::string expect =
      "| Metric  | SimCLR | LGSimCLR | LGSimCLR (Ours) |\n"
      "|---------|--------|----------|-----------------|\n"
      "| AUC-ROC | 0.5411 | 0.5195   | 0.5501          |\n"
      "| AUC-PR  | 0.3419 | 0.3244   | 0.3416          |\n";
  EXPECT_EQ(render_table(r), expect);
  const auto kv = parse_kv(render_kv(r));
  ASSERT_EQ(kv.size(), 7u);
  EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"AUC-ROC.SimCLR", "0.5411"}));
  EXPECT_EQ(kv[3], (std::pair<std::string, std::string>{"AUC-ROC.LGSimCLR_(Ours)", "0.5501"}));
}

TEST(Report, AverageColumnIsRowMean) {
  auto r = saliency_fixture();
  r.average_column = true;
  EXPECT_NEAR(*r.row_average(0), (0.5411 + 0.5195 + 0.5501) / 3.0, 1e-9);
  EXPECT_NEAR(*r.row_average(1), (0.3419 + 0.3244 + 0.3416) / 3.0, 1e-9);
  const auto table = render_table(r);
  EXPECT_NE(table.find("| Avg "), std::string::npos);
  EXPECT_NE(table.find(format_value(*r.row_average(0), 4)), std::string::npos);
  r.add_row("partial", {0.5, std::nullopt, 0.7});
  EXPECT_NEAR(*r.row_average(2), 0.6, 1e-12);
  EXPECT_NE(render_table(r).find("| -  "), std::string::npos);
}

TEST(Pipeline, LinearEvalOnBlobs) {
  M x;
  std::vector<int> y;
  blobs(3, 40, 5, 0.5, 21, x, y);
  const auto r = linear_eval(x, y, 0.25, 3);
  EXPECT_EQ(r.train_size + r.test_size, 120u);
  EXPECT_EQ(r.test_size, 30u);
  EXPECT_EQ(r.test_accuracy, 1.0);
}
