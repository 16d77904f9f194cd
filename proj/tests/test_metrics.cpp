#include <gtest/gtest.h>

#include <numeric>

#include "dcsau/metrics.hpp"
#include "dcsau/selftest.hpp"

using namespace dcsau;

namespace {

LabelMap rows_mask(std::initializer_list<std::size_t> rows) {
  LabelMap m(4, 4);
  for (std::size_t r : rows)
    for (std::size_t x = 0; x < 4; ++x) m.at(r, x) = 1;
  return m;
}

double dice_value(const Tensor& p, const Tensor& t) {
  Graph g(false);
  return dice_loss(g.leaf(p), t).value()[0];
}

}  // namespace

TEST(DiceLoss, PerfectOverlapIsNearZero) {
  Tensor t(Shape{1, 1, 64, 64});
  for (std::size_t i = 0; i < 1200; ++i) t[i] = 1.0f;
  EXPECT_LT(dice_value(t, t), 1e-3);
}

TEST(DiceLoss, DisjointEightPixelSets) {
  Tensor p(Shape{1, 1, 4, 4}), t(Shape{1, 1, 4, 4});
  for (std::size_t i = 0; i < 8; ++i) {
    p[i] = 1.0f;
    t[8 + i] = 1.0f;
  }
  EXPECT_NEAR(dice_value(p, t), 1.0 - 1.0 / 17.0, 1e-6);
}

TEST(DiceLoss, EmptyTargetAndPredictionIsZero) {
  Tensor z(Shape{2, 1, 4, 4});
  EXPECT_EQ(dice_value(z, z), 0.0);
}

TEST(DiceLoss, RangeAndShapeCheck) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Tensor p = random_tensor<float>({2, 3, 4, 4}, rng, 0, 1);
    const Tensor q = one_hot<float>({random_mask(4, 4, 3, rng), random_mask(4, 4, 3, rng)}, 3);
    const double v = dice_value(p, q);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  Graph g(false);
  EXPECT_THROW(dice_loss(g.leaf(Tensor(Shape{1, 1, 4, 4})), Tensor(Shape{1, 2, 4, 4})), ShapeError);
}

TEST(DiceLoss, GradientCheck) {
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(40 + seed);
    const TensorD p = random_tensor<double>({2, 2, 3, 3}, rng, 0, 1);
    const TensorD t = one_hot<double>({random_mask(3, 3, 2, rng), random_mask(3, 3, 2, rng)}, 2);
    EXPECT_LT(grad_check<double>([&](auto&, std::span<const Var<double>> v) { return dice_loss(v[0], t); }, {p}, 1e-6),
              1e-3);
  }
}

TEST(OneHot, BinaryAndMulticlass) {
  LabelMap m(1, 3);
  m.labels = {0, 1, 2};
  const Tensor b = one_hot<float>({m}, 1);
  EXPECT_EQ(b.vec(), (std::vector<float>{0, 1, 1}));
  const Tensor k = one_hot<float>({m}, 3);
  EXPECT_EQ(k.at(0, 2, 0, 2), 1.0f);
  EXPECT_EQ(k.at(0, 0, 0, 0), 1.0f);
  EXPECT_THROW(one_hot<float>({m}, 2), ShapeError);
}

TEST(Confusion, RowsExample) {
  const auto c = confusion(rows_mask({0, 1}), rows_mask({1, 2}), 2);
  EXPECT_EQ(c.classes[1], (ClassCounts{4, 4, 4, 4}));
  const Scores s = metrics_from_counts(c);
  EXPECT_DOUBLE_EQ(s.precision, 0.5);
  EXPECT_DOUBLE_EQ(s.recall, 0.5);
  EXPECT_DOUBLE_EQ(s.f1, 0.5);
  EXPECT_DOUBLE_EQ(s.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(s.miou, 1.0 / 3.0);
}

TEST(Confusion, IdenticalAndEmptyMasks) {
  const LabelMap m = rows_mask({2});
  const auto c = confusion(m, m, 2);
  for (const auto& k : c.classes) {
    EXPECT_EQ(k.fp, 0u);
    EXPECT_EQ(k.fn, 0u);
  }
  for (double v : metrics_from_counts(c).values()) EXPECT_EQ(v, 1.0);

  const LabelMap empty(4, 4);
  const auto e = confusion(empty, empty, 2);
  EXPECT_EQ(e.classes[1].tp, 0u);
  EXPECT_EQ(e.classes[1].tn, 16u);
  for (double v : metrics_from_counts(e).values()) EXPECT_EQ(v, 1.0);
}

TEST(Confusion, OneSidedEmptyScoresZero) {
  const Scores s = metrics_from_counts(confusion(LabelMap(4, 4), rows_mask({0}), 2));
  EXPECT_EQ(s.precision, 0.0);
  EXPECT_EQ(s.recall, 0.0);
  EXPECT_EQ(s.f1, 0.0);
}

TEST(Confusion, RejectsBadInput) {
  LabelMap a(2, 2), b(2, 3);
  EXPECT_THROW(confusion(a, b, 2), ShapeError);
  a.labels[0] = 5;
  EXPECT_THROW(confusion(a, LabelMap(2, 2), 2), ShapeError);
}

TEST(Metrics, MatchBruteForceOracle) {
  Rng rng(7);
  for (int t = 0; t < 500; ++t) {
    const std::size_t classes = 2 + rng.below(3), h = 1 + rng.below(8), w = 1 + rng.below(8);
    const LabelMap p = random_mask(h, w, classes, rng), q = random_mask(h, w, classes, rng);
    const auto c = confusion(p, q, classes);
    ASSERT_EQ(c.classes, oracle::counts(p, q, classes));
    for (const auto& k : c.classes) ASSERT_EQ(k.total(), h * w);
    const auto a = metrics_from_counts(c).values(), b = oracle::scores(p, q, classes).values();
    for (std::size_t i = 0; i < 5; ++i) ASSERT_NEAR(a[i], b[i], 1e-12) << kMetricNames[i];
  }
}

TEST(Metrics, F1IsHarmonicMeanOfPrecisionAndRecall) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    const LabelMap p = random_mask(6, 6, 2, rng), q = random_mask(6, 6, 2, rng);
    const Scores s = metrics_from_counts(confusion(p, q, 2));
    if (s.precision + s.recall > 0) {
      EXPECT_NEAR(s.f1, 2 * s.precision * s.recall / (s.precision + s.recall), 1e-12);
    }
  }
}

TEST(Metrics, PermutationInvariant) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    LabelMap p = random_mask(5, 7, 3, rng), q = random_mask(5, 7, 3, rng);
    const Scores before = metrics_from_counts(confusion(p, q, 3));
    std::vector<std::size_t> perm(p.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    LabelMap p2 = p, q2 = q;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      p2.labels[i] = p.labels[perm[i]];
      q2.labels[i] = q.labels[perm[i]];
    }
    EXPECT_EQ(metrics_from_counts(confusion(p2, q2, 3)).values(), before.values());
  }
}

TEST(Aggregate, FormatsMeanAndPopulationSd) {
  EXPECT_EQ(format_pm(summarize({0.8})), "0.800±0.000");
  EXPECT_EQ(format_pm(summarize({0.0, 1.0})), "0.500±0.500");
  const Summary s = summarize({0.2, 0.4, 0.6});
  EXPECT_NEAR(s.mean, 0.4, 1e-12);
  EXPECT_NEAR(s.sd, 0.163299, 1e-6);
  EXPECT_THROW(aggregate({}), DataError);
}

TEST(Aggregate, ReportJsonAndTable) {
  std::vector<ImageResult> im{{"a", {1, 1, 1, 1, 1}}, {"b", {0, 0, 0, 0, 0}}};
  const MetricsReport r = aggregate(im, 1);
  const auto j = r.to_json();
  EXPECT_EQ(j["evaluated"], 2);
  EXPECT_EQ(j["skipped"], 1);
  EXPECT_EQ(j["aggregate"]["f1"]["text"], "0.500±0.500");
  EXPECT_NE(r.to_table().find("miou"), std::string::npos);
}
