#include <gtest/gtest.h>

#include <sstream>

#include "dcsau/ops.hpp"
#include "dcsau/selftest.hpp"

using namespace dcsau;

namespace {

constexpr double kGradTol = 1e-3;
constexpr double kStep = 1e-6;
constexpr double kOracleTol = 1e-5;
constexpr int kSeeds = 5;

using VarD = Var<double>;
using Span = std::span<const VarD>;

TensorD rnd(Shape s, Rng& rng) { return random_tensor<double>(s, rng); }

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.numel(), 120u);
  t.at(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t[119], 7.0f);
  EXPECT_EQ(t.plane(1, 2)[19], 7.0f);
  EXPECT_THROW(Tensor(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, SerializationRoundTripIsBitExact) {
  Rng rng(1);
  const Tensor t = random_tensor<float>({2, 3, 4, 5}, rng);
  std::stringstream ss;
  io::write_tensor(ss, t);
  EXPECT_EQ(ss.str().size(), 4u + 2u + 16u + 120u * 4u);
  EXPECT_TRUE(io::read_tensor(ss).bit_equal(t));
}

TEST(Tensor, SerializationRejectsBadInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(io::read_tensor(bad), FormatError);
  Tensor t(Shape{1, 1, 2, 2}, 1.0f);
  std::stringstream ss;
  io::write_tensor(ss, t);
  std::string s = ss.str();
  std::stringstream truncated(s.substr(0, s.size() - 3));
  EXPECT_THROW(io::read_tensor(truncated), FormatError);
}

TEST(Archive, RoundTripPreservesOrderNamesAndBits) {
  Rng rng(2);
  Archive a;
  a.add("b.weight", random_tensor<float>({2, 2, 3, 3}, rng));
  a.add("a.bias", random_tensor<float>({1, 2, 1, 1}, rng));
  const Archive b = Archive::from_bytes(a.bytes());
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b.entries()[0].name, "b.weight");
  EXPECT_TRUE(b.entries()[1].tensor.bit_equal(a.entries()[1].tensor));
  EXPECT_EQ(b.bytes(), a.bytes());
}

TEST(Graph, BackwardAccumulatesLeafGradients) {
  Graph g;
  Var<float> x = g.leaf(Tensor(Shape{1, 1, 1, 2}, 3.0f), true);
  Var<float> y = sum(add(x, x));
  g.backward(y);
  EXPECT_EQ(x.grad()[0], 2.0f);
  g.backward(y);
  EXPECT_EQ(x.grad()[0], 4.0f);
}

TEST(Graph, ParameterGradientsAccumulateAcrossGraphs) {
  Parameter p(Tensor(Shape{1, 1, 1, 3}, 1.0f));
  for (int i = 0; i < 2; ++i) {
    Graph g;
    g.backward(sum(scale(g.param(p), 2.0)));
  }
  EXPECT_EQ(p.grad[2], 4.0f);
  p.zero_grad();
  EXPECT_EQ(p.grad[2], 0.0f);
}

TEST(Graph, BackwardNeedsScalarAndGradients) {
  Graph g;
  Var<float> x = g.leaf(Tensor(Shape{1, 1, 1, 2}), true);
  EXPECT_ANY_THROW(g.backward(x));
  Graph off(false);
  Var<float> y = sum(off.leaf(Tensor(Shape{1, 1, 1, 1}), true));
  EXPECT_ANY_THROW(off.backward(y));
}

// ---------------------------------------------------------------------------
// Forward oracles

TEST(Conv2d, ThreeByThreeExampleOnFourByFour) {
  // 3x3 ones kernel over a 4x4 ones image with padding 1: corner 4, edge 6, interior 9.
  Graph g(false);
  const auto y = conv2d(g.leaf(Tensor(Shape{1, 1, 4, 4}, 1.0f)), g.leaf(Tensor(Shape{1, 1, 3, 3}, 1.0f)),
                        std::nullopt, 1, 1)
                     .value();
  EXPECT_EQ(y.at(0, 0, 0, 0), 4.0f);
  EXPECT_EQ(y.at(0, 0, 0, 1), 6.0f);
  EXPECT_EQ(y.at(0, 0, 1, 1), 9.0f);
}

TEST(Conv2d, MatchesOracleOnRandomInstances) {
  Rng rng(10);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 1 + 2 * rng.below(3), stride = 1 + rng.below(2), pad = rng.below(k / 2 + 1);
    const std::size_t h = k + rng.below(9 - k), w = k + rng.below(9 - k);
    const auto x = random_tensor<float>({1 + rng.below(2), 1 + rng.below(5), h, w}, rng);
    const auto wt = random_tensor<float>({1 + rng.below(5), x.shape().c, k, k}, rng);
    const auto b = random_tensor<float>({1, wt.shape().n, 1, 1}, rng);
    Graph g(false);
    const auto y = conv2d(g.leaf(x), g.leaf(wt), g.leaf(b), stride, pad).value();
    ASSERT_LE(max_rel_error(y, oracle::conv2d(x, wt, &b, stride, pad)), kOracleTol) << "trial " << t;
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  Graph g(false);
  EXPECT_THROW(conv2d(g.leaf(Tensor(Shape{1, 2, 4, 4})), g.leaf(Tensor(Shape{1, 3, 3, 3})), std::nullopt, 1, 1),
               ShapeError);
}

TEST(DepthwiseConv2d, MatchesOracleOnRandomInstances) {
  Rng rng(11);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 1 + 2 * rng.below(4), stride = 1 + rng.below(2), pad = rng.below(k / 2 + 1);
    const std::size_t h = k + rng.below(9 - k > 0 ? 9 - k : 1), w = k + rng.below(9 - k > 0 ? 9 - k : 1);
    const auto x = random_tensor<float>({1 + rng.below(2), 1 + rng.below(5), std::min<std::size_t>(h, 8),
                                         std::min<std::size_t>(w, 8)},
                                        rng);
    if (x.shape().h + 2 * pad < k || x.shape().w + 2 * pad < k) continue;
    const auto wt = random_tensor<float>({x.shape().c, 1, k, k}, rng);
    const auto b = random_tensor<float>({1, x.shape().c, 1, 1}, rng);
    Graph g(false);
    const auto y = depthwise_conv2d(g.leaf(x), g.leaf(wt), g.leaf(b), stride, pad).value();
    ASSERT_LE(max_rel_error(y, oracle::depthwise_conv2d(x, wt, &b, stride, pad)), kOracleTol) << "trial " << t;
  }
}

TEST(DepthwiseConv2d, ParameterCountClosedForm) {
  // 7x7 depthwise over 64 channels with bias: 64 * 49 + 64.
  Rng rng(0);
  ConvUnit<float> u({64, 64, 7, 1, 3, ConvKind::kDepthwise, Post::kNone}, rng);
  EXPECT_EQ(u.weight().numel() + u.bias().numel(), 3200u);
}

TEST(MaxPool2d, MatchesOracleAndRejectsOddExtents) {
  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    const auto x = random_tensor<float>(
        {1 + rng.below(2), 1 + rng.below(4), 2 * (1 + rng.below(4)), 2 * (1 + rng.below(4))}, rng);
    Graph g(false);
    ASSERT_LE(max_rel_error(maxpool2d(g.leaf(x)).value(), oracle::maxpool2d(x)), kOracleTol);
  }
  Graph g(false);
  EXPECT_THROW(maxpool2d(g.leaf(Tensor(Shape{1, 1, 3, 4}))), ShapeError);
}

TEST(GlobalAvgPool, MatchesOracle) {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    const auto x = random_tensor<float>({1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8)}, rng);
    Graph g(false);
    ASSERT_LE(max_rel_error(global_avg_pool(g.leaf(x)).value(), oracle::global_avg_pool(x)), kOracleTol);
  }
}

TEST(Upsample2x, KnownValuesHalfPixelCentres) {
  // 1x2 row [0, 1] -> [0, 0.25, 0.75, 1] along W.
  Graph g(false);
  const auto y = upsample2x(g.leaf(Tensor(Shape{1, 1, 1, 2}, std::vector<float>{0.0f, 1.0f}))).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 0), 0.0f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 0, 1), 0.25f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 1, 2), 0.75f);
  EXPECT_FLOAT_EQ(y.at(0, 0, 1, 3), 1.0f);
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
  Rng rng(14);
  const Tensor x = random_tensor<float>({4, 2, 3, 3}, rng, 2.0, 4.0);
  BatchNormStats<float> st(2);
  Graph g(false);
  const auto y = batchnorm2d(g.leaf(x), g.leaf(Tensor(Shape{1, 2, 1, 1}, 1.0f)), g.leaf(Tensor(Shape{1, 2, 1, 1})),
                             st, Mode::kTrain)
                     .value();
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) m += y.plane(n, c)[i];
    m /= 36;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) v += (y.plane(n, c)[i] - m) * (y.plane(n, c)[i] - m);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v / 36, 1.0, 1e-3);
    EXPECT_GT(st.running_mean[c], 0.2f);  // 0.1 * batch mean of roughly 3
  }
}

TEST(BatchNorm, TrainModeNeedsTwoValuesPerChannel) {
  BatchNormStats<float> st(1);
  Graph g(false);
  EXPECT_ANY_THROW(batchnorm2d(g.leaf(Tensor(Shape{1, 1, 1, 1})), g.leaf(Tensor(Shape{1, 1, 1, 1}, 1.0f)),
                               g.leaf(Tensor(Shape{1, 1, 1, 1})), st, Mode::kTrain));
}

TEST(Softmax, GroupsSumToOne) {
  Rng rng(15);
  Graph g(false);
  const auto y = softmax_over_groups(g.leaf(random_tensor<float>({2, 6, 2, 2}, rng, -5, 5)), 2).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.plane(n, c)[i] + y.plane(n, c + 3)[i], 1.0, 1e-6);
  EXPECT_THROW(softmax_over_groups(g.leaf(Tensor(Shape{1, 3, 1, 1})), 2), ShapeError);
}

TEST(Structural, ConcatThenSplitIsIdentity) {
  Rng rng(16);
  const Tensor a = random_tensor<float>({2, 3, 2, 2}, rng), b = random_tensor<float>({2, 3, 2, 2}, rng);
  Graph g(false);
  auto parts = split_channels(concat_channels(g.leaf(a), g.leaf(b)), 2);
  EXPECT_TRUE(parts[0].value().bit_equal(a));
  EXPECT_TRUE(parts[1].value().bit_equal(b));
  EXPECT_THROW(split_channels(g.leaf(Tensor(Shape{1, 3, 1, 1})), 2), ShapeError);
}

TEST(FaultHook, ConvSignFlipNegatesOutput) {
  Graph g(false);
  fault::conv_sign_flip() = true;
  const auto y = conv2d(g.leaf(Tensor(Shape{1, 1, 2, 2}, 1.0f)), g.leaf(Tensor(Shape{1, 1, 1, 1}, 2.0f)),
                        std::nullopt, 1, 0)
                     .value();
  fault::conv_sign_flip() = false;
  EXPECT_EQ(y[0], -2.0f);
}

// ---------------------------------------------------------------------------
// Gradient checks, double precision, five seeds per primitive

class PrimitiveGrad : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGrad, Conv2dStrideAndPadding) {
  Rng rng(100 + GetParam());
  const auto x = rnd({2, 3, 5, 5}, rng), w = rnd({4, 3, 3, 3}, rng), b = rnd({1, 4, 1, 1}, rng);
  const auto r = rnd({2, 4, 3, 3}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(conv2d(v[0], v[1], v[2], 2, 1), r); },
                               {x, w, b}, kStep),
            kGradTol);
  const auto r1 = rnd({2, 4, 5, 5}, rng);
  const auto w1 = rnd({4, 3, 1, 1}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(conv2d(v[0], v[1], v[2], 1, 0), r1); },
                               {x, w1, b}, kStep),
            kGradTol);
}

TEST_P(PrimitiveGrad, DepthwiseConv2d) {
  Rng rng(200 + GetParam());
  const auto x = rnd({2, 3, 5, 5}, rng), w = rnd({3, 1, 5, 5}, rng), b = rnd({1, 3, 1, 1}, rng);
  const auto r = rnd({2, 3, 5, 5}, rng);
  EXPECT_LT(grad_check<double>(
                [&](auto&, Span v) { return weighted_sum(depthwise_conv2d(v[0], v[1], v[2], 1, 2), r); }, {x, w, b},
                kStep),
            kGradTol);
}

TEST_P(PrimitiveGrad, MaxPool) {
  Rng rng(300 + GetParam());
  const auto x = rnd({2, 2, 4, 6}, rng), r = rnd({2, 2, 2, 3}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(maxpool2d(v[0]), r); }, {x}, kStep),
            kGradTol);
}

TEST_P(PrimitiveGrad, Upsample) {
  Rng rng(400 + GetParam());
  const auto x = rnd({2, 2, 3, 4}, rng), r = rnd({2, 2, 6, 8}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(upsample2x(v[0]), r); }, {x}, kStep),
            kGradTol);
}

TEST_P(PrimitiveGrad, GlobalAvgPool) {
  Rng rng(500 + GetParam());
  const auto x = rnd({2, 3, 3, 4}, rng), r = rnd({2, 3, 1, 1}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(global_avg_pool(v[0]), r); }, {x}, kStep),
            kGradTol);
}

TEST_P(PrimitiveGrad, BatchNormTrainAndEval) {
  Rng rng(600 + GetParam());
  const auto x = rnd({3, 2, 3, 3}, rng), gm = rnd({1, 2, 1, 1}, rng), bt = rnd({1, 2, 1, 1}, rng);
  const auto r = rnd({3, 2, 3, 3}, rng);
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    EXPECT_LT(grad_check<double>(
                  [&](auto&, Span v) {
                    BatchNormStats<double> st(2);
                    st.running_mean.fill(0.3);
                    st.running_var.fill(1.7);
                    return weighted_sum(batchnorm2d(v[0], v[1], v[2], st, mode), r);
                  },
                  {x, gm, bt}, kStep),
              kGradTol);
  }
}

TEST_P(PrimitiveGrad, PointwiseActivations) {
  Rng rng(700 + GetParam());
  const auto x = rnd({2, 4, 3, 3}, rng), r = rnd({2, 4, 3, 3}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(relu(v[0]), r); }, {x}, kStep), kGradTol);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(sigmoid(v[0]), r); }, {x}, kStep), kGradTol);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(softmax_over_groups(v[0], 2), r); }, {x},
                               kStep),
            kGradTol);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(softmax_over_groups(v[0], 4), r); }, {x},
                               kStep),
            kGradTol);
}

TEST_P(PrimitiveGrad, Structural) {
  Rng rng(800 + GetParam());
  const auto a = rnd({2, 2, 3, 3}, rng), b = rnd({2, 2, 3, 3}, rng), r = rnd({2, 4, 3, 3}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(concat_channels(v[0], v[1]), r); }, {a, b},
                               kStep),
            kGradTol);
  const auto r2 = rnd({2, 2, 3, 3}, rng);
  EXPECT_LT(grad_check<double>(
                [&](auto&, Span v) {
                  auto parts = split_channels(concat_channels(v[0], v[1]), 2);
                  return weighted_sum(add(scale(parts[1], 0.5), parts[0]), r2);
                },
                {a, b}, kStep),
            kGradTol);
  const auto wts = rnd({2, 2, 1, 1}, rng);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return weighted_sum(channel_scale(v[0], v[1]), r2); },
                               {wts, a}, kStep),
            kGradTol);
  EXPECT_LT(grad_check<double>([&](auto&, Span v) { return sum(v[0]); }, {a}, kStep), kGradTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGrad, ::testing::Range(0, kSeeds));
