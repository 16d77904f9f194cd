#ifndef DCSAU_SELFTEST_HPP
#define DCSAU_SELFTEST_HPP

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "dcsau/analysis.hpp"
#include "dcsau/data.hpp"
#include "dcsau/metrics.hpp"
#include "dcsau/model.hpp"
#include "dcsau/ops.hpp"

namespace dcsau {

// ---------------------------------------------------------------------------
// Brute-force references. Deliberately naive: one output element at a time,
// straight from the definitions, sharing no code with the kernels.

namespace oracle {

template <typename T>
BasicTensor<double> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b,
                           std::size_t stride, std::size_t pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const std::size_t ho = (xs.h + 2 * pad - ws.h) / stride + 1;
  const std::size_t wo = (xs.w + 2 * pad - ws.w) / stride + 1;
  BasicTensor<double> y(Shape{xs.n, ws.n, ho, wo});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = b ? static_cast<double>((*b)[o]) : 0.0;
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t ky = 0; ky < ws.h; ++ky)
              for (std::size_t kx = 0; kx < ws.w; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
                acc += static_cast<double>(x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))) *
                       static_cast<double>(w.at(o, c, ky, kx));
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

/// w is [C, 1, K, K].
template <typename T>
BasicTensor<double> depthwise_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b,
                                     std::size_t stride, std::size_t pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const std::size_t ho = (xs.h + 2 * pad - ws.h) / stride + 1;
  const std::size_t wo = (xs.w + 2 * pad - ws.w) / stride + 1;
  BasicTensor<double> y(Shape{xs.n, xs.c, ho, wo});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = b ? static_cast<double>((*b)[c]) : 0.0;
          for (std::size_t ky = 0; ky < ws.h; ++ky)
            for (std::size_t kx = 0; kx < ws.w; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
              acc += static_cast<double>(x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))) *
                     static_cast<double>(w.at(c, 0, ky, kx));
            }
          y.at(n, c, oy, ox) = acc;
        }
  return y;
}

template <typename T>
BasicTensor<double> maxpool2d(const BasicTensor<T>& x) {
  const Shape s = x.shape();
  BasicTensor<double> y(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < s.h / 2; ++oy)
        for (std::size_t ox = 0; ox < s.w / 2; ++ox) {
          double m = -INFINITY;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx)
              m = std::max(m, static_cast<double>(x.at(n, c, 2 * oy + dy, 2 * ox + dx)));
          y.at(n, c, oy, ox) = m;
        }
  return y;
}

template <typename T>
BasicTensor<double> global_avg_pool(const BasicTensor<T>& x) {
  const Shape s = x.shape();
  BasicTensor<double> y(Shape{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j) acc += static_cast<double>(x.at(n, c, i, j));
      y.at(n, c, 0, 0) = acc / static_cast<double>(s.h * s.w);
    }
  return y;
}

/// Per-pixel counting, one class at a time.
inline std::vector<ClassCounts> counts(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  std::vector<ClassCounts> out(classes);
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred.labels[i] == k, g = gt.labels[i] == k;
      if (p && g) ++out[k].tp;
      if (p && !g) ++out[k].fp;
      if (!p && g) ++out[k].fn;
      if (!p && !g) ++out[k].tn;
    }
  return out;
}

/// Five metrics straight from pixel sets. Foreground precision, recall and
/// F1 are averaged over classes 1..K-1.
inline Scores scores(const LabelMap& pred, const LabelMap& gt, std::size_t classes) {
  Scores s;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred.labels[i] == gt.labels[i];
  s.accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t inter = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      inter += pred.labels[i] == k && gt.labels[i] == k;
      np += pred.labels[i] == k;
      ng += gt.labels[i] == k;
    }
    const std::size_t uni = np + ng - inter;
    s.miou += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    if (k == 0) continue;
    const double prec = np == 0 ? (ng == 0 ? 1.0 : 0.0) : static_cast<double>(inter) / static_cast<double>(np);
    const double rec = ng == 0 ? (np == 0 ? 1.0 : 0.0) : static_cast<double>(inter) / static_cast<double>(ng);
    s.precision += prec;
    s.recall += rec;
    s.f1 += np + ng == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
  }
  const double fg = static_cast<double>(classes - 1);
  s.precision /= fg;
  s.recall /= fg;
  s.f1 /= fg;
  s.miou /= static_cast<double>(classes);
  return s;
}

}  // namespace oracle

// ---------------------------------------------------------------------------
// Helpers shared by the self-test and the test suites

template <typename T>
BasicTensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline LabelMap random_mask(std::size_t h, std::size_t w, std::size_t classes, Rng& rng) {
  LabelMap m(h, w);
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng.below(classes));
  return m;
}

/// Largest |a - b| / max(|b|, 1) over elements.
template <typename A>
double max_rel_error(const BasicTensor<A>& a, const BasicTensor<double>& b) {
  if (!(a.shape() == b.shape())) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < b.numel(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - b[i]) / std::max(std::abs(b[i]), 1.0);
    worst = std::max(worst, std::isnan(d) ? INFINITY : d);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Self-test

struct CheckResult {
  std::string name;  ///< module/op
  bool passed = false;
  std::string detail;
};

namespace selftest_detail {

inline constexpr double kOracleTol = 1e-5;
inline constexpr double kGradTol = 1e-3;
inline constexpr double kGradStep = 1e-6;

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline CheckResult conv_oracle(std::size_t trials) {
  Rng rng(101);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t k = 1 + 2 * rng.below(2), stride = 1 + rng.below(2), pad = rng.below(k / 2 + 1);
    const std::size_t h = k + rng.below(8 - k + 1), w = k + rng.below(8 - k + 1);
    const auto x = random_tensor<float>({1 + rng.below(2), 1 + rng.below(4), h, w}, rng);
    const auto wt = random_tensor<float>({1 + rng.below(4), x.shape().c, k, k}, rng);
    const auto b = random_tensor<float>({1, wt.shape().n, 1, 1}, rng);
    Graph g(false);
    const auto y = conv2d(g.leaf(x), g.leaf(wt), g.leaf(b), stride, pad).value();
    worst = std::max(worst, max_rel_error(y, oracle::conv2d(x, wt, &b, stride, pad)));
  }
  return {"tensor-autograd/conv2d", worst <= kOracleTol, "oracle mismatch, max rel error " + fmt(worst)};
}

inline CheckResult depthwise_oracle(std::size_t trials) {
  Rng rng(102);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t k = 1 + 2 * rng.below(4), pad = k / 2;
    const auto x = random_tensor<float>({1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8)}, rng);
    const auto wt = random_tensor<float>({x.shape().c, 1, k, k}, rng);
    const auto b = random_tensor<float>({1, x.shape().c, 1, 1}, rng);
    Graph g(false);
    const auto y = depthwise_conv2d(g.leaf(x), g.leaf(wt), g.leaf(b), 1, pad).value();
    worst = std::max(worst, max_rel_error(y, oracle::depthwise_conv2d(x, wt, &b, 1, pad)));
  }
  return {"tensor-autograd/depthwise_conv2d", worst <= kOracleTol, "oracle mismatch, max rel error " + fmt(worst)};
}

inline CheckResult pool_oracles(std::size_t trials) {
  Rng rng(103);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto x =
        random_tensor<float>({1 + rng.below(2), 1 + rng.below(4), 2 * (1 + rng.below(4)), 2 * (1 + rng.below(4))}, rng);
    Graph g(false);
    worst = std::max(worst, max_rel_error(maxpool2d(g.leaf(x)).value(), oracle::maxpool2d(x)));
    worst = std::max(worst, max_rel_error(global_avg_pool(g.leaf(x)).value(), oracle::global_avg_pool(x)));
  }
  return {"tensor-autograd/pooling", worst <= kOracleTol, "oracle mismatch, max rel error " + fmt(worst)};
}

inline CheckResult metrics_oracle(std::size_t trials) {
  Rng rng(104);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t classes = 2 + rng.below(3);
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8);
    const LabelMap p = random_mask(h, w, classes, rng), q = random_mask(h, w, classes, rng);
    const auto c = confusion(p, q, classes);
    if (c.classes != oracle::counts(p, q, classes)) return {"metrics-loss/confusion", false, "count mismatch"};
    const auto a = metrics_from_counts(c).values(), b = oracle::scores(p, q, classes).values();
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::abs(a[i] - b[i]) > 1e-12) return {"metrics-loss/metrics_from_counts", false, kMetricNames[i]};
  }
  return {"metrics-loss/metrics_from_counts", true, ""};
}

inline CheckResult grad_primitives() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(200 + seed);
    const auto x = random_tensor<double>({2, 2, 4, 4}, rng);
    const auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    const auto r = random_tensor<double>({2, 3, 4, 4}, rng);
    worst = std::max(worst, grad_check<double>(
                                [&](BasicGraph<double>&, std::span<const Var<double>> v) {
                                  return weighted_sum(relu(conv2d(v[0], v[1], std::nullopt, 1, 1)), r);
                                },
                                {x, w}, kGradStep));
    const auto r2 = random_tensor<double>({2, 2, 2, 2}, rng);
    worst = std::max(worst, grad_check<double>(
                                [&](BasicGraph<double>&, std::span<const Var<double>> v) {
                                  return weighted_sum(maxpool2d(sigmoid(v[0])), r2);
                                },
                                {x}, kGradStep));
  }
  return {"tensor-autograd/grad_check", worst < kGradTol, "max rel error " + fmt(worst)};
}

inline CheckResult attention_normalization() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(300 + seed);
    CSABlock<float> block(8, 8, rng);
    Graph g(false);
    CSATrace<float> tr;
    block.forward(g.leaf(random_tensor<float>({2, 8, 4, 4}, rng)), Mode::kTrain, &tr);
    const auto& a = tr.attention.value();
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 8; ++c)
        worst = std::max(worst, std::abs(static_cast<double>(a.at(n, c, 0, 0)) + a.at(n, 8 + c, 0, 0) - 1.0));
  }
  return {"nn-blocks/csa_forward", worst <= 1e-6, "attention sums deviate by " + fmt(worst)};
}

inline CheckResult zero_branch_identity() {
  Rng rng(400);
  CSABlock<float> block(8, 8, rng);
  StateList<float> st;
  block.collect("csa", st);
  zero_branch_parameters(st);
  const auto x = random_tensor<float>({2, 8, 4, 4}, rng);
  Graph g(false);
  const auto y = block.forward(g.leaf(x), Mode::kEval).value();
  return {"nn-blocks/csa_forward", y.bit_equal(x), "zero-branch block is not the identity"};
}

inline CheckResult split_sizes() {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < 612; ++i) ids.push_back(std::to_string(i));
  const Split s = split(ids);
  const bool ok = s.train.size() == 441 && s.valid.size() == 110 && s.test.size() == 61;
  return {"data-pipeline/split", ok, "612 ids do not split 441/110/61"};
}

inline CheckResult cost_scaling() {
  const ModelConfig cfg = ModelConfig::defaults(Variant::kUnet);
  const bool ok = analysis::count_flops(cfg, 3, 512, 512) == 4 * analysis::count_flops(cfg, 3, 256, 256);
  return {"analysis/count_flops", ok, "U-Net MACs not exactly 4x at doubled extents"};
}

inline CheckResult param_enumeration() {
  ModelConfig cfg = ModelConfig::defaults(Variant::kDcsau);
  cfg.stage_widths = {8, 16};
  Model m(cfg, 1);
  std::size_t n = 0;
  const Archive ar = to_archive(m);
  for (const auto& e : ar.entries())
    if (!is_buffer_name(e.name)) n += e.tensor.numel();
  return {"analysis/count_params", n == analysis::count_params(cfg), "archive enumeration disagrees"};
}

}  // namespace selftest_detail

/// Runs every check in order, reporting each; returns true when all pass.
inline bool run_selftest(std::ostream& os, bool stop_at_first_failure = true) {
  using namespace selftest_detail;
  const std::vector<std::function<CheckResult()>> checks{
      [] { return conv_oracle(60); },   [] { return depthwise_oracle(60); }, [] { return pool_oracles(60); },
      [] { return metrics_oracle(200); }, grad_primitives,                  attention_normalization,
      zero_branch_identity,             split_sizes,                        cost_scaling,
      param_enumeration};
  bool all = true;
  for (const auto& check : checks) {
    const CheckResult r = check();
    os << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.passed) os << ": " << r.detail;
    os << '\n';
    if (!r.passed) {
      all = false;
      if (stop_at_first_failure) break;
    }
  }
  return all;
}

}  // namespace dcsau

#endif  // DCSAU_SELFTEST_HPP
