#ifndef DCSAU_METRICS_HPP
#define DCSAU_METRICS_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "dcsau/autograd.hpp"
#include "dcsau/labels.hpp"
#include "json.hpp"

namespace dcsau {

// ---------------------------------------------------------------------------
// Loss

/// One-hot targets [N, K, H, W] for K output channels. With K == 1 the single
/// channel is the foreground indicator (label != 0).
template <typename T = float>
BasicTensor<T> one_hot(const std::vector<LabelMap>& masks, std::size_t channels) {
  if (masks.empty()) throw ShapeError("one_hot: no masks");
  const std::size_t h = masks[0].h, w = masks[0].w;
  BasicTensor<T> t(Shape{masks.size(), channels, h, w});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n].h != h || masks[n].w != w) throw ShapeError("one_hot: masks differ in extent");
    for (std::size_t i = 0; i < h * w; ++i) {
      const std::size_t l = masks[n].labels[i];
      if (channels == 1) {
        t.plane(n, 0)[i] = l != 0 ? T(1) : T(0);
      } else {
        if (l >= channels) throw ShapeError("one_hot: label " + std::to_string(l) + " >= " + std::to_string(channels));
        t.plane(n, l)[i] = T(1);
      }
    }
  }
  return t;
}

/// 1 - (2 sum(p t) + smooth) / (sum p + sum t + smooth), per (batch item,
/// class), then averaged.
template <typename T>
Var<T> dice_loss(const Var<T>& probs, const BasicTensor<T>& target, double smooth = 1.0) {
  const Shape s = probs.shape();
  if (!(s == target.shape())) {
    throw ShapeError("dice_loss: probs " + s.str() + " vs target " + target.shape().str());
  }
  const std::size_t groups = s.n * s.c;
  const std::size_t plane = s.plane();
  std::vector<double> inter(groups), denom(groups);
  double loss = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* p = probs.value().plane(n, c);
      const T* t = target.plane(n, c);
      double pt = 0.0, ps = 0.0, ts = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        pt += static_cast<double>(p[i]) * static_cast<double>(t[i]);
        ps += static_cast<double>(p[i]);
        ts += static_cast<double>(t[i]);
      }
      const std::size_t g = n * s.c + c;
      inter[g] = 2.0 * pt + smooth;
      denom[g] = ps + ts + smooth;
      loss += 1.0 - inter[g] / denom[g];
    }
  }
  loss /= static_cast<double>(groups);
  auto tp = std::make_shared<BasicTensor<T>>(target);
  const std::size_t pid = probs.id();
  return probs.graph().record(
      "dice_loss", BasicTensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(loss)), {pid},
      [=, inter = std::move(inter), denom = std::move(denom)](BasicGraph<T>& g, const BasicTensor<T>& gy) {
        BasicTensor<T>& gp = g.grad_buffer(pid);
        const double k = static_cast<double>(gy[0]) / static_cast<double>(groups);
        for (std::size_t n = 0; n < s.n; ++n) {
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t gi = n * s.c + c;
            const double d2 = denom[gi] * denom[gi];
            const T* t = tp->plane(n, c);
            T* out = gp.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
              const double dp = -(2.0 * static_cast<double>(t[i]) * denom[gi] - inter[gi]) / d2;
              out[i] += static_cast<T>(k * dp);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Counting

struct ClassCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ClassCounts&) const = default;
};

struct ConfusionCounts {
  std::vector<ClassCounts> classes;
  std::uint64_t pixels = 0;
  std::uint64_t correct = 0;
};

inline ConfusionCounts confusion(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes) {
  if (pred.h != gt.h || pred.w != gt.w) {
    throw ShapeError("confusion: prediction " + std::to_string(pred.h) + "x" + std::to_string(pred.w) +
                     " vs ground truth " + std::to_string(gt.h) + "x" + std::to_string(gt.w));
  }
  if (num_classes < 2) throw ShapeError("confusion: need at least 2 classes");
  ConfusionCounts out;
  out.classes.resize(num_classes);
  out.pixels = pred.size();
  std::vector<std::uint64_t> joint(num_classes * num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t p = pred.labels[i], g = gt.labels[i];
    if (p >= num_classes || g >= num_classes) {
      throw ShapeError("confusion: label " + std::to_string(std::max(p, g)) + " out of range for " +
                       std::to_string(num_classes) + " classes at pixel " + std::to_string(i));
    }
    ++joint[p * num_classes + g];
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::uint64_t pred_k = 0, gt_k = 0;
    for (std::size_t j = 0; j < num_classes; ++j) {
      pred_k += joint[k * num_classes + j];
      gt_k += joint[j * num_classes + k];
    }
    ClassCounts& c = out.classes[k];
    c.tp = joint[k * num_classes + k];
    c.fp = pred_k - c.tp;
    c.fn = gt_k - c.tp;
    c.tn = out.pixels - c.tp - c.fp - c.fn;
    out.correct += c.tp;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scores

inline constexpr std::array<const char*, 5> kMetricNames{"accuracy", "precision", "recall", "f1", "miou"};

struct Scores {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, miou = 0;

  std::array<double, 5> values() const { return {accuracy, precision, recall, f1, miou}; }
};

namespace detail {
/// num / den where den == 0 means both compared sets are empty (-> 1) unless
/// `other_nonempty` says exactly one was (-> 0).
inline double ratio(std::uint64_t num, std::uint64_t den, bool other_nonempty) {
  if (den == 0) return other_nonempty ? 0.0 : 1.0;
  return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

/// Precision, recall and F1 are over foreground classes (macro-averaged when
/// there are several); accuracy is pixel accuracy; mIoU averages every class
/// including background.
inline Scores metrics_from_counts(const ConfusionCounts& counts) {
  Scores s;
  const std::size_t k = counts.classes.size();
  s.accuracy = counts.pixels == 0 ? 1.0 : static_cast<double>(counts.correct) / static_cast<double>(counts.pixels);
  for (std::size_t c = 1; c < k; ++c) {
    const ClassCounts& q = counts.classes[c];
    s.precision += detail::ratio(q.tp, q.tp + q.fp, q.fn > 0);
    s.recall += detail::ratio(q.tp, q.tp + q.fn, q.fp > 0);
    s.f1 += detail::ratio(2 * q.tp, 2 * q.tp + q.fp + q.fn, false);
  }
  const double fg = static_cast<double>(k - 1);
  s.precision /= fg;
  s.recall /= fg;
  s.f1 /= fg;
  for (const auto& q : counts.classes) s.miou += detail::ratio(q.tp, q.tp + q.fp + q.fn, false);
  s.miou /= static_cast<double>(k);
  return s;
}

// ---------------------------------------------------------------------------
// Aggregation

struct Summary {
  double mean = 0;
  double sd = 0;
};

/// Mean and population standard deviation.
inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - s.mean) * (x - s.mean);
  s.sd = std::sqrt(v / static_cast<double>(xs.size()));
  return s;
}

inline std::string format_pm(const Summary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f±%.3f", s.mean, s.sd);
  return buf;
}

struct ImageResult {
  std::string id;
  Scores scores;
};

struct MetricsReport {
  std::vector<ImageResult> images;
  std::array<Summary, 5> aggregate{};
  std::size_t skipped = 0;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& im : images) {
      nlohmann::json row{{"id", im.id}};
      const auto v = im.scores.values();
      for (std::size_t i = 0; i < v.size(); ++i) row[kMetricNames[i]] = v[i];
      per.push_back(row);
    }
    nlohmann::json agg = nlohmann::json::object();
    for (std::size_t i = 0; i < kMetricNames.size(); ++i) {
      agg[kMetricNames[i]] = {{"mean", aggregate[i].mean}, {"sd", aggregate[i].sd}, {"text", format_pm(aggregate[i])}};
    }
    return {{"images", per}, {"aggregate", agg}, {"evaluated", images.size()}, {"skipped", skipped}};
  }

  /// Two-line table in the "m±s" cell format.
  std::string to_table() const {
    std::ostringstream head, row;
    for (std::size_t i = 0; i < kMetricNames.size(); ++i) {
      const std::string cell = format_pm(aggregate[i]);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%-13s", kMetricNames[i]);
      head << buf;
      row << cell << std::string(cell.size() < 15 ? 15 - cell.size() : 1, ' ');
    }
    std::string h = head.str(), r = row.str();
    while (!h.empty() && h.back() == ' ') h.pop_back();
    while (!r.empty() && r.back() == ' ') r.pop_back();
    return h + "\n" + r + "\n";
  }
};

inline MetricsReport aggregate(std::vector<ImageResult> images, std::size_t skipped = 0) {
  if (images.empty()) throw DataError("aggregate: no evaluated images");
  MetricsReport r;
  r.images = std::move(images);
  r.skipped = skipped;
  for (std::size_t m = 0; m < 5; ++m) {
    std::vector<double> xs;
    xs.reserve(r.images.size());
    for (const auto& im : r.images) xs.push_back(im.scores.values()[m]);
    r.aggregate[m] = summarize(xs);
  }
  return r;
}

}  // namespace dcsau

#endif  // DCSAU_METRICS_HPP
