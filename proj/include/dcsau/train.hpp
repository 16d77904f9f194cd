#ifndef DCSAU_TRAIN_HPP
#define DCSAU_TRAIN_HPP

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dcsau/data.hpp"
#include "dcsau/metrics.hpp"
#include "dcsau/model.hpp"
#include "json.hpp"

namespace dcsau {

// ---------------------------------------------------------------------------
// Optimizer

struct NamedParam {
  std::string name;
  Parameter* param;
};

inline std::vector<NamedParam> named_parameters(Model& model) {
  std::vector<NamedParam> out;
  for (const auto& s : model.state())
    if (s.param) out.push_back({s.name, s.param});
  return out;
}

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;
};

/// One Adam update from the gradients currently held by `params`. A
/// non-finite gradient rejects the whole step before anything is modified.
inline void adam_step(AdamState& st, const std::vector<NamedParam>& params) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.param->numel(), 0.0);
      st.v.emplace_back(p.param->numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) throw ConfigError("adam_step: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& g = params[k].param->grad;
    if (g.numel() != params[k].param->numel()) {
      throw ShapeError("adam_step: gradient of '" + params[k].name + "' has shape " + g.shape().str());
    }
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (!std::isfinite(g[i])) {
        throw DivergenceError("adam_step: non-finite gradient in '" + params[k].name + "' at element " +
                              std::to_string(i));
      }
    }
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k].param->value;
    const auto& g = params[k].param->grad;
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double gi = g[i];
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      const double mh = m[i] / c1, vh = v[i] / c2;
      value[i] = static_cast<float>(static_cast<double>(value[i]) - st.lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

struct PlateauScheduler {
  double factor = 0.1;
  std::size_t patience = 10;
  double min_lr = 1e-7;
  double threshold = 1e-6;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  /// Returns the learning rate to use after observing `metric`.
  double step(double lr, double metric) {
    if (metric < best - threshold) {
      best = metric;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }
    if (bad_epochs > patience) {
      lr = std::max(lr * factor, min_lr);
      bad_epochs = 0;
    }
    return lr;
  }
};

// ---------------------------------------------------------------------------
// Loss on a batch

/// Post-activation probabilities for logits.
template <typename T>
Var<T> activate(const Var<T>& logits) {
  return logits.shape().c == 1 ? sigmoid(logits) : softmax_over_groups(logits, logits.shape().c);
}

inline Var<float> batch_loss(Model& model, Graph& g, const std::vector<const Sample*>& batch, Mode mode) {
  const Var<float> x = g.leaf(stack_images(batch));
  std::vector<LabelMap> masks;
  for (const auto* s : batch) masks.push_back(s->mask);
  const Var<float> probs = activate(model.forward(x, mode));
  return dice_loss(probs, one_hot(masks, model.config().num_classes));
}

// ---------------------------------------------------------------------------
// Evaluation

/// Per-image metrics in eval mode. Samples the model cannot take are skipped
/// with a warning and counted.
inline MetricsReport evaluate(Model& model, const std::vector<Sample>& samples, std::ostream* warn = &std::cerr) {
  const std::size_t classes = label_classes(model.config().num_classes);
  std::vector<ImageResult> results;
  std::size_t skipped = 0;
  for (const auto& s : samples) {
    try {
      model.config().check_input(s.image.shape().c, s.height(), s.width());
    } catch (const ShapeError& e) {
      ++skipped;
      if (warn) *warn << "warning: skipping " << s.id << ": " << e.what() << '\n';
      continue;
    }
    const auto pred = predict_mask(model.infer(s.image));
    results.push_back({s.id, metrics_from_counts(confusion(pred[0], s.mask, classes))});
  }
  if (results.empty()) throw DataError("evaluate: no sample could be evaluated (" + std::to_string(skipped) + " skipped)");
  return aggregate(std::move(results), skipped);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;  ///< cumulative optimizer steps
  double train_loss = 0;
  double valid_loss = 0;
  Scores valid{};
  double lr = 0;
  double wall_time_s = 0;
  bool improved = false;

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::object();
    const auto v = valid.values();
    for (std::size_t i = 0; i < v.size(); ++i) m[kMetricNames[i]] = v[i];
    return {{"epoch", epoch},         {"steps", steps},     {"train_loss", train_loss},
            {"valid_loss", valid_loss}, {"valid_metrics", m}, {"lr", lr},
            {"improved", improved},   {"wall_time_s", wall_time_s}};
  }
};

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  ///< 0: no limit
  std::size_t batch_size = 4;
  double lr = 1e-4;
  std::uint64_t seed = 42;
  bool augment = false;
  PlateauScheduler scheduler{};
  std::filesystem::path out_dir;  ///< empty: no files written
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::vector<double> step_losses;
  std::size_t steps = 0;
  double best_valid_loss = std::numeric_limits<double>::infinity();
};

namespace detail {

struct Validation {
  double loss = 0;
  Scores mean{};
};

/// Eval-mode loss and mean per-image metrics from one pass over `valid`.
inline Validation validate(Model& model, const std::vector<Sample>& valid, std::size_t batch_size) {
  const std::size_t classes = label_classes(model.config().num_classes);
  double total = 0.0;
  std::vector<ImageResult> results;
  for (std::size_t i = 0; i < valid.size(); i += batch_size) {
    std::vector<const Sample*> batch;
    std::vector<LabelMap> masks;
    for (std::size_t j = i; j < std::min(valid.size(), i + batch_size); ++j) {
      batch.push_back(&valid[j]);
      masks.push_back(valid[j].mask);
    }
    Graph g(false);
    const Var<float> logits = model.forward(g.leaf(stack_images(batch)), Mode::kEval);
    const Var<float> loss = dice_loss(activate(logits), one_hot(masks, model.config().num_classes));
    total += static_cast<double>(loss.value()[0]) * static_cast<double>(batch.size());
    const auto preds = predict_mask(logits.value());
    for (std::size_t k = 0; k < batch.size(); ++k)
      results.push_back({batch[k]->id, metrics_from_counts(confusion(preds[k], masks[k], classes))});
  }
  const MetricsReport r = aggregate(std::move(results));
  Validation v;
  v.loss = total / static_cast<double>(valid.size());
  v.mean = {r.aggregate[0].mean, r.aggregate[1].mean, r.aggregate[2].mean, r.aggregate[3].mean,
            r.aggregate[4].mean};
  return v;
}

/// Contiguous batches over `order`; a trailing single sample joins the
/// previous batch because batch statistics need at least two items.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

}  // namespace detail

/// Seeded mini-batch training with Dice loss and Adam. Validation runs in
/// eval mode after each epoch and drives the plateau scheduler; best.ckpt is
/// rewritten whenever validation loss improves and final.ckpt at the end.
inline TrainResult train(Model& model, const std::vector<Sample>& train_set, const std::vector<Sample>& valid_set,
                         TrainOptions opt) {
  if (train_set.empty()) throw DataError("train: empty training set");
  if (valid_set.empty()) throw DataError("train: empty validation set");
  if (opt.batch_size == 0 || opt.batch_size > train_set.size()) {
    throw ConfigError("batch_size: must be in [1, " + std::to_string(train_set.size()) + "], got " +
                      std::to_string(opt.batch_size));
  }
  if (train_set.size() < 2) throw ConfigError("train: batch statistics need at least two training samples");
  const bool write = !opt.out_dir.empty();
  std::ofstream log_file;
  if (write) {
    std::filesystem::create_directories(opt.out_dir);
    log_file.open(opt.out_dir / "log.jsonl", std::ios::trunc);
    if (!log_file) throw DataError("cannot write " + (opt.out_dir / "log.jsonl").string());
    save_checkpoint(model, (opt.out_dir / "best.ckpt").string());
  }
  const auto start = std::chrono::steady_clock::now();
  const auto params = named_parameters(model);
  AdamState adam;
  adam.lr = opt.lr;
  Rng rng(opt.seed);
  TrainResult result;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    if (opt.max_steps && result.steps >= opt.max_steps) break;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    const auto batches = detail::make_batches(order, opt.batch_size);
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      if (opt.max_steps && result.steps >= opt.max_steps) break;
      std::vector<Sample> augmented;
      std::vector<const Sample*> batch;
      if (opt.augment) {
        for (std::size_t i : batches[b]) augmented.push_back(augment(train_set[i], rng));
        for (const auto& s : augmented) batch.push_back(&s);
      } else {
        for (std::size_t i : batches[b]) batch.push_back(&train_set[i]);
      }
      model.zero_grad();
      Graph g;
      const Var<float> loss = batch_loss(model, g, batch, Mode::kTrain);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b));
      }
      g.backward(loss);
      try {
        adam_step(adam, params);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b) + ")");
      }
      ++result.steps;
      result.step_losses.push_back(lv);
      epoch_loss += lv;
      ++epoch_batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.steps = result.steps;
    rec.train_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_batches, 1));
    const detail::Validation val = detail::validate(model, valid_set, opt.batch_size);
    rec.valid_loss = val.loss;
    rec.valid = val.mean;
    if (!std::isfinite(rec.valid_loss)) {
      throw DivergenceError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    rec.lr = adam.lr;
    rec.improved = rec.valid_loss < result.best_valid_loss;
    if (rec.improved) {
      result.best_valid_loss = rec.valid_loss;
      if (write) save_checkpoint(model, (opt.out_dir / "best.ckpt").string());
    }
    adam.lr = opt.scheduler.step(adam.lr, rec.valid_loss);
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (write) log_file << rec.to_json().dump() << '\n' << std::flush;
    if (opt.on_epoch) opt.on_epoch(rec);
    result.log.push_back(rec);
  }
  if (write) save_checkpoint(model, (opt.out_dir / "final.ckpt").string());
  return result;
}

/// True when the mean of every 50-step window after step 50 is no larger
/// than the mean of the window 50 steps earlier.
inline bool smoothed_monotone(const std::vector<double>& losses, std::size_t window = 50) {
  if (losses.size() < 2 * window) return true;
  auto mean_at = [&](std::size_t begin) {
    double s = 0.0;
    for (std::size_t i = begin; i < begin + window; ++i) s += losses[i];
    return s / static_cast<double>(window);
  };
  for (std::size_t b = window; b + window <= losses.size(); ++b)
    if (mean_at(b) > mean_at(b - window)) return false;
  return true;
}

}  // namespace dcsau

#endif  // DCSAU_TRAIN_HPP
