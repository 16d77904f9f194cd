#ifndef DCSAU_AUTOGRAD_HPP
#define DCSAU_AUTOGRAD_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcsau/tensor.hpp"

namespace dcsau {

/// A trainable tensor that outlives any single graph. Gradients from every
/// backward pass that reaches it accumulate into `grad` until zero_grad().
template <typename T>
struct BasicParameter {
  BasicTensor<T> value;
  BasicTensor<T> grad;

  BasicParameter() = default;
  explicit BasicParameter(BasicTensor<T> v) : value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad = BasicTensor<T>(value.shape()); }
  std::size_t numel() const { return value.numel(); }
};

template <typename T>
class BasicGraph;

/// Handle to a node of a BasicGraph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(BasicGraph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  BasicGraph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const BasicTensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  /// Accumulated gradient of a leaf (zeros when nothing reached it).
  const BasicTensor<T>& grad() const { return graph_->grad(id_); }

 private:
  BasicGraph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive applications. Node ids are assigned in
/// creation order, so every node's inputs precede it and a reverse sweep is a
/// valid topological replay.
template <typename T>
class BasicGraph {
 public:
  /// Gradient rule: reads the node's output gradient and adds into the
  /// gradient buffers of its inputs.
  using Rule = std::function<void(BasicGraph&, const BasicTensor<T>& grad_out)>;

  explicit BasicGraph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> leaf(BasicTensor<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    n.op = "leaf";
    n.is_leaf = true;
    return push(std::move(n));
  }

  /// Enroll a parameter. The value is copied into the graph; backward adds
  /// this pass's gradient into `p.grad`.
  Var<T> param(BasicParameter<T>& p) {
    Node n;
    n.value = p.value;
    n.requires_grad = grad_enabled_;
    n.op = "param";
    n.is_leaf = true;
    n.param = &p;
    return push(std::move(n));
  }

  /// Record an op output. `rule` is dropped when no input requires grad.
  Var<T> record(const char* op, BasicTensor<T> value, std::vector<std::size_t> inputs, Rule rule) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    bool any = false;
    for (std::size_t i : inputs) any = any || nodes_[i].requires_grad;
    n.requires_grad = grad_enabled_ && any;
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.rule = std::move(rule);
    return push(std::move(n));
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::size_t size() const { return nodes_.size(); }

  const BasicTensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  /// Gradient buffer of node `id`, allocated on first use. Rules add into it.
  BasicTensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Reverse-mode sweep from a scalar. Interior gradients are recomputed on
  /// every call; leaf gradients (and parameter grads) accumulate.
  void backward(const Var<T>& loss) {
    if (loss.shape().numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + loss.shape().str());
    }
    if (!grad_enabled_) throw std::logic_error("backward on a graph recorded without gradients");
    for (Node& n : nodes_) {
      if (!n.is_leaf || n.param != nullptr) n.grad = BasicTensor<T>();
    }
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] += T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      // Rules only touch inputs, which precede this node.
      if (n.rule) n.rule(*this, n.grad);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BasicParameter<T>* param = nullptr;
    std::vector<std::size_t> inputs;
    Rule rule;
    const char* op = "";
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

using Graph = BasicGraph<float>;
using Parameter = BasicParameter<float>;

/// Relative error between analytic and central-difference gradients,
/// max |a - n| / max(max |a|, max |n|) over every checked element.
///
/// `fn` maps the graph and its enrolled inputs to a scalar. The numeric side
/// re-evaluates `fn` on gradient-free graphs, once per perturbed element.
template <typename T, typename Fn>
double grad_check(Fn&& fn, const std::vector<BasicTensor<T>>& inputs, double step) {
  std::vector<BasicTensor<T>> analytic;
  {
    BasicGraph<T> g(true);
    std::vector<Var<T>> vars;
    for (const auto& t : inputs) vars.push_back(g.leaf(t, true));
    Var<T> out = fn(g, std::span<const Var<T>>(vars));
    g.backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  auto eval = [&](const std::vector<BasicTensor<T>>& xs) {
    BasicGraph<T> g(false);
    std::vector<Var<T>> vars;
    for (const auto& t : xs) vars.push_back(g.leaf(t, false));
    return static_cast<double>(fn(g, std::span<const Var<T>>(vars)).value()[0]);
  };
  double diff = 0.0, scale = 0.0;
  std::vector<BasicTensor<T>> work = inputs;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].numel(); ++i) {
      const T orig = work[k][i];
      work[k][i] = static_cast<T>(orig + step);
      const double up = eval(work);
      work[k][i] = static_cast<T>(orig - step);
      const double down = eval(work);
      work[k][i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic[k][i]);
      diff = std::max(diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
  }
  return scale == 0.0 ? diff : diff / scale;
}

/// Same measure for parameter gradients. `loss` builds a scalar on the given
/// graph from the parameters' current values; `stride` thins the checked
/// elements (every stride-th element of each parameter).
template <typename T, typename Fn>
double grad_check_params(Fn&& loss, const std::vector<BasicParameter<T>*>& params, double step,
                         std::size_t stride = 1) {
  for (auto* p : params) p->zero_grad();
  {
    BasicGraph<T> g(true);
    g.backward(loss(g));
  }
  auto eval = [&] {
    BasicGraph<T> g(false);
    return static_cast<double>(loss(g).value()[0]);
  };
  double diff = 0.0, scale = 0.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->numel(); i += stride) {
      const T orig = p->value[i];
      p->value[i] = static_cast<T>(orig + step);
      const double up = eval();
      p->value[i] = static_cast<T>(orig - step);
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(p->grad[i]);
      diff = std::max(diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
  }
  return scale == 0.0 ? diff : diff / scale;
}

}  // namespace dcsau

#endif  // DCSAU_AUTOGRAD_HPP
