#ifndef DCSAU_NN_HPP
#define DCSAU_NN_HPP

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dcsau/ops.hpp"
#include "dcsau/random.hpp"

namespace dcsau {

/// One named tensor of a module's state. Exactly one of `param` / `buffer` is set.
template <typename T>
struct StateRef {
  std::string name;
  BasicParameter<T>* param = nullptr;
  BasicTensor<T>* buffer = nullptr;

  BasicTensor<T>& tensor() const { return param ? param->value : *buffer; }
};

template <typename T>
using StateList = std::vector<StateRef<T>>;

// ---------------------------------------------------------------------------

enum class ConvKind { kDense, kDepthwise };

/// Where normalization and activation sit after the convolution.
enum class Post {
  kNone,      ///< bare convolution
  kNorm,      ///< conv -> BN
  kNormRelu,  ///< conv -> BN -> ReLU
  kReluNorm,  ///< conv -> ReLU -> BN
};

/// Convolution with bias, optionally followed by batch norm and ReLU.
template <typename T>
class ConvUnit {
 public:
  struct Spec {
    std::size_t in = 1;
    std::size_t out = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;
    ConvKind kind = ConvKind::kDense;
    Post post = Post::kNormRelu;
  };

  ConvUnit() = default;
  ConvUnit(const Spec& spec, Rng& rng) : spec_(spec) {
    if (spec.kind == ConvKind::kDepthwise && spec.in != spec.out) {
      throw ShapeError("depthwise unit needs in == out channels, got " + std::to_string(spec.in) + " -> " +
                       std::to_string(spec.out));
    }
    const std::size_t in_per_group = spec.kind == ConvKind::kDepthwise ? 1 : spec.in;
    const std::size_t fan_in = in_per_group * spec.kernel * spec.kernel;
    BasicTensor<T> w(Shape{spec.out, in_per_group, spec.kernel, spec.kernel});
    const double wb = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-wb, wb));
    BasicTensor<T> b(Shape{1, spec.out, 1, 1});
    const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : b.vec()) v = static_cast<T>(rng.uniform(-bb, bb));
    weight_ = BasicParameter<T>(std::move(w));
    bias_ = BasicParameter<T>(std::move(b));
    if (has_norm()) {
      gamma_ = BasicParameter<T>(BasicTensor<T>(Shape{1, spec.out, 1, 1}, T(1)));
      beta_ = BasicParameter<T>(BasicTensor<T>(Shape{1, spec.out, 1, 1}, T(0)));
      stats_ = BatchNormStats<T>(spec.out);
    }
  }

  const Spec& spec() const { return spec_; }
  bool has_norm() const { return spec_.post != Post::kNone; }

  Var<T> forward(const Var<T>& x, Mode mode) {
    auto& g = x.graph();
    Var<T> y = spec_.kind == ConvKind::kDense
                   ? conv2d(x, g.param(weight_), g.param(bias_), spec_.stride, spec_.pad)
                   : depthwise_conv2d(x, g.param(weight_), g.param(bias_), spec_.stride, spec_.pad);
    switch (spec_.post) {
      case Post::kNone:
        return y;
      case Post::kNorm:
        return norm(y, mode);
      case Post::kNormRelu:
        return relu(norm(y, mode));
      case Post::kReluNorm:
        return norm(relu(y), mode);
    }
    return y;
  }

  void collect(const std::string& prefix, StateList<T>& out) {
    out.push_back({prefix + ".weight", &weight_, nullptr});
    out.push_back({prefix + ".bias", &bias_, nullptr});
    if (has_norm()) {
      out.push_back({prefix + ".bn.gamma", &gamma_, nullptr});
      out.push_back({prefix + ".bn.beta", &beta_, nullptr});
      out.push_back({prefix + ".bn.running_mean", nullptr, &stats_.running_mean});
      out.push_back({prefix + ".bn.running_var", nullptr, &stats_.running_var});
    }
  }

  BasicParameter<T>& weight() { return weight_; }
  BasicParameter<T>& bias() { return bias_; }
  BasicParameter<T>& gamma() { return gamma_; }
  BasicParameter<T>& beta() { return beta_; }

 private:
  Var<T> norm(const Var<T>& y, Mode mode) {
    auto& g = y.graph();
    return batchnorm2d(y, g.param(gamma_), g.param(beta_), stats_, mode);
  }

  Spec spec_;
  BasicParameter<T> weight_, bias_, gamma_, beta_;
  BatchNormStats<T> stats_;
};

/// Common interface of the stage blocks the model stacks.
template <typename T>
class Block {
 public:
  virtual ~Block() = default;
  virtual Var<T> forward(const Var<T>& x, Mode mode) = 0;
  virtual void collect(const std::string& prefix, StateList<T>& out) = 0;
  virtual const char* kind() const = 0;
};

// ---------------------------------------------------------------------------

/// Primary feature conservation block: a 3x3 head lifts the channel count,
/// then a residual depthwise-separable pair (KxK depthwise, 1x1 pointwise)
/// adds back onto the head output. Every convolution is followed by ReLU and
/// then batch norm. Spatial extents are preserved.
template <typename T>
class PFCBlock : public Block<T> {
 public:
  PFCBlock(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) : in_(in), out_(out), kernel_(kernel) {
    if (kernel % 2 == 0) throw ConfigError("PFC kernel size must be odd, got " + std::to_string(kernel));
    head_ = ConvUnit<T>({in, out, 3, 1, 1, ConvKind::kDense, Post::kReluNorm}, rng);
    depthwise_ = ConvUnit<T>({out, out, kernel, 1, kernel / 2, ConvKind::kDepthwise, Post::kReluNorm}, rng);
    pointwise_ = ConvUnit<T>({out, out, 1, 1, 0, ConvKind::kDense, Post::kReluNorm}, rng);
  }

  Var<T> forward(const Var<T>& x, Mode mode) override {
    const Shape s = x.shape();
    if (s.c != in_) {
      throw ShapeError("pfc: input axis C = " + std::to_string(s.c) + " but block expects " + std::to_string(in_));
    }
    if (s.h < kernel_ || s.w < kernel_) {
      throw ShapeError("pfc: spatial extents " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                       " smaller than kernel " + std::to_string(kernel_));
    }
    Var<T> h = head_.forward(x, mode);
    Var<T> branch = pointwise_.forward(depthwise_.forward(h, mode), mode);
    return add(h, branch);
  }

  void collect(const std::string& prefix, StateList<T>& out) override {
    head_.collect(prefix + ".head", out);
    depthwise_.collect(prefix + ".depthwise", out);
    pointwise_.collect(prefix + ".pointwise", out);
  }

  const char* kind() const override { return "pfc"; }

  ConvUnit<T>& head() { return head_; }
  ConvUnit<T>& depthwise() { return depthwise_; }
  ConvUnit<T>& pointwise() { return pointwise_; }

 private:
  std::size_t in_, out_, kernel_;
  ConvUnit<T> head_, depthwise_, pointwise_;
};

// ---------------------------------------------------------------------------

/// Intermediate maps of one CSA forward pass, for inspection in tests.
template <typename T>
struct CSATrace {
  Var<T> u1, u2, fused, pooled, logits, attention, combined, shortcut, output;
};

/// Compact split-attention block with two channel groups.
///
/// The input is split in half along channels. Group 1 runs 1x1 -> 3x3;
/// group 2 runs 1x1 -> 3x3, adds group 1's output, then a further 3x3. Both
/// map C/2 -> C' channels. The fused map U1 + U2 is pooled to per-channel
/// statistics, a conv-BN-ReLU-conv head turns those into 2*C' logits, and a
/// softmax across the two groups gives weights a1(c) + a2(c) = 1. The block
/// returns a1*U1 + a2*U2 + T(x), where T is the identity when shapes agree
/// and a strided 1x1 conv with BN otherwise.
template <typename T>
class CSABlock : public Block<T> {
 public:
  static constexpr std::size_t kGroups = 2;

  static std::size_t attention_width(std::size_t out) { return std::max<std::size_t>(out / 4, 32); }

  CSABlock(std::size_t in, std::size_t out, Rng& rng, std::size_t stride = 1) : in_(in), out_(out), stride_(stride) {
    if (in % kGroups != 0) throw ConfigError("csa: input channels must be even, got " + std::to_string(in));
    const std::size_t half = in / kGroups;
    const std::size_t hidden = attention_width(out);
    f1_reduce_ = ConvUnit<T>({half, out, 1, 1, 0}, rng);
    f1_conv_ = ConvUnit<T>({out, out, 3, stride, 1}, rng);
    f2_reduce_ = ConvUnit<T>({half, out, 1, 1, 0}, rng);
    f2_conv_ = ConvUnit<T>({out, out, 3, stride, 1}, rng);
    f2_fuse_ = ConvUnit<T>({out, out, 3, 1, 1}, rng);
    attn_reduce_ = ConvUnit<T>({out, hidden, 1, 1, 0}, rng);
    attn_expand_ = ConvUnit<T>({hidden, kGroups * out, 1, 1, 0, ConvKind::kDense, Post::kNone}, rng);
    if (in != out || stride != 1) {
      shortcut_.emplace(typename ConvUnit<T>::Spec{in, out, 1, stride, 0, ConvKind::kDense, Post::kNorm}, rng);
    }
  }

  Var<T> forward(const Var<T>& x, Mode mode) override { return forward(x, mode, nullptr); }

  Var<T> forward(const Var<T>& x, Mode mode, CSATrace<T>* trace) {
    if (x.shape().c != in_) {
      throw ShapeError("csa: input axis C = " + std::to_string(x.shape().c) + " but block expects " +
                       std::to_string(in_));
    }
    auto groups = split_channels(x, kGroups);
    Var<T> u1 = f1_conv_.forward(f1_reduce_.forward(groups[0], mode), mode);
    Var<T> g2 = f2_conv_.forward(f2_reduce_.forward(groups[1], mode), mode);
    Var<T> u2 = f2_fuse_.forward(add(g2, u1), mode);
    Var<T> fused = add(u1, u2);
    Var<T> pooled = global_avg_pool(fused);
    Var<T> logits = attn_expand_.forward(attn_reduce_.forward(pooled, mode), mode);
    Var<T> attention = softmax_over_groups(logits, kGroups);
    auto weights = split_channels(attention, kGroups);
    Var<T> combined = add(channel_scale(weights[0], u1), channel_scale(weights[1], u2));
    Var<T> skip = shortcut_ ? shortcut_->forward(x, mode) : x;
    Var<T> out = add(combined, skip);
    if (trace != nullptr) *trace = {u1, u2, fused, pooled, logits, attention, combined, skip, out};
    return out;
  }

  void collect(const std::string& prefix, StateList<T>& out) override {
    f1_reduce_.collect(prefix + ".f1_reduce", out);
    f1_conv_.collect(prefix + ".f1_conv", out);
    f2_reduce_.collect(prefix + ".f2_reduce", out);
    f2_conv_.collect(prefix + ".f2_conv", out);
    f2_fuse_.collect(prefix + ".f2_fuse", out);
    attn_reduce_.collect(prefix + ".attn_reduce", out);
    attn_expand_.collect(prefix + ".attn_expand", out);
    if (shortcut_) shortcut_->collect(prefix + ".shortcut", out);
  }

  const char* kind() const override { return "csa"; }
  bool identity_shortcut() const { return !shortcut_.has_value(); }

  /// Units whose outputs become U1 and U2.
  ConvUnit<T>& u1_unit() { return f1_conv_; }
  ConvUnit<T>& u2_unit() { return f2_fuse_; }

 private:
  std::size_t in_, out_, stride_;
  ConvUnit<T> f1_reduce_, f1_conv_, f2_reduce_, f2_conv_, f2_fuse_, attn_reduce_, attn_expand_;
  std::optional<ConvUnit<T>> shortcut_;
};

// ---------------------------------------------------------------------------

/// Two 3x3 conv-BN-ReLU units: the plain U-Net stage block.
template <typename T>
class DoubleConvBlock : public Block<T> {
 public:
  DoubleConvBlock(std::size_t in, std::size_t out, Rng& rng) {
    first_ = ConvUnit<T>({in, out, 3, 1, 1}, rng);
    second_ = ConvUnit<T>({out, out, 3, 1, 1}, rng);
  }

  Var<T> forward(const Var<T>& x, Mode mode) override { return second_.forward(first_.forward(x, mode), mode); }

  void collect(const std::string& prefix, StateList<T>& out) override {
    first_.collect(prefix + ".conv1", out);
    second_.collect(prefix + ".conv2", out);
  }

  const char* kind() const override { return "double_conv"; }

 private:
  ConvUnit<T> first_, second_;
};

/// Sum of trainable elements over a state list.
template <typename T>
std::size_t trainable_count(const StateList<T>& state) {
  std::size_t n = 0;
  for (const auto& s : state)
    if (s.param) n += s.param->numel();
  return n;
}

/// Zero every convolution weight and bias and every BN beta in `state`.
template <typename T>
void zero_branch_parameters(const StateList<T>& state) {
  for (const auto& s : state) {
    if (!s.param) continue;
    const std::string& n = s.name;
    const bool is_gamma = n.size() >= 9 && n.compare(n.size() - 9, 9, ".bn.gamma") == 0;
    if (!is_gamma) s.param->value.fill(T(0));
  }
}

}  // namespace dcsau

#endif  // DCSAU_NN_HPP
