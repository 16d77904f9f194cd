#ifndef DCSAU_MODEL_HPP
#define DCSAU_MODEL_HPP

#include <cstdint>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dcsau/labels.hpp"
#include "dcsau/nn.hpp"
#include "json.hpp"

namespace dcsau {

enum class Variant { kUnet, kUnetPfc, kUnetCsa, kDcsau };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kUnet:
      return "unet";
    case Variant::kUnetPfc:
      return "unet+pfc";
    case Variant::kUnetCsa:
      return "unet+csa";
    case Variant::kDcsau:
      return "dcsau";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::kUnet, Variant::kUnetPfc, Variant::kUnetCsa, Variant::kDcsau})
    if (to_string(v) == s) return v;
  throw ConfigError("variant: unknown value '" + std::string(s) + "' (expected unet, unet+pfc, unet+csa, dcsau)");
}

inline bool uses_pfc(Variant v) { return v == Variant::kUnetPfc || v == Variant::kDcsau; }
inline bool uses_csa(Variant v) { return v == Variant::kUnetCsa || v == Variant::kDcsau; }

/// Calibrated stage widths. Plain double-conv variants and split-attention
/// variants get separate schedules; see docs/calibration.md for the sweep.
inline std::vector<std::size_t> default_widths(Variant v) {
  if (uses_csa(v)) return {14, 28, 56, 112, 224};
  return {42, 84, 168, 336, 672};
}

struct ModelConfig {
  Variant variant = Variant::kDcsau;
  std::vector<std::size_t> stage_widths = default_widths(Variant::kDcsau);
  std::size_t pfc_kernel = 7;
  std::size_t num_classes = 1;

  static ModelConfig defaults(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.stage_widths = default_widths(v);
    return c;
  }

  std::string final_activation() const { return num_classes == 1 ? "sigmoid" : "softmax"; }
  std::size_t stages() const { return stage_widths.size(); }
  /// Input H and W must be multiples of this.
  std::size_t divisor() const { return std::size_t{1} << (stage_widths.size() - 1); }

  void validate() const {
    if (stage_widths.empty()) throw ConfigError("stage_widths: at least one stage required");
    for (std::size_t i = 0; i < stage_widths.size(); ++i) {
      const std::size_t w = stage_widths[i];
      if (w == 0 || w % 2 != 0) {
        throw ConfigError("stage_widths[" + std::to_string(i) + "]: must be positive and even, got " +
                          std::to_string(w));
      }
    }
    if (pfc_kernel != 3 && pfc_kernel != 5 && pfc_kernel != 7 && pfc_kernel != 9) {
      throw ConfigError("pfc_kernel: must be one of 3, 5, 7, 9, got " + std::to_string(pfc_kernel));
    }
    if (num_classes == 0 || num_classes > 255) {
      throw ConfigError("num_classes: must be in [1, 255], got " + std::to_string(num_classes));
    }
  }

  /// Throws ShapeError when an N x 3 x H x W input cannot pass through.
  void check_input(std::size_t c, std::size_t h, std::size_t w) const {
    if (c != 3) throw ShapeError("input: expected 3 channels, got " + std::to_string(c));
    const std::size_t d = divisor();
    if (h == 0 || h % d != 0) {
      throw ShapeError("input: height " + std::to_string(h) + " is not divisible by " + std::to_string(d));
    }
    if (w == 0 || w % d != 0) {
      throw ShapeError("input: width " + std::to_string(w) + " is not divisible by " + std::to_string(d));
    }
  }

  nlohmann::json to_json() const {
    return {{"variant", std::string(to_string(variant))},
            {"stage_widths", stage_widths},
            {"pfc_kernel", pfc_kernel},
            {"num_classes", num_classes},
            {"final_activation", final_activation()}};
  }

  /// Fields absent from `j` keep their current values. Unknown keys are rejected.
  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
    static const std::set<std::string> known{"variant", "stage_widths", "pfc_kernel", "num_classes",
                                             "final_activation"};
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw ConfigError("model config: unknown key '" + key + "'");
    }
    try {
      if (j.contains("variant")) {
        variant = parse_variant(j.at("variant").get<std::string>());
        if (!j.contains("stage_widths")) stage_widths = default_widths(variant);
      }
      if (j.contains("stage_widths")) stage_widths = j.at("stage_widths").get<std::vector<std::size_t>>();
      if (j.contains("pfc_kernel")) pfc_kernel = j.at("pfc_kernel").get<std::size_t>();
      if (j.contains("num_classes")) num_classes = j.at("num_classes").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("model config: ") + e.what());
    }
    if (j.contains("final_activation") && j.at("final_activation") != final_activation()) {
      throw ConfigError("final_activation: must be '" + final_activation() + "' for num_classes = " +
                        std::to_string(num_classes));
    }
    validate();
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.merge_json(j);
    return c;
  }
};

/// Parse "16,32,64".
inline std::vector<std::size_t> parse_widths(std::string_view s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = std::min(s.find(',', pos), s.size());
    const std::string part(s.substr(pos, comma - pos));
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("stage_widths: cannot parse '" + std::string(s) + "'");
    }
    out.push_back(std::stoul(part));
    pos = comma + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------

/// U-shaped segmentation network. Encoder stage 0 is a PFC or double-conv
/// block at full resolution; stage i > 0 max-pools then applies a CSA or
/// double-conv block. Decoder stage i upsamples stage i + 1's output,
/// concatenates encoder stage i's output in front of it, and maps back to
/// that stage's width. A 1x1 convolution produces per-class logits.
template <typename T>
class BasicModel {
 public:
  BasicModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const auto& w = config_.stage_widths;
    const Variant v = config_.variant;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (i == 0) {
        if (uses_pfc(v)) {
          encoder_.push_back(std::make_unique<PFCBlock<T>>(3, w[0], config_.pfc_kernel, rng));
        } else {
          encoder_.push_back(std::make_unique<DoubleConvBlock<T>>(3, w[0], rng));
        }
      } else {
        encoder_.push_back(make_stage(w[i - 1], w[i], rng));
      }
    }
    for (std::size_t i = 0; i + 1 < w.size(); ++i) decoder_.push_back(make_stage(w[i] + w[i + 1], w[i], rng));
    head_ = ConvUnit<T>({w[0], config_.num_classes, 1, 1, 0, ConvKind::kDense, Post::kNone}, rng);
  }

  const ModelConfig& config() const { return config_; }

  /// Logits [N, num_classes, H, W].
  Var<T> forward(const Var<T>& x, Mode mode) {
    const Shape s = x.shape();
    config_.check_input(s.c, s.h, s.w);
    std::vector<Var<T>> skips;
    Var<T> h = x;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      if (i > 0) h = maxpool2d(h);
      h = encoder_[i]->forward(h, mode);
      skips.push_back(h);
    }
    for (std::size_t i = decoder_.size(); i-- > 0;) {
      h = decoder_[i]->forward(concat_channels(skips[i], upsample2x(h)), mode);
    }
    return head_.forward(h, mode);
  }

  /// Eval-mode logits without recording gradients.
  BasicTensor<T> infer(const BasicTensor<T>& x) {
    BasicGraph<T> g(false);
    return forward(g.leaf(x), Mode::kEval).value();
  }

  /// All parameters and buffers, in construction order, with hierarchical names.
  StateList<T> state() {
    StateList<T> out;
    for (std::size_t i = 0; i < encoder_.size(); ++i)
      encoder_[i]->collect("encoder.stage" + std::to_string(i) + "." + encoder_[i]->kind(), out);
    for (std::size_t i = 0; i < decoder_.size(); ++i)
      decoder_[i]->collect("decoder.stage" + std::to_string(i) + "." + decoder_[i]->kind(), out);
    head_.collect("head", out);
    return out;
  }

  std::vector<BasicParameter<T>*> parameters() {
    std::vector<BasicParameter<T>*> out;
    for (const auto& s : state())
      if (s.param) out.push_back(s.param);
    return out;
  }

  std::size_t param_count() { return trainable_count(state()); }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  Block<T>& encoder(std::size_t i) { return *encoder_.at(i); }
  Block<T>& decoder(std::size_t i) { return *decoder_.at(i); }
  std::size_t encoder_stages() const { return encoder_.size(); }
  std::size_t decoder_stages() const { return decoder_.size(); }

 private:
  std::unique_ptr<Block<T>> make_stage(std::size_t in, std::size_t out, Rng& rng) {
    if (uses_csa(config_.variant)) return std::make_unique<CSABlock<T>>(in, out, rng);
    return std::make_unique<DoubleConvBlock<T>>(in, out, rng);
  }

  ModelConfig config_;
  std::vector<std::unique_ptr<Block<T>>> encoder_;
  std::vector<std::unique_ptr<Block<T>>> decoder_;
  ConvUnit<T> head_;
};

using Model = BasicModel<float>;

// ---------------------------------------------------------------------------
// Checkpoints

inline bool is_buffer_name(std::string_view name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

inline Archive to_archive(Model& model) {
  Archive a;
  for (const auto& s : model.state()) a.add(s.name, s.tensor());
  return a;
}

/// Copy archive tensors into the model. Names, order, and shapes must match
/// exactly; the first mismatch is reported as a ConfigError.
inline void load_archive(Model& model, const Archive& a) {
  auto state = model.state();
  const auto& entries = a.entries();
  const std::size_t n = std::min(state.size(), entries.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (state[i].name != entries[i].name) {
      throw ConfigError("checkpoint mismatch at tensor " + std::to_string(i) + ": model expects '" + state[i].name +
                        "', checkpoint has '" + entries[i].name + "'");
    }
    if (!(state[i].tensor().shape() == entries[i].tensor.shape())) {
      throw ConfigError("checkpoint mismatch for tensor '" + state[i].name + "': model shape " +
                        state[i].tensor().shape().str() + ", checkpoint shape " + entries[i].tensor.shape().str());
    }
  }
  if (state.size() != entries.size()) {
    const std::string first = state.size() > entries.size() ? state[n].name : entries[n].name;
    throw ConfigError("checkpoint mismatch: model has " + std::to_string(state.size()) + " tensors, checkpoint has " +
                      std::to_string(entries.size()) + " (first unmatched: '" + first + "')");
  }
  for (std::size_t i = 0; i < n; ++i) state[i].tensor() = entries[i].tensor;
}

inline void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path);
  to_archive(model).write(os);
}

inline Archive read_archive_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  return Archive::read(is);
}

// ---------------------------------------------------------------------------

/// Threshold (binary) or argmax (multiclass) logits [N, K, H, W] into one
/// label map per batch item. Binary: sigmoid(logit) >= threshold -> 1.
/// Multiclass ties go to the lowest class index.
template <typename T>
std::vector<LabelMap> predict_mask(const BasicTensor<T>& logits, double threshold = 0.5) {
  const Shape s = logits.shape();
  std::vector<LabelMap> out;
  for (std::size_t n = 0; n < s.n; ++n) {
    LabelMap m(s.h, s.w);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      if (s.c == 1) {
        const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.plane(n, 0)[i])));
        m.labels[i] = p >= threshold ? 1 : 0;
      } else {
        std::size_t best = 0;
        for (std::size_t k = 1; k < s.c; ++k)
          if (logits.plane(n, k)[i] > logits.plane(n, best)[i]) best = k;
        m.labels[i] = static_cast<std::uint8_t>(best);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace dcsau

#endif  // DCSAU_MODEL_HPP
