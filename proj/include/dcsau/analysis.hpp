#ifndef DCSAU_ANALYSIS_HPP
#define DCSAU_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dcsau/model.hpp"
#include "json.hpp"

// Execution-free parameter and MAC accounting. Nothing here touches tensors:
// every count is derived from the ModelConfig alone, so it can be checked
// against an enumeration of a built model.
//
// Convention: one multiply-accumulate counts as one FLOP. Convolutions cost
// Cout * (Cin / groups) * K^2 * Hout * Wout; batch norm, activations,
// pooling, upsampling, residual adds and the attention softmax cost one op
// per output element; attention reweighting a1*U1 + a2*U2 costs three;
// global average pooling one per input element; concatenation and channel
// splits are free. The final sigmoid/softmax is not counted.

namespace dcsau::analysis {

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<LayerCost> rows;

  std::uint64_t total_params() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) s += r.params;
    return s;
  }
  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (const auto& r : rows) s += r.macs;
    return s;
  }
};

namespace detail {

struct Unit {
  std::size_t in, out, kernel, stride = 1;
  bool depthwise = false;
  bool norm = true;
  bool relu = true;
};

class Builder {
 public:
  explicit Builder(CostReport& r) : r_(r) {}

  /// Adds one row for a conv unit at input extents h x w; returns output extents.
  std::pair<std::size_t, std::size_t> unit(const std::string& name, const Unit& u, std::size_t h, std::size_t w) {
    const std::size_t pad = u.kernel / 2;
    const std::size_t ho = (h + 2 * pad - u.kernel) / u.stride + 1;
    const std::size_t wo = (w + 2 * pad - u.kernel) / u.stride + 1;
    const std::uint64_t in_per_group = u.depthwise ? 1 : u.in;
    const std::uint64_t k2 = static_cast<std::uint64_t>(u.kernel) * u.kernel;
    const std::uint64_t elems = static_cast<std::uint64_t>(u.out) * ho * wo;
    LayerCost row{name, in_per_group * u.out * k2 + u.out, in_per_group * u.out * k2 * ho * wo};
    if (u.norm) {
      row.params += 2ull * u.out;
      row.macs += elems;
    }
    if (u.relu) row.macs += elems;
    r_.rows.push_back(row);
    return {ho, wo};
  }

  void op(const std::string& name, std::uint64_t ops) { r_.rows.push_back({name, 0, ops}); }

 private:
  CostReport& r_;
};

inline void pfc(Builder& b, const std::string& p, std::size_t in, std::size_t out, std::size_t k, std::size_t h,
                std::size_t w) {
  b.unit(p + ".head", {in, out, 3}, h, w);
  b.unit(p + ".depthwise", {out, out, k, 1, true}, h, w);
  b.unit(p + ".pointwise", {out, out, 1}, h, w);
  b.op(p + ".residual", static_cast<std::uint64_t>(out) * h * w);
}

inline void double_conv(Builder& b, const std::string& p, std::size_t in, std::size_t out, std::size_t h,
                        std::size_t w) {
  b.unit(p + ".conv1", {in, out, 3}, h, w);
  b.unit(p + ".conv2", {out, out, 3}, h, w);
}

inline void csa(Builder& b, const std::string& p, std::size_t in, std::size_t out, std::size_t h, std::size_t w) {
  const std::size_t half = in / 2;
  const std::size_t hidden = std::max<std::size_t>(out / 4, 32);
  const std::uint64_t elems = static_cast<std::uint64_t>(out) * h * w;
  b.unit(p + ".f1_reduce", {half, out, 1}, h, w);
  b.unit(p + ".f1_conv", {out, out, 3}, h, w);
  b.unit(p + ".f2_reduce", {half, out, 1}, h, w);
  b.unit(p + ".f2_conv", {out, out, 3}, h, w);
  b.op(p + ".f2_combine", elems);
  b.unit(p + ".f2_fuse", {out, out, 3}, h, w);
  b.op(p + ".fuse", elems);
  b.op(p + ".pool", elems);
  b.unit(p + ".attn_reduce", {out, hidden, 1}, 1, 1);
  b.unit(p + ".attn_expand", {hidden, 2 * out, 1, 1, false, false, false}, 1, 1);
  b.op(p + ".softmax", 2ull * out);
  b.op(p + ".reweight", 3ull * elems);
  if (in != out) b.unit(p + ".shortcut", {in, out, 1, 1, false, true, false}, h, w);
  b.op(p + ".residual", elems);
}

}  // namespace detail

/// Per-layer costs for a 3 x H x W input (batch 1), in construction order.
inline CostReport cost_report(const ModelConfig& config, std::size_t channels, std::size_t height,
                              std::size_t width) {
  config.validate();
  config.check_input(channels, height, width);
  CostReport r;
  r.channels = channels;
  r.height = height;
  r.width = width;
  detail::Builder b(r);
  const auto& ws = config.stage_widths;
  const bool csa = uses_csa(config.variant);
  auto stage = [&](const std::string& p, std::size_t in, std::size_t out, std::size_t h, std::size_t w) {
    if (csa) {
      detail::csa(b, p + ".csa", in, out, h, w);
    } else {
      detail::double_conv(b, p + ".double_conv", in, out, h, w);
    }
  };
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const std::size_t h = height >> i, w = width >> i;
    const std::string p = "encoder.stage" + std::to_string(i);
    if (i == 0) {
      if (uses_pfc(config.variant)) {
        detail::pfc(b, p + ".pfc", channels, ws[0], config.pfc_kernel, h, w);
      } else {
        detail::double_conv(b, p + ".double_conv", channels, ws[0], h, w);
      }
    } else {
      b.op(p + ".maxpool", static_cast<std::uint64_t>(ws[i - 1]) * h * w);
      stage(p, ws[i - 1], ws[i], h, w);
    }
  }
  for (std::size_t i = ws.size() - 1; i-- > 0;) {
    const std::size_t h = height >> i, w = width >> i;
    const std::string p = "decoder.stage" + std::to_string(i);
    b.op(p + ".upsample", static_cast<std::uint64_t>(ws[i + 1]) * h * w);
    stage(p, ws[i] + ws[i + 1], ws[i], h, w);
  }
  b.unit("head", {ws[0], config.num_classes, 1, 1, false, false, false}, height, width);
  return r;
}

inline std::uint64_t count_params(const ModelConfig& config) {
  const std::size_t d = config.divisor();
  return cost_report(config, 3, d, d).total_params();
}

inline std::uint64_t count_flops(const ModelConfig& config, std::size_t channels, std::size_t height,
                                 std::size_t width) {
  return cost_report(config, channels, height, width).total_macs();
}

// ---------------------------------------------------------------------------
// Rendering

inline std::string group_digits(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline std::string render_text(const CostReport& r) {
  std::size_t name_w = 5;
  for (const auto& row : r.rows) name_w = std::max(name_w, row.name.size());
  std::ostringstream os;
  auto line = [&](const std::string& a, const std::string& b, const std::string& c) {
    os << a << std::string(name_w - a.size() + 2, ' ');
    os << std::string(b.size() < 14 ? 14 - b.size() : 0, ' ') << b << "  ";
    os << std::string(c.size() < 18 ? 18 - c.size() : 0, ' ') << c << '\n';
  };
  os << "input " << r.channels << 'x' << r.height << 'x' << r.width << '\n';
  line("layer", "params", "MACs");
  for (const auto& row : r.rows) line(row.name, group_digits(row.params), group_digits(row.macs));
  line("total", group_digits(r.total_params()), group_digits(r.total_macs()));
  char buf[128];
  std::snprintf(buf, sizeof buf, "totals: %.3fM params, %.3f GMac\n", static_cast<double>(r.total_params()) / 1e6,
                static_cast<double>(r.total_macs()) / 1e9);
  os << buf;
  return os.str();
}

inline nlohmann::json render_json(const CostReport& r, const ModelConfig& config) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back({{"name", row.name}, {"params", row.params}, {"macs", row.macs}});
  return {{"config", config.to_json()},
          {"input", {r.channels, r.height, r.width}},
          {"rows", rows},
          {"total_params", r.total_params()},
          {"total_macs", r.total_macs()},
          {"gmacs", static_cast<double>(r.total_macs()) / 1e9}};
}

// ---------------------------------------------------------------------------
// Width calibration against reference cost figures (3 x 256 x 256).

struct CostTarget {
  Variant variant;
  double params;  ///< parameters
  double gmacs;   ///< FLOPs column, read as GMac
};

inline const std::vector<CostTarget>& reference_targets() {
  static const std::vector<CostTarget> t{{Variant::kUnet, 13.40e6, 31.11},
                                         {Variant::kUnetPfc, 13.37e6, 29.70},
                                         {Variant::kUnetCsa, 2.62e6, 8.33},
                                         {Variant::kDcsau, 2.60e6, 6.91}};
  return t;
}

inline constexpr double kParamTolerance = 0.08;

struct CalibrationCandidate {
  std::vector<std::size_t> widths;
  double max_param_error = 0.0;  ///< worst |relative error| of params over the family
  double objective = 0.0;        ///< sum of squared log-ratios over params and GMac
};

/// Geometric five-stage schedules base * 2^i, even base in [8, 96]. The
/// depth is fixed at four downsamplings; only the width is searched.
inline std::vector<std::vector<std::size_t>> candidate_schedules() {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t base = 8; base <= 96; base += 2) {
    std::vector<std::size_t> w;
    for (std::size_t i = 0; i < 5; ++i) w.push_back(base << i);
    out.push_back(std::move(w));
  }
  return out;
}

/// Scores every candidate schedule for one block family (plain or CSA)
/// against that family's two reference rows.
inline std::vector<CalibrationCandidate> sweep_family(bool csa_family) {
  std::vector<CalibrationCandidate> out;
  for (const auto& widths : candidate_schedules()) {
    CalibrationCandidate c{widths, 0.0, 0.0};
    for (const auto& t : reference_targets()) {
      if (uses_csa(t.variant) != csa_family) continue;
      ModelConfig cfg = ModelConfig::defaults(t.variant);
      cfg.stage_widths = widths;
      const double p = static_cast<double>(count_params(cfg));
      const double f = static_cast<double>(count_flops(cfg, 3, 256, 256)) / 1e9;
      c.max_param_error = std::max(c.max_param_error, std::abs(p / t.params - 1.0));
      c.objective += std::pow(std::log(p / t.params), 2) + std::pow(std::log(f / t.gmacs), 2);
    }
    out.push_back(std::move(c));
  }
  return out;
}

/// Best schedule: among candidates whose parameter counts are all within
/// tolerance, the one with the lowest joint objective.
inline CalibrationCandidate calibrate_family(bool csa_family) {
  CalibrationCandidate best{{}, 0.0, std::numeric_limits<double>::infinity()};
  for (auto& c : sweep_family(csa_family)) {
    if (c.max_param_error > kParamTolerance) continue;
    if (c.objective < best.objective) best = c;
  }
  return best;
}

}  // namespace dcsau::analysis

#endif  // DCSAU_ANALYSIS_HPP
