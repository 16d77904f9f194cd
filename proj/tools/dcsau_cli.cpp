// Command-line front end: summary, train, eval, predict, selftest.
//
// Exit codes: 0 success, 1 self-test failure or per-file predict errors,
// 2 configuration or shape errors, 3 unreadable data, 4 numeric divergence.

#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dcsau/analysis.hpp"
#include "dcsau/data.hpp"
#include "dcsau/selftest.hpp"
#include "dcsau/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

const std::set<std::string> kTrainKeys{"lr", "batch_size", "epochs", "steps", "size", "augment"};

/// Model and training settings gathered from the config file, --set
/// overrides and dedicated flags, in increasing precedence.
struct Settings {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string variant;
  std::string widths;
  std::size_t pfc_kernel = 7;
  std::size_t num_classes = 1;

  CLI::Option* variant_opt = nullptr;
  CLI::Option* widths_opt = nullptr;
  CLI::Option* kernel_opt = nullptr;
  CLI::Option* classes_opt = nullptr;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "JSON settings file (model keys plus lr, batch_size, epochs, steps, size, augment)");
    app->add_option("--set", overrides, "Override one setting, key=value (repeatable)");
    variant_opt = app->add_option("--variant", variant, "unet | unet+pfc | unet+csa | dcsau");
    widths_opt = app->add_option("--widths", widths, "Stage widths, e.g. 16,32,64");
    kernel_opt = app->add_option("--pfc-kernel", pfc_kernel, "Depthwise kernel of the first-stage block (3, 5, 7, 9)");
    classes_opt = app->add_option("--num-classes", num_classes, "Output channels (1 = binary sigmoid)");
  }

  /// Flat JSON of every file/override setting.
  json merged() const {
    json j = json::object();
    if (!config_path.empty()) {
      std::ifstream is(config_path);
      if (!is) throw dcsau::ConfigError("config: cannot open " + config_path);
      try {
        j = json::parse(is);
      } catch (const json::exception& e) {
        throw dcsau::ConfigError("config " + config_path + ": " + e.what());
      }
      if (!j.is_object()) throw dcsau::ConfigError("config " + config_path + ": expected a JSON object");
    }
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw dcsau::ConfigError("--set: expected key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      json v = json::parse(value, nullptr, false);
      if (v.is_discarded()) v = value;
      if (key == "stage_widths" && v.is_string()) v = dcsau::parse_widths(value);
      j[key] = v;
    }
    return j;
  }

  dcsau::ModelConfig model() const {
    json j = merged();
    json model = json::object();
    for (const auto& [k, v] : j.items())
      if (!kTrainKeys.count(k)) model[k] = v;
    if (variant_opt->count()) {
      model["variant"] = variant;
      if (!widths_opt->count() && !j.contains("stage_widths")) model.erase("stage_widths");
    }
    if (widths_opt->count()) model["stage_widths"] = dcsau::parse_widths(widths);
    if (kernel_opt->count()) model["pfc_kernel"] = pfc_kernel;
    if (classes_opt->count()) {
      model["num_classes"] = num_classes;
      model.erase("final_activation");
    }
    return dcsau::ModelConfig::from_json(model);
  }

  template <typename V>
  V train_value(const std::string& key, V fallback) const {
    const json j = merged();
    if (!j.contains(key)) return fallback;
    try {
      return j.at(key).get<V>();
    } catch (const json::exception& e) {
      throw dcsau::ConfigError(key + ": " + e.what());
    }
  }
};

std::array<std::size_t, 3> parse_input(const std::string& s) {
  std::array<std::size_t, 3> out{};
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t x = i < 2 ? s.find('x', pos) : s.size();
    const std::string part = s.substr(pos, x == std::string::npos ? std::string::npos : x - pos);
    if (x == std::string::npos || part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw dcsau::ConfigError("--input: expected CxHxW, got '" + s + "'");
    }
    out[i] = std::stoul(part);
    pos = x + 1;
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw dcsau::DataError("cannot write " + path.string());
  os << text;
}

std::vector<dcsau::Sample> load_manifest_samples(const std::string& path, std::size_t num_classes, std::size_t size) {
  std::vector<dcsau::Sample> out;
  for (const auto& e : dcsau::load_manifest(path)) {
    dcsau::Sample s = dcsau::load_sample(e, num_classes);
    if (size) s = dcsau::resize(s, size, size);
    out.push_back(std::move(s));
  }
  return out;
}

dcsau::Model load_model(const dcsau::ModelConfig& cfg, const std::string& checkpoint) {
  dcsau::Model m(cfg, 0);
  dcsau::load_archive(m, dcsau::read_archive_file(checkpoint));
  return m;
}

// ---------------------------------------------------------------------------

int cmd_summary(const Settings& st, const std::string& input, const std::string& format, const std::string& json_out,
                bool calibration) {
  namespace an = dcsau::analysis;
  if (calibration) {
    for (bool csa : {false, true}) {
      const auto best = an::calibrate_family(csa);
      std::cout << (csa ? "split-attention family: " : "plain family: ");
      for (std::size_t i = 0; i < best.widths.size(); ++i) std::cout << (i ? "," : "") << best.widths[i];
      std::cout << "  max param error " << best.max_param_error << "  objective " << best.objective << '\n';
    }
    return 0;
  }
  const dcsau::ModelConfig cfg = st.model();
  const auto [c, h, w] = parse_input(input);
  const an::CostReport r = an::cost_report(cfg, c, h, w);
  const json j = an::render_json(r, cfg);
  if (format == "text" || format == "both") std::cout << an::render_text(r);
  if (format == "json" || format == "both") std::cout << j.dump(2) << '\n';
  if (!json_out.empty()) write_text(json_out, j.dump(2) + "\n");
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string valid_manifest;
  std::size_t synthetic = 0;
  std::string out;
  std::uint64_t seed = 42;
  std::size_t size = 0;
  std::size_t epochs = 200;
  std::size_t steps = 0;
  std::size_t batch_size = 4;
  double lr = 1e-4;
  bool augment = false;
  bool quiet = false;
  CLI::Option* size_opt = nullptr;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* augment_opt = nullptr;
};

int cmd_train(const Settings& st, TrainArgs a) {
  const dcsau::ModelConfig cfg = st.model();
  // Settings file / --set values apply unless the dedicated flag was given.
  if (!a.size_opt->count()) a.size = st.train_value<std::size_t>("size", a.size);
  if (!a.epochs_opt->count()) a.epochs = st.train_value<std::size_t>("epochs", a.epochs);
  if (!a.steps_opt->count()) a.steps = st.train_value<std::size_t>("steps", a.steps);
  if (!a.batch_opt->count()) a.batch_size = st.train_value<std::size_t>("batch_size", a.batch_size);
  if (!a.lr_opt->count()) a.lr = st.train_value<double>("lr", a.lr);
  if (!a.augment_opt->count()) a.augment = st.train_value<bool>("augment", a.augment);
  if (a.lr <= 0) throw dcsau::ConfigError("lr: must be positive");

  const fs::path out(a.out);
  fs::create_directories(out);
  std::vector<dcsau::Sample> train_set, valid_set;
  if (a.synthetic) {
    const std::size_t size = a.size ? a.size : 64;
    train_set = dcsau::synth_dataset(a.synthetic, size, size, cfg.num_classes, a.seed);
    valid_set = train_set;
    dcsau::write_dataset(out / "synthetic", train_set, cfg.num_classes);
  } else {
    auto all = load_manifest_samples(a.manifest, cfg.num_classes, a.size);
    if (!a.valid_manifest.empty()) {
      train_set = std::move(all);
      valid_set = load_manifest_samples(a.valid_manifest, cfg.num_classes, a.size);
    } else {
      std::vector<std::string> ids;
      for (const auto& s : all) ids.push_back(s.id);
      dcsau::SplitSpec spec;
      spec.seed = a.seed;
      const dcsau::Split sp = dcsau::split(ids, spec);
      dcsau::write_split(out / "split", sp);
      const std::set<std::string> tr(sp.train.begin(), sp.train.end()), va(sp.valid.begin(), sp.valid.end());
      for (auto& s : all) {
        if (tr.count(s.id)) train_set.push_back(s);
        if (va.count(s.id)) valid_set.push_back(s);
      }
    }
  }
  for (const auto& s : train_set) cfg.check_input(s.image.shape().c, s.height(), s.width());
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");

  dcsau::Model model(cfg, a.seed);
  dcsau::TrainOptions opt;
  opt.epochs = a.steps && !a.epochs_opt->count() ? std::numeric_limits<std::size_t>::max() : a.epochs;
  opt.max_steps = a.steps;
  opt.batch_size = a.batch_size;
  opt.lr = a.lr;
  opt.seed = a.seed;
  opt.augment = a.augment;
  opt.out_dir = out;
  if (!a.quiet) {
    opt.on_epoch = [](const dcsau::EpochRecord& r) {
      std::fprintf(stderr, "epoch %zu  steps %zu  train %.4f  valid %.4f  f1 %.4f  lr %.1e\n", r.epoch, r.steps,
                   r.train_loss, r.valid_loss, r.valid.f1, r.lr);
    };
  }
  const dcsau::TrainResult res = dcsau::train(model, train_set, valid_set, opt);
  std::cout << "steps " << res.steps << ", epochs " << res.log.size() << '\n';
  if (!res.log.empty()) {
    const dcsau::MetricsReport rep = dcsau::evaluate(model, train_set);
    std::cout << "training-set metrics (final weights):\n" << rep.to_table();
    if (!dcsau::smoothed_monotone(res.step_losses)) {
      std::cout << "note: step loss is not smoothed-monotone after step 50; inspect log.jsonl\n";
    }
  }
  return 0;
}

int cmd_eval(const Settings& st, const std::string& checkpoint, const std::string& manifest, std::size_t size,
             const std::string& json_out) {
  const dcsau::ModelConfig cfg = st.model();
  dcsau::Model model = load_model(cfg, checkpoint);
  const auto samples = load_manifest_samples(manifest, cfg.num_classes, size);
  const dcsau::MetricsReport rep = dcsau::evaluate(model, samples);
  std::cout << rep.to_table();
  if (rep.skipped) std::cout << "skipped " << rep.skipped << " of " << samples.size() << " samples\n";
  if (!json_out.empty()) write_text(json_out, rep.to_json().dump(2) + "\n");
  return 0;
}

int cmd_predict(const Settings& st, const std::string& checkpoint, const std::vector<std::string>& images,
                const std::string& out_dir, std::size_t size) {
  const dcsau::ModelConfig cfg = st.model();
  dcsau::Model model = load_model(cfg, checkpoint);
  fs::create_directories(out_dir);
  int failures = 0;
  for (const auto& path : images) {
    try {
      dcsau::Tensor img = dcsau::load_ppm(path);
      if (size) img = dcsau::resize_image(img, size, size);
      const auto mask = dcsau::predict_mask(model.infer(img));
      const fs::path dst = fs::path(out_dir) / (fs::path(path).stem().string() + "_pred.pgm");
      dcsau::save_pgm(dst.string(), dcsau::mask_to_bytes(mask[0], cfg.num_classes));
      std::cout << path << " -> " << dst.string() << '\n';
    } catch (const std::exception& e) {
      std::cerr << "error: " << path << ": " << e.what() << '\n';
      ++failures;
    }
  }
  return failures ? kExitData : 0;
}

int cmd_selftest(const std::string& fault) {
  if (fault == "conv-sign") {
    dcsau::fault::conv_sign_flip() = true;
  } else if (!fault.empty()) {
    throw dcsau::ConfigError("--inject-fault: unknown fault '" + fault + "' (known: conv-sign)");
  }
  const auto start = std::chrono::steady_clock::now();
  const bool ok = dcsau::run_selftest(std::cout);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << (ok ? "selftest passed" : "selftest FAILED") << " in " << secs << " s\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"U-shaped segmentation network with split-attention blocks: costs, training, evaluation"};
  app.require_subcommand(1, 1);
  std::uint64_t seed = 42;

  Settings summary_settings, train_settings, eval_settings, predict_settings;

  auto* summary = app.add_subcommand("summary", "Per-layer parameter and MAC table");
  summary_settings.add_to(summary);
  std::string input = "3x256x256", format = "text", summary_json;
  bool calibration = false;
  summary->add_option("--input", input, "Input shape CxHxW")->capture_default_str();
  summary->add_option("--format", format, "text | json | both")->check(CLI::IsMember({"text", "json", "both"}))->capture_default_str();
  summary->add_option("--json-out", summary_json, "Also write the JSON report here");
  summary->add_flag("--calibration", calibration, "Print the calibrated width schedules and exit");

  auto* train = app.add_subcommand("train", "Train on a manifest or a synthetic set");
  train_settings.add_to(train);
  TrainArgs ta;
  auto* data_group = train->add_option_group("data");
  data_group->add_option("--manifest", ta.manifest, "Dataset manifest (split 72/18/10 by seed)");
  data_group->add_option("--synthetic", ta.synthetic, "Generate N synthetic samples; train and validate on them");
  data_group->require_option(1);
  train->add_option("--valid-manifest", ta.valid_manifest, "Explicit validation manifest (disables splitting)");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--seed", ta.seed, "Seed for every random choice")->capture_default_str();
  ta.size_opt = train->add_option("--size", ta.size, "Resize (or generate) samples to SxS");
  ta.epochs_opt = train->add_option("--epochs", ta.epochs, "Epochs (unbounded when only --steps is given)")->capture_default_str();
  ta.steps_opt = train->add_option("--steps", ta.steps, "Stop after this many optimizer steps");
  ta.batch_opt = train->add_option("--batch-size", ta.batch_size, "Mini-batch size")->capture_default_str();
  ta.lr_opt = train->add_option("--lr", ta.lr, "Adam learning rate")->capture_default_str();
  ta.augment_opt = train->add_flag("--augment", ta.augment, "Random flip, rotation and cutout");
  train->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");

  auto* eval = app.add_subcommand("eval", "Per-image metrics for a checkpoint on a manifest");
  eval_settings.add_to(eval);
  std::string eval_ckpt, eval_manifest, eval_json;
  std::size_t eval_size = 0;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint archive")->required();
  eval->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
  eval->add_option("--size", eval_size, "Resize samples to SxS first");
  eval->add_option("--json-out", eval_json, "Write the JSON report here");
  eval->add_option("--seed", seed, "Unused; accepted for uniformity")->capture_default_str();

  auto* predict = app.add_subcommand("predict", "Write predicted masks as P5 files");
  predict_settings.add_to(predict);
  std::string pred_ckpt, pred_out;
  std::vector<std::string> pred_images;
  std::size_t pred_size = 0;
  predict->add_option("--checkpoint", pred_ckpt, "Checkpoint archive")->required();
  predict->add_option("--out", pred_out, "Output directory")->required();
  predict->add_option("--size", pred_size, "Resize images to SxS first");
  predict->add_option("images", pred_images, "P6 images")->required();
  predict->add_option("--seed", seed, "Unused; accepted for uniformity")->capture_default_str();

  auto* selftest = app.add_subcommand("selftest", "Oracle, gradient and invariant checks");
  std::string fault;
  selftest->add_option("--inject-fault", fault, "Test hook: conv-sign negates every conv2d output");
  selftest->add_option("--seed", seed, "Unused; accepted for uniformity")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*summary) return cmd_summary(summary_settings, input, format, summary_json, calibration);
    if (*train) return cmd_train(train_settings, ta);
    if (*eval) return cmd_eval(eval_settings, eval_ckpt, eval_manifest, eval_size, eval_json);
    if (*predict) return cmd_predict(predict_settings, pred_ckpt, pred_images, pred_out, pred_size);
    if (*selftest) return cmd_selftest(fault);
  } catch (const dcsau::ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const dcsau::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const dcsau::DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const dcsau::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
