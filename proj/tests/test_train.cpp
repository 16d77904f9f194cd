#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dcsau/train.hpp"

using namespace dcsau;
namespace fs = std::filesystem;

namespace {

std::vector<NamedParam> one_param(Parameter& p) { return {{"p", &p}}; }

ModelConfig tiny() {
  ModelConfig c = ModelConfig::defaults(Variant::kDcsau);
  c.stage_widths = {8, 16};
  c.pfc_kernel = 3;
  return c;
}

std::string read_all(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Adam, FirstStepWithUnitGradient) {
  Parameter p(Tensor(Shape{1, 1, 1, 4}, 0.5f));
  p.grad.fill(1.0f);
  AdamState st;
  adam_step(st, one_param(p));
  EXPECT_EQ(st.t, 1u);
  for (float v : p.value.vec()) EXPECT_NEAR(v, 0.5 - 1e-4 / (1 + 1e-8), 1e-7);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Parameter p(Tensor(Shape{1, 1, 1, 4}, 0.5f));
  AdamState st;
  for (int i = 0; i < 3; ++i) adam_step(st, one_param(p));
  for (float v : p.value.vec()) EXPECT_EQ(v, 0.5f);
  EXPECT_EQ(st.t, 3u);
}

TEST(Adam, IdenticalStepsAreDeterministic) {
  Parameter a(Tensor(Shape{1, 1, 2, 2}, 0.1f)), b(Tensor(Shape{1, 1, 2, 2}, 0.1f));
  AdamState sa, sb;
  for (int i = 0; i < 5; ++i) {
    a.grad.fill(0.3f * static_cast<float>(i));
    b.grad.fill(0.3f * static_cast<float>(i));
    adam_step(sa, one_param(a));
    adam_step(sb, one_param(b));
  }
  EXPECT_TRUE(a.value.bit_equal(b.value));
}

TEST(Adam, NonFiniteGradientIsRejectedWithName) {
  Parameter p(Tensor(Shape{1, 1, 1, 2}, 0.5f));
  p.grad[1] = std::nanf("");
  AdamState st;
  try {
    adam_step(st, {{"encoder.stage0.pfc.head.weight", &p}});
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.stage0.pfc.head.weight"), std::string::npos);
  }
  EXPECT_EQ(st.t, 0u);
  EXPECT_EQ(p.value[0], 0.5f);
}

TEST(Scheduler, ImprovingKeepsRate) {
  PlateauScheduler s;
  double lr = 1e-4;
  for (int i = 0; i < 30; ++i) lr = s.step(lr, 1.0 - 0.01 * i);
  EXPECT_EQ(lr, 1e-4);
}

TEST(Scheduler, ReducesAfterPatienceExceeded) {
  PlateauScheduler s;
  s.patience = 2;
  double lr = s.step(1e-4, 1.0);
  lr = s.step(lr, 1.0);
  lr = s.step(lr, 1.0);
  EXPECT_EQ(lr, 1e-4);
  lr = s.step(lr, 1.0);
  EXPECT_DOUBLE_EQ(lr, 1e-5);
}

TEST(Scheduler, FloorsAtMinimum) {
  PlateauScheduler s;
  s.patience = 0;
  double lr = 1e-7;
  s.step(lr, 1.0);
  for (int i = 0; i < 5; ++i) {
    const double next = s.step(lr, 1.0);
    EXPECT_LE(next, lr);
    lr = next;
  }
  EXPECT_EQ(lr, 1e-7);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const fs::path dir = fs::temp_directory_path() / "dcsau_train_zero";
  fs::remove_all(dir);
  const auto data = synth_dataset(4, 16, 16, 1, 1);
  Model m(tiny(), 5);
  const std::string init = to_archive(m).bytes();
  TrainOptions opt;
  opt.epochs = 0;
  opt.out_dir = dir;
  const TrainResult r = train(m, data, data, opt);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(read_all(dir / "best.ckpt"), init);
  EXPECT_EQ(read_all(dir / "final.ckpt"), init);
  EXPECT_EQ(read_all(dir / "log.jsonl"), "");
}

TEST(Train, EqualSeedsGiveIdenticalCheckpoints) {
  const auto data = synth_dataset(5, 16, 16, 1, 2);
  std::string ckpt[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = fs::temp_directory_path() / ("dcsau_train_det" + std::to_string(run));
    fs::remove_all(dir);
    Model m(tiny(), 11);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch_size = 2;
    opt.augment = true;
    opt.out_dir = dir;
    const TrainResult r = train(m, data, data, opt);
    EXPECT_EQ(r.log.size(), 2u);
    EXPECT_EQ(r.steps, 4u);  // 5 samples in batches of 2: the trailing single joins the previous batch
    ckpt[run] = read_all(dir / "best.ckpt") + read_all(dir / "final.ckpt");
  }
  EXPECT_EQ(ckpt[0], ckpt[1]);
}

TEST(Train, LogHasOneRecordPerEpochAndRespectsMaxSteps) {
  const fs::path dir = fs::temp_directory_path() / "dcsau_train_log";
  fs::remove_all(dir);
  const auto data = synth_dataset(4, 16, 16, 1, 3);
  Model m(tiny(), 1);
  TrainOptions opt;
  opt.epochs = 10;
  opt.max_steps = 5;
  opt.batch_size = 2;
  opt.out_dir = dir;
  const TrainResult r = train(m, data, data, opt);
  EXPECT_EQ(r.steps, 5u);
  EXPECT_EQ(r.log.size(), 3u);
  std::ifstream is(dir / "log.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"], n);
    EXPECT_TRUE(j.contains("valid_metrics"));
    ++n;
  }
  EXPECT_EQ(n, 3u);
}

TEST(Train, RejectsBadOptions) {
  const auto data = synth_dataset(4, 16, 16, 1, 3);
  Model m(tiny(), 1);
  TrainOptions opt;
  opt.batch_size = 5;
  EXPECT_THROW(train(m, data, data, opt), ConfigError);
  EXPECT_THROW(train(m, {}, data, {}), DataError);
}

TEST(Evaluate, UntrainedReportInRangeAndSkipsBadSamples) {
  auto data = synth_dataset(3, 16, 16, 1, 4);
  data.push_back({Tensor(Shape{1, 3, 5, 5}), LabelMap(5, 5), "odd"});
  Model m(tiny(), 1);
  std::ostringstream warn;
  const MetricsReport r = evaluate(m, data, &warn);
  EXPECT_EQ(r.images.size(), 3u);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_NE(warn.str().find("odd"), std::string::npos);
  for (const auto& s : r.aggregate) {
    EXPECT_GE(s.mean, 0.0);
    EXPECT_LE(s.mean, 1.0);
  }
}

TEST(Evaluate, CheckpointReloadGivesIdenticalReport) {
  const auto data = synth_dataset(4, 16, 16, 1, 6);
  Model m(tiny(), 1);
  TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 2;
  train(m, data, data, opt);
  const std::string before = evaluate(m, data).to_json().dump();
  Model n(tiny(), 99);
  load_archive(n, Archive::from_bytes(to_archive(m).bytes()));
  EXPECT_EQ(evaluate(n, data).to_json().dump(), before);
}

TEST(SmoothedMonotone, DetectsRises) {
  std::vector<double> down(200), up(200);
  for (std::size_t i = 0; i < 200; ++i) {
    down[i] = 1.0 / (1.0 + static_cast<double>(i)) + ((i % 2) ? 0.01 : 0.0);
    up[i] = i < 120 ? 1.0 - 0.005 * static_cast<double>(i) : 1.0;
  }
  EXPECT_TRUE(smoothed_monotone(down));
  EXPECT_FALSE(smoothed_monotone(up));
}
