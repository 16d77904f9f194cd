// Fits a small model to eight synthetic 64x64 samples and reports the
// training-set metrics. Usage: example_overfit [steps]

#include <cstdlib>
#include <iostream>

#include "dcsau/train.hpp"

int main(int argc, char** argv) {
  using namespace dcsau;
  const auto data = synth_dataset(8, 64, 64, 1, 42);
  ModelConfig cfg = ModelConfig::defaults(Variant::kDcsau);
  cfg.stage_widths = {16, 32, 64};
  Model model(cfg, 42);

  TrainOptions opt;
  opt.epochs = 100000;
  opt.max_steps = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 300;
  opt.on_epoch = [](const EpochRecord& r) {
    if (r.epoch % 25 == 0) std::cout << "step " << r.steps << "  loss " << r.train_loss << '\n';
  };
  train(model, data, data, opt);
  std::cout << evaluate(model, data).to_table();
}
