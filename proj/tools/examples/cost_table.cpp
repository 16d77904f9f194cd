// Parameter and MAC totals for the four ablation variants at 256 and 512.

#include <cstdio>

#include "dcsau/analysis.hpp"

int main() {
  using namespace dcsau;
  std::printf("%-10s %12s %12s %12s\n", "variant", "params", "GMac@256", "GMac@512");
  for (Variant v : {Variant::kUnet, Variant::kUnetPfc, Variant::kUnetCsa, Variant::kDcsau}) {
    const ModelConfig cfg = ModelConfig::defaults(v);
    std::printf("%-10s %12llu %12.3f %12.3f\n", std::string(to_string(v)).c_str(),
                static_cast<unsigned long long>(analysis::count_params(cfg)),
                static_cast<double>(analysis::count_flops(cfg, 3, 256, 256)) / 1e9,
                static_cast<double>(analysis::count_flops(cfg, 3, 512, 512)) / 1e9);
  }
}
