#ifndef DCSAU_LABELS_HPP
#define DCSAU_LABELS_HPP

#include <cstdint>
#include <vector>

namespace dcsau {

/// Integer class map, row-major H x W.
struct LabelMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, std::uint8_t fill = 0)
      : h(height), w(width), labels(height * width, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * w + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * w + x]; }
  std::size_t size() const { return labels.size(); }
  bool operator==(const LabelMap&) const = default;
};

/// Number of distinct label values a model with `num_classes` output
/// channels predicts: a single sigmoid channel still means {0, 1}.
inline std::size_t label_classes(std::size_t num_classes) { return num_classes == 1 ? 2 : num_classes; }

}  // namespace dcsau

#endif  // DCSAU_LABELS_HPP
