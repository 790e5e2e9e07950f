#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segdiff/common.hpp"

namespace segdiff {

/// Multi-class label map with values in {0, .., num_classes-1}; label 0 is
/// background by convention.
struct Mask {
  int width = 0;
  int height = 0;
  int num_classes = 1;  // C, including background
  std::vector<std::uint8_t> labels;  // row-major, height x width

  static Mask filled(int width, int height, int num_classes, std::uint8_t value = 0) {
    Mask m;
    m.width = width;
    m.height = height;
    m.num_classes = num_classes;
    m.labels.assign(static_cast<std::size_t>(width) * height, value);
    return m;
  }

  std::uint8_t& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const {
    return labels[static_cast<std::size_t>(y) * width + x];
  }

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (width <= 0 || height <= 0 || num_classes < 1)
      throw std::invalid_argument("mask: invalid dimensions " + std::to_string(width) +
                                  "x" + std::to_string(height) + ", C=" +
                                  std::to_string(num_classes));
    if (labels.size() != static_cast<std::size_t>(width) * height)
      throw std::invalid_argument("mask: label count " + std::to_string(labels.size()) +
                                  " does not match " + std::to_string(width) + "x" +
                                  std::to_string(height));
    for (std::uint8_t v : labels)
      if (v >= num_classes)
        throw std::invalid_argument("mask: label " + std::to_string(int(v)) +
                                    " out of range for C=" + std::to_string(num_classes));
  }

  bool operator==(const Mask& other) const = default;
};

}  // namespace segdiff
