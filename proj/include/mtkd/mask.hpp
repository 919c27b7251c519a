#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mtkd/error.hpp"

namespace mtkd {

/// H x W map of {0,1}; 1 marks a changed pixel.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), values(h * w, fill) {}
  BinaryMask(std::size_t h, std::size_t w, std::vector<std::uint8_t> v)
      : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw ShapeError("mask size does not match its shape");
    for (auto x : values) {
      if (x > 1) throw DataError("mask value " + std::to_string(x) + " is not binary");
    }
  }

  std::size_t size() const { return values.size(); }
  std::uint8_t operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::uint8_t& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }

  bool operator==(const BinaryMask&) const = default;
};

/// Per-pixel change probabilities in [0,1].
struct ChangeMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;

  bool operator==(const ChangeMap&) const = default;
};

/// mask(i) = 1 iff cm(i) > threshold (strict).
inline BinaryMask predict_mask(const ChangeMap& cm, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error("predict_mask: threshold " + std::to_string(threshold) + " is outside (0,1)");
  }
  BinaryMask mask(cm.height, cm.width);
  for (std::size_t i = 0; i < cm.values.size(); ++i) {
    mask.values[i] = static_cast<double>(cm.values[i]) > threshold ? 1 : 0;
  }
  return mask;
}

}  // namespace mtkd
