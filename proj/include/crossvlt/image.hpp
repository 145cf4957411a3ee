#pragma once

#include <cstdint>
#include <vector>

#include "crossvlt/errors.hpp"

namespace crossvlt {

/// Planar RGB image, values in [0, 1], layout (channel, y, x).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // 3 * height * width

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(3) * h * w, 0.0f) {}

  float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

/// Binary mask, row-major, one byte per pixel (0 or 1).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  long count() const {
    long n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

}  // namespace crossvlt
