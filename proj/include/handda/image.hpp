#pragma once

#include <stdexcept>
#include <vector>

namespace handda {

/// Single-channel image, row-major.
struct Image {
  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("image dimensions must be positive");
  }

  [[nodiscard]] double at(int y, int x) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y * width + x)]; }

  int height = 0;
  int width = 0;
  std::vector<double> pixels;
};

}  // namespace handda
