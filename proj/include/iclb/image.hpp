#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace iclb {

using Rgb = std::array<float, 3>;

/// H×W×C pixel grid, row-major with interleaved channels, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  static Image filled(int h, int w, const Rgb& color) {
    Image img(h, w, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = color[i % 3];
    return img;
  }

  std::size_t size() const { return pixels.size(); }
  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

}  // namespace iclb
