#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hff/tensor.hpp"

namespace hff {

/// 8-bit interleaved image (RGB or single-channel gray), row-major.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int w, int h, int c) : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w * h * c), 0) {}

  std::uint8_t& at(int y, int x, int c = 0) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool operator==(const Image8&) const = default;
};

Image8 read_png(const std::string& path);
void write_png(const std::string& path, const Image8& image);

/// Stacks RGB images into a [B,3,H,W] tensor of raw [0,255] values.
template <typename Scalar>
Tensor<Scalar> images_to_tensor(std::span<const Image8* const> images) {
  require(!images.empty(), "images_to_tensor: empty batch");
  const int h = images.front()->height, w = images.front()->width;
  Tensor<Scalar> t({static_cast<Index>(images.size()), 3, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image8& img = *images[b];
    require(img.channels == 3 && img.height == h && img.width == w,
            "images_to_tensor: batch images must share one RGB size");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.at(static_cast<Index>(b), c, y, x) = static_cast<Scalar>(img.at(y, x, c));
  }
  return t;
}

template <typename Scalar>
Tensor<Scalar> image_to_tensor(const Image8& image) {
  const Image8* one[] = {&image};
  return images_to_tensor<Scalar>(one);
}

/// Min-max normalizes an H x W map (row-major) to 8-bit gray; a constant map becomes 0.
Image8 map_to_gray(std::span<const double> values, int height, int width);

}  // namespace hff
