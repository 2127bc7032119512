#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tueforge/tensor.hpp"

namespace tueforge {

// 8-bit RGB image, row-major HWC. The storage format of every frame on
// disk and in loaded datasets; float views are derived on demand.
struct Image8 {
  int h = 0, w = 0;
  std::vector<uint8_t> rgb;

  Image8() = default;
  Image8(int h_, int w_) : h(h_), w(w_), rgb(static_cast<size_t>(h_) * w_ * 3, 0) {}

  uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

// [3,H,W] float in [0,1]; values are exactly k/255
inline Tensor<float> to_float_chw(const Image8& im) {
  Tensor<float> t(Shape{3, im.h, im.w});
  const float inv = 1.0f / 255.0f;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) t.at(c, y, x) = static_cast<float>(im.at(y, x, c)) * inv;
  return t;
}

// quantize to 8 bits: clamp to [0,1], round to nearest level
inline Image8 to_image8(const Tensor<float>& t) {
  if (t.rank() != 3 || t.dim(0) != 3)
    throw std::invalid_argument("to_image8: want [3,H,W], got " + shape_str(t.shape));
  Image8 im(t.dim(1), t.dim(2));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) {
        float v = t.at(c, y, x);
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        im.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
  return im;
}

// lossless RGB8 PNG round trip (pngio.cpp)
void write_png(const std::string& path, const Image8& im);
Image8 read_png(const std::string& path);

}  // namespace tueforge
