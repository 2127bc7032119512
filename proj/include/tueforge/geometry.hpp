#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tueforge/image.hpp"
#include "tueforge/kernels.hpp"
#include "tueforge/tensor.hpp"

namespace tueforge {

// Axis-aligned box in frame pixels: (x,y) top-left corner, extent (w,h).
struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
  double cx() const { return x + w / 2.0; }
  double cy() const { return y + h / 2.0; }
  double area() const { return w * h; }
};

// Box with all fields divided by the frame extent; everything in [0,1].
struct NormBBox {
  double x = 0, y = 0, w = 0, h = 0;
};

// Perturbation budget: max absolute pixel deviation in [0,1] units.
struct Budget {
  double sigma = 8.0 / 255.0;
  explicit Budget(double s = 8.0 / 255.0) : sigma(s) {
    if (!(sigma > 0.0) || !(sigma <= 1.0)) throw std::invalid_argument("Budget: sigma must be in (0,1]");
  }
  // largest float not exceeding sigma; float pipelines clip against this so
  // the double-valued budget holds verbatim after casts
  float sigma_f() const {
    auto f = static_cast<float>(sigma);
    if (static_cast<double>(f) > sigma) f = std::nextafter(f, 0.0f);
    return f;
  }
};

inline double iou(const BBox& a, const BBox& b) {
  double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  double x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  double iw = x1 - x0, ih = y1 - y0;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  double inter = iw * ih;
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// clamp the box into the frame, then scale into [0,1]
inline NormBBox normalize_bbox(const BBox& b, int frame_w, int frame_h) {
  if (frame_w < 1 || frame_h < 1) throw std::invalid_argument("normalize_bbox: empty frame");
  if (!(b.w > 0.0) || !(b.h > 0.0)) throw std::invalid_argument("normalize_bbox: zero-area box");
  double x0 = std::clamp(b.x, 0.0, static_cast<double>(frame_w));
  double y0 = std::clamp(b.y, 0.0, static_cast<double>(frame_h));
  double x1 = std::clamp(b.x + b.w, 0.0, static_cast<double>(frame_w));
  double y1 = std::clamp(b.y + b.h, 0.0, static_cast<double>(frame_h));
  if (!(x1 > x0) || !(y1 > y0)) throw std::invalid_argument("normalize_bbox: box lies outside the frame");
  return {x0 / frame_w, y0 / frame_h, (x1 - x0) / frame_w, (y1 - y0) / frame_h};
}

inline BBox denormalize_bbox(const NormBBox& nb, int frame_w, int frame_h) {
  return {nb.x * frame_w, nb.y * frame_h, nb.w * frame_w, nb.h * frame_h};
}

// Context window around a target box: pad by context_factor*(w+h) on each
// side, then take the square whose area matches the padded rectangle.
struct ContextSpec {
  double cx = 0, cy = 0, side = 0;
  BBox box() const { return {cx - side / 2.0, cy - side / 2.0, side, side}; }
};

inline ContextSpec context_crop_spec(const BBox& b, double context_factor) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) throw std::invalid_argument("context_crop_spec: zero-area box");
  if (context_factor < 0.0) throw std::invalid_argument("context_crop_spec: negative context factor");
  double p = context_factor * (b.w + b.h);
  double side = std::sqrt((b.w + 2.0 * p) * (b.h + 2.0 * p));
  return {b.cx(), b.cy(), side};
}

// integer paste window: extents rounded to nearest, floored at 1 px
struct PasteRect {
  int x0, y0, w, h;
};

inline PasteRect rounded_rect(const BBox& b) {
  int w = static_cast<int>(std::lround(b.w));
  int h = static_cast<int>(std::lround(b.h));
  if (w < 1) w = 1;
  if (h < 1) h = 1;
  return {static_cast<int>(std::lround(b.x)), static_cast<int>(std::lround(b.y)), w, h};
}

namespace detail {

// Bilinear sampler over the box under the pixel-area convention: output cell
// i covers the span [b.x + i*b.w/out, b.x + (i+1)*b.w/out) and samples at its
// center, coordinate b.x + (i+0.5)*b.w/out - 0.5 in pixel-center units. Two
// consequences the rest of the code leans on: a crop at an integer box whose
// size equals the output grid copies pixels verbatim, and a window of side s
// centered on c puts c exactly at the crop's grid center (out-1)/2.
// Samples falling outside the image read the per-channel mean instead.
template <class GetPix>
Tensor<float> sample_box(GetPix&& pix, int H, int W, const BBox& b, int out, const double mean[3]) {
  Tensor<float> t(Shape{3, out, out});
  auto coord = [](double origin, double extent, int i, int n) {
    return origin + (static_cast<double>(i) + 0.5) * extent / n - 0.5;
  };
  for (int i = 0; i < out; ++i) {
    double sy = coord(b.y, b.h, i, out);
    int y0 = static_cast<int>(std::floor(sy));
    double fy = sy - y0;
    for (int j = 0; j < out; ++j) {
      double sx = coord(b.x, b.w, j, out);
      int x0 = static_cast<int>(std::floor(sx));
      double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        auto read = [&](int yy, int xx) -> double {
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) return mean[c];
          return pix(yy, xx, c);
        };
        double v = (1.0 - fy) * ((1.0 - fx) * read(y0, x0) + fx * read(y0, x0 + 1)) +
                   fy * ((1.0 - fx) * read(y0 + 1, x0) + fx * read(y0 + 1, x0 + 1));
        t.at(c, i, j) = static_cast<float>(v);
      }
    }
  }
  return t;
}

inline void channel_means_u8(const Image8& im, double mean[3]) {
  double acc[3] = {0, 0, 0};
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x)
      for (int c = 0; c < 3; ++c) acc[c] += im.at(y, x, c);
  double n = static_cast<double>(im.h) * im.w;
  for (int c = 0; c < 3; ++c) mean[c] = n > 0 ? acc[c] / n / 255.0 : 0.0;
}

inline void channel_means_f(const Tensor<float>& t, double mean[3]) {
  int H = t.dim(1), W = t.dim(2);
  double n = static_cast<double>(H) * W;
  for (int c = 0; c < 3; ++c) {
    double acc = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) acc += t.at(c, y, x);
    mean[c] = n > 0 ? acc / n : 0.0;
  }
}

inline void check_crop_box(const BBox& b, const char* who) {
  if (!(b.w >= 1.0) || !(b.h >= 1.0))
    throw std::invalid_argument(std::string(who) + ": degenerate box " + std::to_string(b.w) + "x" +
                                std::to_string(b.h));
}

}  // namespace detail

// crop the exact box region to an out*out patch
inline Tensor<float> crop_exact(const Image8& im, const BBox& b, int out) {
  detail::check_crop_box(b, "crop_exact");
  if (out < 1) throw std::invalid_argument("crop_exact: output size must be positive");
  double mean[3];
  detail::channel_means_u8(im, mean);
  return detail::sample_box([&](int y, int x, int c) { return im.at(y, x, c) / 255.0; }, im.h, im.w, b, out, mean);
}

inline Tensor<float> crop_exact(const Tensor<float>& img, const BBox& b, int out) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("crop_exact: want [3,H,W], got " + shape_str(img.shape));
  detail::check_crop_box(b, "crop_exact");
  if (out < 1) throw std::invalid_argument("crop_exact: output size must be positive");
  double mean[3];
  detail::channel_means_f(img, mean);
  return detail::sample_box([&](int y, int x, int c) { return static_cast<double>(img.at(c, y, x)); }, img.dim(1),
                            img.dim(2), b, out, mean);
}

// context-padded square crop around the target box
inline Tensor<float> crop_with_context(const Image8& im, const BBox& b, double context_factor, int out) {
  return crop_exact(im, context_crop_spec(b, context_factor).box(), out);
}

inline Tensor<float> crop_with_context(const Tensor<float>& img, const BBox& b, double context_factor, int out) {
  return crop_exact(img, context_crop_spec(b, context_factor).box(), out);
}

// Add tile into a copy of img at box b: extents rounded (>=1 px), tile
// resized when its shape differs, window clipped to the frame, result
// clamped to [0,1]. Pixels outside the window are untouched bit for bit.
inline Tensor<float> paste(const Tensor<float>& img, const Tensor<float>& tile, const BBox& b) {
  if (img.rank() != 3 || tile.rank() != 3 || img.dim(0) != tile.dim(0))
    throw std::invalid_argument("paste: want [C,H,W] image and tile, got " + shape_str(img.shape) + " and " +
                                shape_str(tile.shape));
  PasteRect r = rounded_rect(b);
  Tensor<float> fitted;
  const Tensor<float>* src = &tile;
  if (tile.dim(1) != r.h || tile.dim(2) != r.w) {
    fitted = kernels::resize_bilinear(tile, r.h, r.w);
    src = &fitted;
  }
  Tensor<float> out = img;
  int H = img.dim(1), W = img.dim(2), C = img.dim(0);
  for (int c = 0; c < C; ++c)
    for (int ty = 0; ty < r.h; ++ty) {
      int y = r.y0 + ty;
      if (y < 0 || y >= H) continue;
      for (int tx = 0; tx < r.w; ++tx) {
        int x = r.x0 + tx;
        if (x < 0 || x >= W) continue;
        float v = out.at(c, y, x) + src->at(c, ty, tx);
        out.at(c, y, x) = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
      }
    }
  return out;
}

// paste with a rectangular hole cut out of the tile (frame coordinates)
inline Tensor<float> paste_with_hole(const Tensor<float>& img, const Tensor<float>& tile, const BBox& b,
                                     const BBox& hole) {
  PasteRect r = rounded_rect(b);
  PasteRect hr = rounded_rect(hole);
  Tensor<float> fitted = (tile.dim(1) != r.h || tile.dim(2) != r.w) ? kernels::resize_bilinear(tile, r.h, r.w) : tile;
  for (int c = 0; c < fitted.dim(0); ++c)
    for (int ty = 0; ty < r.h; ++ty) {
      int y = r.y0 + ty;
      if (y < hr.y0 || y >= hr.y0 + hr.h) continue;
      for (int tx = 0; tx < r.w; ++tx) {
        int x = r.x0 + tx;
        if (x >= hr.x0 && x < hr.x0 + hr.w) fitted.at(c, ty, tx) = 0.0f;
      }
    }
  return paste(img, fitted, BBox{static_cast<double>(r.x0), static_cast<double>(r.y0), static_cast<double>(r.w),
                                 static_cast<double>(r.h)});
}

}  // namespace tueforge
