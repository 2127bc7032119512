#pragma once

#include <cmath>
#include <sstream>
#include <string>

#include "tueforge/geometry.hpp"
#include "tueforge/rng.hpp"

namespace tueforge::test {

// Geometry checks shared by the unit tests and the acceptance gate.

struct GeomSuiteResult {
  bool resize_exact = false;
  bool paste_crop_exact = false;
  bool budget_closed = false;
  std::string detail;
};

inline bool check_resize_exact(std::string* why = nullptr) {
  // 2x2 grid [[0,1],[2,3]] upsampled to 3x3 under align-corners
  Tensor<float> in(Shape{1, 2, 2}, {0.f, 1.f, 2.f, 3.f});
  auto out = kernels::resize_bilinear(in, 3, 3);
  const float want[9] = {0.f, 0.5f, 1.f, 1.f, 1.5f, 2.f, 2.f, 2.5f, 3.f};
  for (int i = 0; i < 9; ++i)
    if (out[i] != want[i]) {
      if (why) *why = "3x3 upsample mismatch at " + std::to_string(i);
      return false;
    }
  // degenerate 1x1 source replicates its value
  Tensor<float> one(Shape{1, 1, 1}, {5.f});
  auto rep = kernels::resize_bilinear(one, 2, 2);
  for (int i = 0; i < 4; ++i)
    if (rep[i] != 5.f) {
      if (why) *why = "1x1 replication mismatch";
      return false;
    }
  return true;
}

inline bool check_paste_crop_exact(std::string* why = nullptr) {
  Rng rng(4242u);
  for (int rep = 0; rep < 32; ++rep) {
    int fs = 48 + static_cast<int>(rng.below(32));
    int side = 8 + static_cast<int>(rng.below(17));
    Tensor<float> img(Shape{3, fs, fs});
    for (int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniformf(0.2f, 0.8f);
    Tensor<float> tile(Shape{3, side, side});
    for (int64_t i = 0; i < tile.size(); ++i) tile[i] = rng.uniformf(-0.03f, 0.03f);
    int x0 = static_cast<int>(rng.below(static_cast<uint64_t>(fs - side)));
    int y0 = static_cast<int>(rng.below(static_cast<uint64_t>(fs - side)));
    BBox b{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(side), static_cast<double>(side)};

    auto pasted = paste(img, tile, b);
    auto before = crop_exact(img, b, side);
    auto after = crop_exact(pasted, b, side);
    // integer-aligned same-size crop is verbatim, so the crop of the pasted
    // image must equal the float add of tile onto the original pixels
    for (int64_t i = 0; i < tile.size(); ++i) {
      float want = before[i] + tile[i];
      want = want < 0.f ? 0.f : (want > 1.f ? 1.f : want);
      if (after[i] != want) {
        if (why) {
          std::ostringstream os;
          os << "rep " << rep << " elem " << i << ": got " << after[i] << " want " << want;
          *why = os.str();
        }
        return false;
      }
    }
    // untouched outside the box, bit for bit
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < fs; ++y)
        for (int x = 0; x < fs; ++x) {
          bool inside = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
          if (!inside && pasted.at(c, y, x) != img.at(c, y, x)) {
            if (why) *why = "pixel outside the box changed";
            return false;
          }
        }
  }
  return true;
}

// resizing a within-budget tile may never push any value past the budget
inline bool check_budget_closure(int n_tiles, std::string* why = nullptr) {
  Rng rng(31337u);
  Budget budget;
  auto sig = static_cast<float>(budget.sigma);
  for (int rep = 0; rep < n_tiles; ++rep) {
    int h = 2 + static_cast<int>(rng.below(31));
    int w = 2 + static_cast<int>(rng.below(31));
    Tensor<float> tile(Shape{3, h, w});
    for (int64_t i = 0; i < tile.size(); ++i) tile[i] = rng.uniformf(-sig, sig);
    int oh = 1 + static_cast<int>(rng.below(48));
    int ow = 1 + static_cast<int>(rng.below(48));
    auto out = kernels::resize_bilinear(tile, oh, ow);
    for (int64_t i = 0; i < out.size(); ++i) {
      if (!(std::abs(static_cast<double>(out[i])) <= budget.sigma)) {
        if (why) {
          std::ostringstream os;
          os << "tile " << rep << " " << h << "x" << w << "->" << oh << "x" << ow << " elem " << i << ": |"
             << out[i] << "| > " << budget.sigma;
          *why = os.str();
        }
        return false;
      }
    }
  }
  return true;
}

inline GeomSuiteResult run_geom_suite(int n_budget_tiles) {
  GeomSuiteResult r;
  std::string why;
  r.resize_exact = check_resize_exact(&why);
  if (!r.resize_exact) r.detail = "resize: " + why;
  r.paste_crop_exact = check_paste_crop_exact(&why);
  if (!r.paste_crop_exact && r.detail.empty()) r.detail = "paste/crop: " + why;
  r.budget_closed = check_budget_closure(n_budget_tiles, &why);
  if (!r.budget_closed && r.detail.empty()) r.detail = "budget: " + why;
  return r;
}

}  // namespace tueforge::test
