#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "suites/geom_suite.hpp"
#include "tueforge/geometry.hpp"
#include "tueforge/rng.hpp"

using namespace tueforge;

TEST_CASE("align-corners bilinear hits the pinned grids exactly") {
  std::string why;
  CHECK_MESSAGE(test::check_resize_exact(&why), why);
}

TEST_CASE("paste then crop recovers the tile for integer-aligned boxes") {
  std::string why;
  CHECK_MESSAGE(test::check_paste_crop_exact(&why), why);
}

TEST_CASE("budget survives resize for in-budget tiles") {
  std::string why;
  CHECK_MESSAGE(test::check_budget_closure(1000, &why), why);
}

TEST_CASE("context window formula") {
  // square target with quarter context: p = 0.25*(w+h) = 0.5*w, side = sqrt(4w^2) = 2w
  BBox b{24, 24, 16, 16};
  auto spec = context_crop_spec(b, 0.25);
  CHECK(spec.side == doctest::Approx(32.0).epsilon(1e-12));
  CHECK(spec.cx == doctest::Approx(32.0));
  CHECK(spec.cy == doctest::Approx(32.0));

  BBox r{0, 0, 10, 20};
  auto s2 = context_crop_spec(r, 0.25);
  double p = 0.25 * 30.0;
  CHECK(s2.side == doctest::Approx(std::sqrt((10 + 2 * p) * (20 + 2 * p))).epsilon(1e-12));

  CHECK_THROWS_AS(context_crop_spec(BBox{0, 0, 0, 5}, 0.25), std::invalid_argument);
  CHECK_THROWS_AS(context_crop_spec(b, -0.1), std::invalid_argument);
}

TEST_CASE("context crop of an integer-aligned square is verbatim pixels") {
  Rng rng(88u);
  Image8 im(64, 64);
  for (auto& v : im.rgb) v = static_cast<uint8_t>(rng.below(256));
  BBox b{24, 24, 16, 16};  // context square lands on {16,16,32,32}
  auto crop = crop_with_context(im, b, 0.25, 32);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        CHECK(crop.at(c, y, x) == static_cast<float>(im.at(16 + y, 16 + x, c)) / 255.0f);
}

TEST_CASE("crop outside the frame reads the channel mean") {
  Image8 im(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      im.at(y, x, 0) = 100;
      im.at(y, x, 1) = 150;
      im.at(y, x, 2) = 200;
    }
  // box hanging far off the frame: every sample is either the uniform pixel
  // value or the padding, which equals the channel mean of a uniform image
  auto crop = crop_exact(im, BBox{-20, -20, 16, 16}, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(crop.at(0, y, x) == doctest::Approx(100.0 / 255.0).epsilon(1e-6));
      CHECK(crop.at(1, y, x) == doctest::Approx(150.0 / 255.0).epsilon(1e-6));
      CHECK(crop.at(2, y, x) == doctest::Approx(200.0 / 255.0).epsilon(1e-6));
    }
}

TEST_CASE("normalize round trip") {
  Rng rng(17u);
  for (int i = 0; i < 200; ++i) {
    BBox b{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 14), rng.uniform(1, 14)};
    auto nb = normalize_bbox(b, 64, 64);
    auto back = denormalize_bbox(nb, 64, 64);
    CHECK(std::abs(back.x - b.x) < 1e-6);
    CHECK(std::abs(back.y - b.y) < 1e-6);
    CHECK(std::abs(back.w - b.w) < 1e-6);
    CHECK(std::abs(back.h - b.h) < 1e-6);
    CHECK(nb.x >= 0.0);
    CHECK(nb.x + nb.w <= 1.0 + 1e-12);
  }
  // clamping pulls an overhanging box back into the unit square
  auto nb = normalize_bbox(BBox{-4, 60, 10, 10}, 64, 64);
  CHECK(nb.x == 0.0);
  CHECK(nb.w == doctest::Approx(6.0 / 64.0));
  CHECK(nb.y + nb.h <= 1.0 + 1e-12);
  CHECK_THROWS_AS(normalize_bbox(BBox{0, 0, 0, 10}, 64, 64), std::invalid_argument);
  CHECK_THROWS_AS(normalize_bbox(BBox{100, 0, 10, 10}, 64, 64), std::invalid_argument);
}

TEST_CASE("iou oracle") {
  CHECK(iou(BBox{0, 0, 2, 2}, BBox{1, 1, 2, 2}) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(BBox{0, 0, 2, 2}, BBox{0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(iou(BBox{0, 0, 2, 2}, BBox{5, 5, 2, 2}) == 0.0);
}

TEST_CASE("paste rounds extents and clips to the frame") {
  auto r = rounded_rect(BBox{3.2, 4.7, 0.2, 1.49});
  CHECK(r.x0 == 3);
  CHECK(r.y0 == 5);
  CHECK(r.w == 1);
  CHECK(r.h == 1);
  auto r2 = rounded_rect(BBox{0, 0, 1.5, 2.5});
  CHECK(r2.w == 2);
  CHECK(r2.h == 3);

  // partially off-frame paste only touches in-frame pixels
  Tensor<float> img = Tensor<float>::full(Shape{3, 8, 8}, 0.5f);
  Tensor<float> tile = Tensor<float>::full(Shape{3, 4, 4}, 0.1f);
  auto out = paste(img, tile, BBox{-2, 6, 4, 4});
  int changed = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        bool in_window = x < 2 && y >= 6;
        if (in_window) {
          CHECK(out.at(c, y, x) == 0.6f);
          ++changed;
        } else {
          CHECK(out.at(c, y, x) == 0.5f);
        }
      }
  CHECK(changed == 3 * 2 * 2);

  // clamped at the top of the range
  Tensor<float> bright = Tensor<float>::full(Shape{3, 4, 4}, 0.95f);
  auto clamped = paste(bright, Tensor<float>::full(Shape{3, 2, 2}, 0.2f), BBox{1, 1, 2, 2});
  CHECK(clamped.at(0, 1, 1) == 1.0f);
}

TEST_CASE("paste with a hole leaves the hole untouched") {
  Tensor<float> img = Tensor<float>::full(Shape{3, 16, 16}, 0.5f);
  Tensor<float> tile = Tensor<float>::full(Shape{3, 8, 8}, 0.02f);
  BBox square{4, 4, 8, 8};
  BBox hole{6, 6, 4, 4};
  auto out = paste_with_hole(img, tile, square, hole);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      bool in_square = x >= 4 && x < 12 && y >= 4 && y < 12;
      bool in_hole = x >= 6 && x < 10 && y >= 6 && y < 10;
      float want = (in_square && !in_hole) ? 0.52f : 0.5f;
      CHECK(out.at(0, y, x) == doctest::Approx(want));
    }
}

TEST_CASE("crop sampling follows the pixel-area coordinate map") {
  // bilinear interpolation reproduces an affine image exactly, so a gradient
  // image turns the documented cell-center formula into an oracle
  Tensor<float> im(Shape{3, 32, 32});
  const double gx[3] = {0.011, -0.007, 0.004};
  const double gy[3] = {0.003, 0.009, -0.012};
  const double g0[3] = {0.31, 0.52, 0.64};
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) im.at(c, y, x) = static_cast<float>(g0[c] + gx[c] * x + gy[c] * y);
  BBox b{4.3, 6.1, 12.4, 9.7};
  int out = 20;
  auto crop = crop_exact(im, b, out);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < out; ++j) {
        double sx = b.x + (j + 0.5) * b.w / out - 0.5;
        double sy = b.y + (i + 0.5) * b.h / out - 0.5;
        double want = g0[c] + gx[c] * sx + gy[c] * sy;
        CHECK(crop.at(c, i, j) == doctest::Approx(want).epsilon(1e-5));
      }

  // a window of side s centered on a pixel's continuous center (index+0.5)
  // samples that pixel exactly at the middle cell of the crop
  Tensor<float> delta = Tensor<float>::zeros(Shape{3, 33, 33});
  delta.at(0, 16, 16) = 1.0f;
  BBox win{16.5 - 10.5, 16.5 - 10.5, 21, 21};
  auto peak = crop_exact(delta, win, 21);
  CHECK(peak.at(0, 10, 10) == doctest::Approx(1.0f));
}

TEST_CASE("degenerate crops are rejected") {
  Image8 im(16, 16);
  CHECK_THROWS_AS(crop_exact(im, BBox{0, 0, 0.5, 4}, 8), std::invalid_argument);
  CHECK_THROWS_AS(crop_exact(im, BBox{0, 0, 4, 4}, 0), std::invalid_argument);
}

TEST_CASE("budget validation and float bound") {
  CHECK_THROWS_AS(Budget(0.0), std::invalid_argument);
  CHECK_THROWS_AS(Budget(1.5), std::invalid_argument);
  Budget b;
  CHECK(static_cast<double>(b.sigma_f()) <= b.sigma);
  Budget tight(0.1);
  CHECK(static_cast<double>(tight.sigma_f()) <= tight.sigma);
}
