#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "tueforge/embaseline.hpp"

using namespace tueforge;

namespace {

std::vector<VideoRecord> small_corpus(int n_videos, uint64_t seed, const char* split = "train") {
  SynthConfig cfg;
  cfg.n_videos = n_videos;
  cfg.n_frames = 6;
  cfg.frame_size = 64;
  cfg.split = split;
  return generate_dataset(cfg, seed);
}

DatasetManifest small_manifest(const std::vector<VideoRecord>& videos, uint64_t seed) {
  SynthConfig cfg;
  cfg.n_videos = static_cast<int>(videos.size());
  cfg.n_frames = 6;
  cfg.frame_size = 64;
  return make_manifest(cfg, seed, videos);
}

int max_abs_diff(const Image8& a, const Image8& b) {
  int worst = 0;
  for (size_t i = 0; i < a.rgb.size(); ++i) worst = std::max(worst, std::abs(int(a.rgb[i]) - int(b.rgb[i])));
  return worst;
}

}  // namespace

TEST_CASE("pgd_step moves against the gradient sign and projects") {
  Budget budget;
  Tensor<float> zero = Tensor<float>::zeros(Shape{3, 2, 2});
  Tensor<float> gpos = Tensor<float>::full(Shape{3, 2, 2}, 0.7f);
  auto stepped = pgd_step(zero, gpos, 2.0f / 255.0f, budget);
  for (int64_t i = 0; i < stepped.size(); ++i) CHECK(stepped[i] == doctest::Approx(-2.0 / 255.0).epsilon(1e-6));

  // near the boundary the update projects back to sigma, not past it
  Tensor<float> high = Tensor<float>::full(Shape{3, 2, 2}, 7.0f / 255.0f);
  Tensor<float> gneg = Tensor<float>::full(Shape{3, 2, 2}, -1.0f);
  auto proj = pgd_step(high, gneg, 2.0f / 255.0f, budget);
  for (int64_t i = 0; i < proj.size(); ++i) CHECK(proj[i] == budget.sigma_f());

  // zero gradient leaves the tile untouched
  auto same = pgd_step(high, zero, 2.0f / 255.0f, budget);
  for (int64_t i = 0; i < same.size(); ++i) CHECK(same[i] == high[i]);

  CHECK_THROWS_AS((void)pgd_step(zero, Tensor<float>::zeros(Shape{3, 1, 1}), 0.1f, budget), std::invalid_argument);
  Tensor<float> bad = Tensor<float>::full(Shape{3, 2, 2}, std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_AS((void)pgd_step(zero, bad, 0.1f, budget), std::runtime_error);
}

TEST_CASE("inner optimization descends and keeps the budget") {
  auto videos = small_corpus(10, 400);
  TrackerLayout lay = layout_for(Arch::ConvSiamese);
  ParamSet surrogate = init_tracker(Arch::ConvSiamese, 5);
  Rng rng(9);
  int descended = 0;
  for (int vi = 0; vi < 10; ++vi) {
    PairSample s = draw_pair_sample(videos[vi], vi, lay, 5, 0.0, rng);
    EmCropCtx ctx = make_em_crop_ctx(videos[vi], s, lay);
    NoiseTile start;
    auto res = optimize_video_noise(surrogate, ctx, start, 20, 2.0f / 255.0f, true);
    if (res.loss_after <= res.loss_before) ++descended;
    float sf = res.tile.budget.sigma_f();
    for (int64_t i = 0; i < res.tile.delta_t.size(); ++i) CHECK(std::abs(res.tile.delta_t[i]) <= sf);
    for (int64_t i = 0; i < res.tile.delta_c.size(); ++i) CHECK(std::abs(res.tile.delta_c[i]) <= sf);
  }
  // error-minimizing steps should reduce the loss on nearly every video
  CHECK(descended >= 9);

  // context disabled: delta_c stays zero
  PairSample s = draw_pair_sample(videos[0], 0, lay, 5, 0.0, rng);
  EmCropCtx ctx = make_em_crop_ctx(videos[0], s, lay);
  auto plain = optimize_video_noise(surrogate, ctx, NoiseTile{}, 3, 2.0f / 255.0f, false);
  for (int64_t i = 0; i < plain.tile.delta_c.size(); ++i) CHECK(plain.tile.delta_c[i] == 0.0f);
  CHECK_THROWS_AS((void)optimize_video_noise(surrogate, ctx, NoiseTile{}, 0, 0.1f, false), std::invalid_argument);
}

TEST_CASE("protected frames stay inside the budget and untouched outside") {
  auto videos = small_corpus(3, 410);
  auto manifest = small_manifest(videos, 410);
  EmOpts opts;
  opts.outer_epochs = 2;
  opts.inner_steps = 5;
  opts.seed = 11;

  for (bool ctx : {false, true}) {
    opts.with_context = ctx;
    auto res = em_protect_dataset(videos, manifest, opts);
    REQUIRE(res.videos.size() == videos.size());
    CHECK(res.manifest.provenance.rfind(ctx ? "em-protected+ctx" : "em-protected", 0) == 0);
    CHECK(res.tile_bytes == int64_t(videos.size()) * 3 * 16 * 16 * 4 * (ctx ? 2 : 1));
    // 8/255 budget plus one quantization level
    for (size_t vi = 0; vi < videos.size(); ++vi)
      for (size_t t = 0; t < videos[vi].frames.size(); ++t) {
        CHECK(max_abs_diff(videos[vi].frames[t], res.videos[vi].frames[t]) <= 9);
        // pixels away from the paste windows are bit-identical
        const BBox& b = videos[vi].boxes[t];
        BBox outer = ctx ? context_crop_spec(b, 0.25).box() : b;
        PasteRect r = rounded_rect(outer);
        const Image8& clean = videos[vi].frames[t];
        const Image8& prot = res.videos[vi].frames[t];
        for (int y = 0; y < clean.h; ++y)
          for (int x = 0; x < clean.w; ++x) {
            if (y >= r.y0 && y < r.y0 + r.h && x >= r.x0 && x < r.x0 + r.w) continue;
            for (int c = 0; c < 3; ++c) {
              if (prot.at(y, x, c) != clean.at(y, x, c)) {
                CAPTURE(vi);
                CAPTURE(t);
                CAPTURE(y);
                CAPTURE(x);
                CHECK(prot.at(y, x, c) == clean.at(y, x, c));
              }
            }
          }
      }
    // last-phase loss bookkeeping covers every video
    CHECK(res.last_loss_before.size() == videos.size());
    CHECK(res.last_loss_after.size() == videos.size());
  }
}

TEST_CASE("protection is deterministic and refuses non-clean input") {
  auto videos = small_corpus(2, 420);
  auto manifest = small_manifest(videos, 420);
  EmOpts opts;
  opts.outer_epochs = 1;
  opts.inner_steps = 3;
  auto a = em_protect_dataset(videos, manifest, opts);
  auto b = em_protect_dataset(videos, manifest, opts);
  for (size_t vi = 0; vi < videos.size(); ++vi)
    for (size_t t = 0; t < videos[vi].frames.size(); ++t)
      CHECK(a.videos[vi].frames[t].rgb == b.videos[vi].frames[t].rgb);
  for (auto& [id, tile] : a.tiles) {
    const NoiseTile& other = b.tiles.at(id);
    for (int64_t i = 0; i < tile.delta_t.size(); ++i) CHECK(tile.delta_t[i] == other.delta_t[i]);
  }
  CHECK_THROWS_AS((void)em_protect_dataset(a.videos, a.manifest, opts), std::invalid_argument);
}

TEST_CASE("tile sets round-trip through checkpoints") {
  auto videos = small_corpus(2, 430);
  auto manifest = small_manifest(videos, 430);
  EmOpts opts;
  opts.outer_epochs = 1;
  opts.inner_steps = 2;
  opts.with_context = true;
  auto res = em_protect_dataset(videos, manifest, opts);

  auto dir = std::filesystem::temp_directory_path() / "tueforge_tiles_test";
  std::filesystem::remove_all(dir);
  save_noise_tiles(dir.string(), res.tiles, true, opts.budget);
  bool ctx = false;
  auto loaded = load_noise_tiles(dir.string(), &ctx);
  CHECK(ctx);
  REQUIRE(loaded.size() == res.tiles.size());
  for (auto& [id, tile] : res.tiles) {
    const NoiseTile& other = loaded.at(id);
    CHECK(other.budget.sigma == tile.budget.sigma);
    for (int64_t i = 0; i < tile.delta_t.size(); ++i) CHECK(tile.delta_t[i] == other.delta_t[i]);
    for (int64_t i = 0; i < tile.delta_c.size(); ++i) CHECK(tile.delta_c[i] == other.delta_c[i]);
  }
  std::filesystem::remove_all(dir);
}
