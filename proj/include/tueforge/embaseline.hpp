#pragma once

#include <map>
#include <string>
#include <vector>

#include "tueforge/geometry.hpp"
#include "tueforge/synthvideo.hpp"
#include "tueforge/tracker.hpp"

namespace tueforge {

// Per-video noise pair shared by every frame of that video: one tile for the
// target rectangle, one for the surrounding context. Both live inside the
// ell-infinity budget at all times.
struct NoiseTile {
  Tensor<float> delta_t = Tensor<float>::zeros(Shape{3, 16, 16});
  Tensor<float> delta_c = Tensor<float>::zeros(Shape{3, 16, 16});  // zeros unless context variant
  Budget budget{};
};

// delta' = clip(delta - alpha*sign(grad), -sigma, sigma); sign(0) = 0
Tensor<float> pgd_step(const Tensor<float>& delta, const Tensor<float>& grad, float alpha, const Budget& budget);

struct EmOpts {
  int inner_steps = 20;          // PGD steps per video per phase
  float alpha = 2.0f / 255.0f;   // PGD step size
  int outer_epochs = 5;          // noise/surrogate alternations
  bool with_context = false;
  Budget budget{};
  uint64_t seed = 1;
  int batch = 8;                 // surrogate update batching
  float lr = 1e-3f;              // surrogate Adam rate
  int max_gap = 10;
};

// Fixed crops and paste geometry for one video's optimization pair. The
// sample is drawn without center shift, so the target sits at the patch
// center and the context square always fits inside the search patch.
struct EmCropCtx {
  Tensor<float> z_clean, x_clean;
  PasteRect target_z, target_x;    // target rectangles in patch coords
  PasteRect square_z, square_x;    // context squares in patch coords
  Tensor<float> label;
};

EmCropCtx make_em_crop_ctx(const VideoRecord& v, const PairSample& s, const TrackerLayout& lay);

// Builds the surrogate response on crops carrying the noise: the target tile
// is resized into the target rectangle of both crops, the context tile into
// the context square minus the target hole, then everything is clamped back
// to image range.
template <class P>
Var<float> em_protected_response(Graph<float>& g, P& binder, const EmCropCtx& c, Var<float> dt, Var<float> dc,
                                 bool with_context) {
  auto paste_target = [&](Var<float> crop, const PasteRect& r) {
    return g.paste_add(crop, g.resize_bilinear(dt, r.h, r.w), r.y0, r.x0);
  };
  auto paste_context = [&](Var<float> crop, const PasteRect& sq, const PasteRect& hole) {
    auto resized = g.resize_bilinear(dc, sq.h, sq.w);
    Tensor<float> mask = Tensor<float>::full(Shape{3, sq.h, sq.w}, 1.0f);
    for (int ch = 0; ch < 3; ++ch)
      for (int y = hole.y0 - sq.y0; y < hole.y0 - sq.y0 + hole.h; ++y)
        for (int x = hole.x0 - sq.x0; x < hole.x0 - sq.x0 + hole.w; ++x) mask.at(ch, y, x) = 0.0f;
    return g.paste_add(crop, g.mul(resized, g.constant(std::move(mask), "ctx_mask")), sq.y0, sq.x0);
  };
  auto z = paste_target(g.constant(c.z_clean, "z_clean"), c.target_z);
  auto x = paste_target(g.constant(c.x_clean, "x_clean"), c.target_x);
  if (with_context) {
    z = paste_context(z, c.square_z, c.target_z);
    x = paste_context(x, c.square_x, c.target_x);
  }
  z = g.clamp(z, 0.0f, 1.0f);
  x = g.clamp(x, 0.0f, 1.0f);
  return nets::conv_response(g, binder, z, x);
}

struct EmInnerResult {
  NoiseTile tile;
  double loss_before = 0, loss_after = 0;
};

// T error-minimizing PGD steps on the tiles against a frozen surrogate
EmInnerResult optimize_video_noise(const ParamSet& surrogate, const EmCropCtx& ctx, NoiseTile tile, int T, float alpha,
                                   bool with_context);

struct EmProtectResult {
  std::vector<VideoRecord> videos;            // quantized protected frames
  DatasetManifest manifest;                   // provenance em-protected(...)
  std::map<std::string, NoiseTile> tiles;     // keyed by video id
  double optimize_seconds = 0;                // alternation + paste wall time
  int64_t tile_bytes = 0;                     // float32 payload of the tile set
  std::vector<double> last_loss_before, last_loss_after;  // final phase, per video
};

// Alternates per-video PGD phases with surrogate epochs on the noised crops,
// then pastes the final tiles into every raw frame and quantizes to 8 bits.
EmProtectResult em_protect_dataset(const std::vector<VideoRecord>& videos, const DatasetManifest& manifest,
                                   const EmOpts& opts);

// Checkpoint-backed persistence, entries "<video-id>/delta_t" and ".../delta_c"
void save_noise_tiles(const std::string& dir, const std::map<std::string, NoiseTile>& tiles, bool with_context,
                      const Budget& budget);
std::map<std::string, NoiseTile> load_noise_tiles(const std::string& dir, bool* with_context = nullptr);

}  // namespace tueforge
