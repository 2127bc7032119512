#pragma once

#include <string>
#include <vector>

#include "tueforge/geometry.hpp"
#include "tueforge/optim.hpp"
#include "tueforge/rng.hpp"
#include "tueforge/synthvideo.hpp"

namespace tueforge {

enum class Arch { ConvSiamese, AttnMini };

Arch arch_from_string(const std::string& s);
std::string arch_to_string(Arch a);

// Crop and response-map geometry per architecture. The response cell u maps
// to search-patch pixel (n-1)/2 + (px - (S-1)/2)/stride, with the map center
// aligned to the patch center.
struct TrackerLayout {
  int template_size = 32;
  int search_size = 64;
  double context_factor = 0.25;
  int response_n = 17;
  double stride = 2.0;
  double label_radius = 2.0;
};

TrackerLayout layout_for(Arch a);

ParamSet init_tracker(Arch a, uint64_t seed);

// ---- sampling shared by tracker training, the noise baseline, and the
// generator's joint training ----

struct PairSample {
  int video = -1;
  int frame_i = 0, frame_j = 0;
  BBox box_i, box_j;
  ContextSpec spec_z;   // template window in frame i
  BBox search_window;   // square window in frame j (center shift augmented)
  double target_px = 0, target_py = 0;  // box_j center in search patch coords
};

PairSample draw_pair_sample(const VideoRecord& v, int video_index, const TrackerLayout& lay, int max_gap,
                            double shift_frac, Rng& rng);

Tensor<float> crop_template(const VideoRecord& v, const PairSample& s, const TrackerLayout& lay);
Tensor<float> crop_search(const VideoRecord& v, const PairSample& s, const TrackerLayout& lay);

// target rectangle expressed in search-patch pixel coordinates
BBox target_rect_in_search(const PairSample& s, const TrackerLayout& lay);
// template-target rectangle in template-patch pixel coordinates
BBox target_rect_in_template(const PairSample& s, const TrackerLayout& lay);

// binary labels: 1 within label_radius (in cells) of the mapped target center
Tensor<float> gt_response(const TrackerLayout& lay, double target_px, double target_py);

// ---- model forward passes (templated so the double-precision gradient
// checks exercise the exact same code that trains in float) ----

namespace nets {

template <class T, class P>
Var<T> conv_backbone(Graph<T>& g, P& p, Var<T> img) {
  auto h1 = g.tanh(g.conv2d(img, p("conv.c1.w"), p("conv.c1.b"), 2, 0));
  auto h2 = g.tanh(g.conv2d(h1, p("conv.c2.w"), p("conv.c2.b"), 1, 0));
  return g.conv2d(h2, p("conv.c3.w"), p("conv.c3.b"), 1, 0);
}

template <class T, class P>
Var<T> conv_response(Graph<T>& g, P& p, Var<T> z, Var<T> x) {
  auto fz = conv_backbone(g, p, z);
  auto fx = conv_backbone(g, p, x);
  auto raw = g.xcorr(fz, fx);
  auto scaled = g.add(g.mul(raw, p("conv.adjust_gain")), p("conv.adjust_bias"));
  return g.sigmoid(scaled);
}

// image [3,S,S] -> tokens [ (S/p)^2, 3*p*p ] in row-major patch order
template <class T>
Var<T> patchify(Graph<T>& g, Var<T> img, int patch) {
  return g.to_patches(img, patch);
}

template <class T, class P>
Var<T> mha(Graph<T>& g, P& p, const std::string& pre, Var<T> tokens, int heads) {
  int n = g.shape(tokens.id)[0];
  int d = g.shape(tokens.id)[1];
  int dh = d / heads;
  auto qkv = g.affine(tokens, p(pre + ".qkv.w"), p(pre + ".qkv.b"));
  std::vector<Var<T>> outs;
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < heads; ++h) {
    auto q = g.slice(qkv, {0, h * dh}, {n, dh});
    auto k = g.slice(qkv, {0, d + h * dh}, {n, dh});
    auto v = g.slice(qkv, {0, 2 * d + h * dh}, {n, dh});
    auto att = g.softmax_lastdim(g.mul_scalar(g.matmul(q, k, false, true), scale));
    outs.push_back(g.matmul(att, v));
  }
  auto cat = g.concat(outs, 1);
  return g.affine(cat, p(pre + ".proj.w"), p(pre + ".proj.b"));
}

template <class T, class P>
Var<T> attn_block(Graph<T>& g, P& p, const std::string& pre, Var<T> tokens, int heads) {
  auto a = mha(g, p, pre, g.layernorm_lastdim(tokens), heads);
  auto t1 = g.add(tokens, a);
  auto m = g.affine(g.tanh(g.affine(g.layernorm_lastdim(t1), p(pre + ".mlp1.w"), p(pre + ".mlp1.b"))),
                    p(pre + ".mlp2.w"), p(pre + ".mlp2.b"));
  return g.add(t1, m);
}

template <class T, class P>
Var<T> attn_response(Graph<T>& g, P& p, Var<T> z, Var<T> x) {
  const int patch = 8, heads = 4;
  auto tz = g.add(g.affine(patchify(g, z, patch), p("attn.embed.w"), p("attn.embed.b")), p("attn.pos_z"));
  auto tx = g.add(g.affine(patchify(g, x, patch), p("attn.embed.w"), p("attn.embed.b")), p("attn.pos_x"));
  auto t = g.concat({tz, tx}, 0);
  t = attn_block(g, p, "attn.b0", t, heads);
  t = attn_block(g, p, "attn.b1", t, heads);
  int nz = g.shape(tz.id)[0];
  int nx = g.shape(tx.id)[0];
  int d = g.shape(t.id)[1];
  auto xs = g.slice(t, {nz, 0}, {nx, d});
  auto logits = g.affine(g.layernorm_lastdim(xs), p("attn.head.w"), p("attn.head.b"));
  int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(nx))));
  return g.sigmoid(g.reshape(logits, Shape{side, side}));
}

template <class T, class P>
Var<T> response_map(Graph<T>& g, P& p, Arch arch, Var<T> z, Var<T> x) {
  return arch == Arch::ConvSiamese ? conv_response(g, p, z, x) : attn_response(g, p, z, x);
}

}  // namespace nets

// Class-balanced binary cross entropy against a {0,1} response grid.
// Positive terms carry weight n_neg/n_pos; the sum is divided by the total
// weight, so an all-0.5 prediction scores exactly ln 2.
template <class T>
Var<T> balanced_bce(Graph<T>& g, Var<T> response, const Tensor<float>& label) {
  int64_t n = label.size();
  int64_t n_pos = 0;
  for (int64_t i = 0; i < n; ++i) n_pos += label[i] > 0.5f ? 1 : 0;
  int64_t n_neg = n - n_pos;
  // one-class grids degenerate to plain BCE; rebalancing would zero them out
  double w_pos = (n_pos > 0 && n_neg > 0) ? static_cast<double>(n_neg) / static_cast<double>(n_pos) : 1.0;
  Tensor<T> weights(label.shape);
  Tensor<T> pos(label.shape), neg(label.shape);
  double w_total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    bool is_pos = label[i] > 0.5f;
    pos[i] = is_pos ? T(1) : T(0);
    neg[i] = is_pos ? T(0) : T(1);
    double w = is_pos ? w_pos : 1.0;
    weights[i] = static_cast<T>(w);
    w_total += w;
  }
  auto p = g.clamp(response, T(1e-7), T(1) - T(1e-7));
  auto wv = g.constant(std::move(weights), "bce_weights");
  auto posv = g.constant(std::move(pos), "bce_pos");
  auto negv = g.constant(std::move(neg), "bce_neg");
  auto log_p = g.log(p);
  auto log_q = g.log(g.add_scalar(g.neg(p), T(1)));
  auto per_cell = g.neg(g.add(g.mul(posv, log_p), g.mul(negv, log_q)));
  return g.mul_scalar(g.sum(g.mul(wv, per_cell)), static_cast<T>(1.0 / w_total));
}

// ---- training, inference, evaluation ----

struct TrackTrainOpts {
  int epochs = 30;
  int batch = 8;
  float lr = 1e-3f;
  int max_gap = 10;
  double shift_frac = 0.2;
  uint64_t seed = 1;
};

struct TrackTrainResult {
  ParamSet params;
  std::vector<double> epoch_loss;  // mean training loss per epoch
};

TrackTrainResult train_tracker(const std::vector<VideoRecord>& videos, Arch arch, const TrackTrainOpts& opts);

struct TrackInferOpts {
  std::vector<double> scales = {0.96, 1.0, 1.04};
  double scale_penalty = 0.97;
  double scale_damping = 0.6;
};

// first output box is the init box verbatim; all boxes clamped to the frame
std::vector<BBox> track_sequence(const ParamSet& params, Arch arch, const VideoRecord& video, const BBox& init,
                                 const TrackInferOpts& opts = {});

struct TrackMetrics {
  double ao = 0, sr05 = 0, sr075 = 0, auc = 0, prec = 0;
};

// per-sequence scores; frame 0 (the init frame) is excluded everywhere
TrackMetrics evaluate_sequence(const std::vector<BBox>& pred, const std::vector<BBox>& gt, int frame_size);

// mean of per-video metrics with ground-truth init boxes
TrackMetrics evaluate_tracker(const ParamSet& params, Arch arch, const std::vector<VideoRecord>& videos,
                              int frame_size, const TrackInferOpts& opts = {});

}  // namespace tueforge
