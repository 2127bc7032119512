#include "tueforge/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tueforge {

Arch arch_from_string(const std::string& s) {
  if (s == "conv-siamese") return Arch::ConvSiamese;
  if (s == "attn-mini") return Arch::AttnMini;
  throw std::invalid_argument("unknown tracker architecture '" + s + "' (want conv-siamese or attn-mini)");
}

std::string arch_to_string(Arch a) { return a == Arch::ConvSiamese ? "conv-siamese" : "attn-mini"; }

TrackerLayout layout_for(Arch a) {
  TrackerLayout lay;
  if (a == Arch::ConvSiamese) {
    // three valid convs: 64 -> 30 -> 28 -> 26 features, template 32 -> 10,
    // cross correlation leaves a 17x17 map with effective stride 2
    lay.response_n = 17;
    lay.stride = 2.0;
  } else {
    lay.response_n = 8;
    lay.stride = 8.0;
  }
  return lay;
}

namespace {

void add_uniform(ParamSet& ps, Rng& rng, const std::string& name, Shape shape, int fan_in) {
  Tensor<float> t(std::move(shape));
  float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniformf(-bound, bound);
  ps.add(name, std::move(t));
}

void add_normal(ParamSet& ps, Rng& rng, const std::string& name, Shape shape, float sd) {
  Tensor<float> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal()) * sd;
  ps.add(name, std::move(t));
}

void add_const(ParamSet& ps, const std::string& name, Shape shape, float v) {
  ps.add(name, Tensor<float>::full(std::move(shape), v));
}

}  // namespace

ParamSet init_tracker(Arch a, uint64_t seed) {
  ParamSet ps;
  Rng rng(seed);
  if (a == Arch::ConvSiamese) {
    add_uniform(ps, rng, "conv.c1.w", {16, 3, 5, 5}, 3 * 5 * 5);
    add_const(ps, "conv.c1.b", {16}, 0.0f);
    add_uniform(ps, rng, "conv.c2.w", {32, 16, 3, 3}, 16 * 3 * 3);
    add_const(ps, "conv.c2.b", {32}, 0.0f);
    add_uniform(ps, rng, "conv.c3.w", {32, 32, 3, 3}, 32 * 3 * 3);
    add_const(ps, "conv.c3.b", {32}, 0.0f);
    // correlation scores start huge relative to a sigmoid, so the output
    // affine opens at a tiny gain
    add_const(ps, "conv.adjust_gain", {1}, 1e-3f);
    add_const(ps, "conv.adjust_bias", {1}, 0.0f);
  } else {
    const int d = 64, patch = 8, mlp = 128;
    add_uniform(ps, rng, "attn.embed.w", {3 * patch * patch, d}, 3 * patch * patch);
    add_const(ps, "attn.embed.b", {d}, 0.0f);
    add_normal(ps, rng, "attn.pos_z", {16, d}, 0.02f);
    add_normal(ps, rng, "attn.pos_x", {64, d}, 0.02f);
    for (int b = 0; b < 2; ++b) {
      std::string pre = "attn.b" + std::to_string(b);
      add_uniform(ps, rng, pre + ".qkv.w", {d, 3 * d}, d);
      add_const(ps, pre + ".qkv.b", {3 * d}, 0.0f);
      add_uniform(ps, rng, pre + ".proj.w", {d, d}, d);
      add_const(ps, pre + ".proj.b", {d}, 0.0f);
      add_uniform(ps, rng, pre + ".mlp1.w", {d, mlp}, d);
      add_const(ps, pre + ".mlp1.b", {mlp}, 0.0f);
      add_uniform(ps, rng, pre + ".mlp2.w", {mlp, d}, mlp);
      add_const(ps, pre + ".mlp2.b", {d}, 0.0f);
    }
    add_uniform(ps, rng, "attn.head.w", {d, 1}, d);
    add_const(ps, "attn.head.b", {1}, 0.0f);
  }
  return ps;
}

namespace {

// patch index i <-> frame coordinate under the pixel-area crop grid; a
// window centered on c maps c to the patch grid center (out-1)/2 exactly
double frame_to_patch(double u, double origin, double extent, int out) {
  return (u - origin) * out / extent - 0.5;
}

double patch_to_frame(double i, double origin, double extent, int out) {
  return origin + (i + 0.5) * extent / out;
}

}  // namespace

PairSample draw_pair_sample(const VideoRecord& v, int video_index, const TrackerLayout& lay, int max_gap,
                            double shift_frac, Rng& rng) {
  auto [fi, fj] = sample_pair(static_cast<int>(v.frames.size()), max_gap, rng);
  PairSample s;
  s.video = video_index;
  s.frame_i = fi;
  s.frame_j = fj;
  s.box_i = v.boxes[static_cast<size_t>(fi)];
  s.box_j = v.boxes[static_cast<size_t>(fj)];
  s.spec_z = context_crop_spec(s.box_i, lay.context_factor);
  double sx = 2.0 * context_crop_spec(s.box_j, lay.context_factor).side;
  double dx = rng.uniform(-shift_frac, shift_frac) * sx;
  double dy = rng.uniform(-shift_frac, shift_frac) * sx;
  double cx = s.box_j.cx() + dx;
  double cy = s.box_j.cy() + dy;
  s.search_window = {cx - sx / 2.0, cy - sx / 2.0, sx, sx};
  s.target_px = frame_to_patch(s.box_j.cx(), s.search_window.x, sx, lay.search_size);
  s.target_py = frame_to_patch(s.box_j.cy(), s.search_window.y, sx, lay.search_size);
  return s;
}

Tensor<float> crop_template(const VideoRecord& v, const PairSample& s, const TrackerLayout& lay) {
  return crop_exact(v.frames[static_cast<size_t>(s.frame_i)], s.spec_z.box(), lay.template_size);
}

Tensor<float> crop_search(const VideoRecord& v, const PairSample& s, const TrackerLayout& lay) {
  return crop_exact(v.frames[static_cast<size_t>(s.frame_j)], s.search_window, lay.search_size);
}

BBox target_rect_in_search(const PairSample& s, const TrackerLayout& lay) {
  double k = lay.search_size / s.search_window.w;
  return {frame_to_patch(s.box_j.x, s.search_window.x, s.search_window.w, lay.search_size),
          frame_to_patch(s.box_j.y, s.search_window.y, s.search_window.h, lay.search_size), s.box_j.w * k,
          s.box_j.h * k};
}

BBox target_rect_in_template(const PairSample& s, const TrackerLayout& lay) {
  BBox win = s.spec_z.box();
  double k = lay.template_size / win.w;
  return {frame_to_patch(s.box_i.x, win.x, win.w, lay.template_size),
          frame_to_patch(s.box_i.y, win.y, win.h, lay.template_size), s.box_i.w * k, s.box_i.h * k};
}

Tensor<float> gt_response(const TrackerLayout& lay, double target_px, double target_py) {
  int n = lay.response_n;
  double half_map = (n - 1) / 2.0;
  double half_patch = (lay.search_size - 1) / 2.0;
  double ux = half_map + (target_px - half_patch) / lay.stride;
  double uy = half_map + (target_py - half_patch) / lay.stride;
  Tensor<float> t(Shape{n, n});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double d = std::hypot(c - ux, r - uy);
      t.at(r, c) = d <= lay.label_radius ? 1.0f : 0.0f;
    }
  return t;
}

TrackTrainResult train_tracker(const std::vector<VideoRecord>& videos, Arch arch, const TrackTrainOpts& opts) {
  if (videos.empty()) throw std::invalid_argument("train_tracker: no videos");
  if (opts.epochs < 1 || opts.batch < 1) throw std::invalid_argument("train_tracker: bad epochs/batch");
  TrackerLayout lay = layout_for(arch);
  TrackTrainResult res;
  res.params = init_tracker(arch, derive_seed(opts.seed, "tracker-init"));
  int nv = static_cast<int>(videos.size());
  for (int e = 0; e < opts.epochs; ++e) {
    Rng rng(derive_seed(opts.seed, "tracker-epoch", static_cast<uint64_t>(e)));
    std::vector<int> order(static_cast<size_t>(nv));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    std::vector<PairSample> samples;
    samples.reserve(order.size());
    for (int vi : order)
      samples.push_back(draw_pair_sample(videos[static_cast<size_t>(vi)], vi, lay, opts.max_gap, opts.shift_frac, rng));
    double epoch_sum = 0.0;
    for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(opts.batch)) {
      size_t stop = std::min(samples.size(), start + static_cast<size_t>(opts.batch));
      GradMap acc;
      for (size_t k = start; k < stop; ++k) {
        const PairSample& s = samples[k];
        const VideoRecord& v = videos[static_cast<size_t>(s.video)];
        Graph<float> g;
        ParamBinder<float> p(g, res.params, true);
        auto z = g.constant(crop_template(v, s, lay), "z");
        auto x = g.constant(crop_search(v, s, lay), "x");
        auto resp = nets::response_map(g, p, arch, z, x);
        auto loss = balanced_bce(g, resp, gt_response(lay, s.target_px, s.target_py));
        auto [val, grads] = eval_and_grad(g, loss, p.bound());
        epoch_sum += val;
        for (auto& [name, t] : grads) {
          auto it = acc.find(name);
          if (it == acc.end()) {
            acc.emplace(name, t);
          } else {
            for (int64_t i = 0; i < t.size(); ++i) it->second[i] += t[i];
          }
        }
      }
      float inv = 1.0f / static_cast<float>(stop - start);
      for (auto& [name, t] : acc)
        for (int64_t i = 0; i < t.size(); ++i) t[i] *= inv;
      adam_step(res.params, acc, opts.lr);
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(samples.size()));
  }
  return res;
}

std::vector<BBox> track_sequence(const ParamSet& params, Arch arch, const VideoRecord& video, const BBox& init,
                                 const TrackInferOpts& opts) {
  if (video.frames.empty()) throw std::invalid_argument("track_sequence: empty video");
  if (opts.scales.empty()) throw std::invalid_argument("track_sequence: no scales");
  TrackerLayout lay = layout_for(arch);
  int W = video.frames[0].w, H = video.frames[0].h;
  int n = lay.response_n;
  double half_map = (n - 1) / 2.0;

  Tensor<float> z;
  {
    ContextSpec spec = context_crop_spec(init, lay.context_factor);
    z = crop_exact(video.frames[0], spec.box(), lay.template_size);
  }

  size_t mid = 0;
  double best_mid = 1e9;
  for (size_t k = 0; k < opts.scales.size(); ++k)
    if (std::abs(opts.scales[k] - 1.0) < best_mid) {
      best_mid = std::abs(opts.scales[k] - 1.0);
      mid = k;
    }

  std::vector<BBox> out;
  out.reserve(video.frames.size());
  out.push_back(init);
  BBox cur = init;
  for (size_t t = 1; t < video.frames.size(); ++t) {
    double sz = context_crop_spec(cur, lay.context_factor).side;
    double best = -1e9;
    size_t best_k = mid;
    int best_r = n / 2, best_c = n / 2;
    for (size_t k = 0; k < opts.scales.size(); ++k) {
      double sxk = 2.0 * sz * opts.scales[k];
      BBox win{cur.cx() - sxk / 2.0, cur.cy() - sxk / 2.0, sxk, sxk};
      Graph<float> g;
      ParamBinder<float> p(g, params, false);
      auto zv = g.constant(z, "z");
      auto xv = g.constant(crop_exact(video.frames[t], win, lay.search_size), "x");
      auto resp = nets::response_map(g, p, arch, zv, xv);
      Tensor<float> r = g.value(resp);
      double pen = k == mid ? 1.0 : opts.scale_penalty;
      for (int rr = 0; rr < n; ++rr)
        for (int cc = 0; cc < n; ++cc) {
          double v = pen * static_cast<double>(r.at(rr, cc));
          if (v > best) {
            best = v;
            best_k = k;
            best_r = rr;
            best_c = cc;
          }
        }
    }
    double sxk = 2.0 * sz * opts.scales[best_k];
    BBox win{cur.cx() - sxk / 2.0, cur.cy() - sxk / 2.0, sxk, sxk};
    double px = (lay.search_size - 1) / 2.0 + (best_c - half_map) * lay.stride;
    double py = (lay.search_size - 1) / 2.0 + (best_r - half_map) * lay.stride;
    double fx = patch_to_frame(px, win.x, win.w, lay.search_size);
    double fy = patch_to_frame(py, win.y, win.h, lay.search_size);
    double s_eff = (1.0 - opts.scale_damping) + opts.scale_damping * opts.scales[best_k];
    double nw = std::clamp(cur.w * s_eff, 2.0, static_cast<double>(W));
    double nh = std::clamp(cur.h * s_eff, 2.0, static_cast<double>(H));
    double nx = std::clamp(fx - nw / 2.0, 0.0, W - nw);
    double ny = std::clamp(fy - nh / 2.0, 0.0, H - nh);
    cur = {nx, ny, nw, nh};
    out.push_back(cur);
  }
  return out;
}

TrackMetrics evaluate_sequence(const std::vector<BBox>& pred, const std::vector<BBox>& gt, int frame_size) {
  if (pred.size() != gt.size()) throw std::invalid_argument("evaluate_sequence: length mismatch");
  TrackMetrics m;
  size_t n = pred.size();
  if (n < 2) return m;
  double prec_thresh = 20.0 * frame_size / 256.0;
  std::vector<double> ious;
  ious.reserve(n - 1);
  int hits05 = 0, hits075 = 0, prec_hits = 0;
  for (size_t i = 1; i < n; ++i) {
    double v = iou(pred[i], gt[i]);
    ious.push_back(v);
    if (v > 0.5) ++hits05;
    if (v > 0.75) ++hits075;
    double ce = std::hypot(pred[i].cx() - gt[i].cx(), pred[i].cy() - gt[i].cy());
    if (ce < prec_thresh) ++prec_hits;
  }
  double cnt = static_cast<double>(ious.size());
  m.ao = std::accumulate(ious.begin(), ious.end(), 0.0) / cnt;
  m.sr05 = hits05 / cnt;
  m.sr075 = hits075 / cnt;
  m.prec = prec_hits / cnt;
  double auc = 0.0;
  for (int k = 0; k <= 20; ++k) {
    double tau = 0.05 * k;
    int hit = 0;
    for (double v : ious)
      if (v > tau) ++hit;
    auc += hit / cnt;
  }
  m.auc = auc / 21.0;
  return m;
}

TrackMetrics evaluate_tracker(const ParamSet& params, Arch arch, const std::vector<VideoRecord>& videos,
                              int frame_size, const TrackInferOpts& opts) {
  if (videos.empty()) throw std::invalid_argument("evaluate_tracker: no videos");
  TrackMetrics mean;
  for (const auto& v : videos) {
    auto pred = track_sequence(params, arch, v, v.boxes[0], opts);
    TrackMetrics m = evaluate_sequence(pred, v.boxes, frame_size);
    mean.ao += m.ao;
    mean.sr05 += m.sr05;
    mean.sr075 += m.sr075;
    mean.auc += m.auc;
    mean.prec += m.prec;
  }
  double nv = static_cast<double>(videos.size());
  mean.ao /= nv;
  mean.sr05 /= nv;
  mean.sr075 /= nv;
  mean.auc /= nv;
  mean.prec /= nv;
  return mean;
}

}  // namespace tueforge
