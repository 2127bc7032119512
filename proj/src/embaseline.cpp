#include "tueforge/embaseline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace tueforge {

Tensor<float> pgd_step(const Tensor<float>& delta, const Tensor<float>& grad, float alpha, const Budget& budget) {
  if (!same_shape(delta.shape, grad.shape))
    throw std::invalid_argument("pgd_step: delta " + shape_str(delta.shape) + " vs grad " + shape_str(grad.shape));
  float sf = budget.sigma_f();
  Tensor<float> out(delta.shape);
  for (int64_t i = 0; i < delta.size(); ++i) {
    float gv = grad[i];
    if (!std::isfinite(gv)) throw std::runtime_error("pgd_step: non-finite gradient");
    float s = gv > 0.0f ? 1.0f : (gv < 0.0f ? -1.0f : 0.0f);
    float v = delta[i] - alpha * s;
    out[i] = v < -sf ? -sf : (v > sf ? sf : v);
  }
  return out;
}

EmCropCtx make_em_crop_ctx(const VideoRecord& v, const PairSample& s, const TrackerLayout& lay) {
  EmCropCtx c;
  c.z_clean = crop_template(v, s, lay);
  c.x_clean = crop_search(v, s, lay);
  c.target_z = rounded_rect(target_rect_in_template(s, lay));
  c.target_x = rounded_rect(target_rect_in_search(s, lay));
  c.square_z = PasteRect{0, 0, lay.template_size, lay.template_size};
  // the context square of the target box spans exactly half the search
  // window, i.e. a template-sized square centered on the target
  double side = context_crop_spec(s.box_j, lay.context_factor).side * lay.search_size / s.search_window.w;
  c.square_x = rounded_rect(BBox{s.target_px + 0.5 - side / 2.0, s.target_py + 0.5 - side / 2.0, side, side});
  c.label = gt_response(lay, s.target_px, s.target_py);

  auto contains = [](const PasteRect& outer, const PasteRect& inner) {
    return inner.x0 >= outer.x0 && inner.y0 >= outer.y0 && inner.x0 + inner.w <= outer.x0 + outer.w &&
           inner.y0 + inner.h <= outer.y0 + outer.h;
  };
  PasteRect patch_z{0, 0, lay.template_size, lay.template_size};
  PasteRect patch_x{0, 0, lay.search_size, lay.search_size};
  if (!contains(patch_z, c.target_z) || !contains(patch_x, c.square_x) || !contains(c.square_x, c.target_x) ||
      !contains(c.square_z, c.target_z))
    throw std::logic_error("make_em_crop_ctx: paste geometry does not fit the patch (centered sample expected)");
  return c;
}

EmInnerResult optimize_video_noise(const ParamSet& surrogate, const EmCropCtx& ctx, NoiseTile tile, int T, float alpha,
                                   bool with_context) {
  if (T < 1) throw std::invalid_argument("optimize_video_noise: need at least one step");
  EmInnerResult out;
  for (int t = 0; t < T; ++t) {
    Graph<float> g;
    ParamBinder<float> p(g, surrogate, false);
    auto dt = g.leaf(tile.delta_t, true, "delta_t");
    auto dc = g.leaf(tile.delta_c, with_context, "delta_c");
    auto loss = balanced_bce(g, em_protected_response(g, p, ctx, dt, dc, with_context), ctx.label);
    g.backward(loss);
    if (t == 0) out.loss_before = g.scalar_value(loss);
    tile.delta_t = pgd_step(tile.delta_t, g.grad(dt), alpha, tile.budget);
    if (with_context) tile.delta_c = pgd_step(tile.delta_c, g.grad(dc), alpha, tile.budget);
  }
  {
    Graph<float> g;
    ParamBinder<float> p(g, surrogate, false);
    auto dt = g.constant(tile.delta_t, "delta_t");
    auto dc = g.constant(tile.delta_c, "delta_c");
    auto loss = balanced_bce(g, em_protected_response(g, p, ctx, dt, dc, with_context), ctx.label);
    out.loss_after = g.scalar_value(loss);
  }
  out.tile = std::move(tile);
  return out;
}

EmProtectResult em_protect_dataset(const std::vector<VideoRecord>& videos, const DatasetManifest& manifest,
                                   const EmOpts& opts) {
  if (!is_clean_provenance(manifest.provenance))
    throw std::invalid_argument("em_protect_dataset: refusing non-clean dataset (provenance '" + manifest.provenance +
                                "')");
  if (videos.empty() || videos.size() != manifest.videos.size())
    throw std::invalid_argument("em_protect_dataset: dataset/manifest mismatch");
  if (opts.outer_epochs < 1) throw std::invalid_argument("em_protect_dataset: need at least one outer epoch");

  auto t_start = std::chrono::steady_clock::now();
  TrackerLayout lay = layout_for(Arch::ConvSiamese);
  ParamSet surrogate = init_tracker(Arch::ConvSiamese, derive_seed(opts.seed, "em-surrogate"));
  int nv = static_cast<int>(videos.size());
  std::vector<NoiseTile> tiles(static_cast<size_t>(nv));
  for (auto& t : tiles) t.budget = opts.budget;

  EmProtectResult res;
  for (int e = 0; e < opts.outer_epochs; ++e) {
    // one fixed, centered pair per video for this phase
    Rng pair_rng(derive_seed(opts.seed, "em-pairs", static_cast<uint64_t>(e)));
    std::vector<EmCropCtx> ctxs;
    ctxs.reserve(static_cast<size_t>(nv));
    for (int vi = 0; vi < nv; ++vi)
      ctxs.push_back(make_em_crop_ctx(videos[static_cast<size_t>(vi)],
                                      draw_pair_sample(videos[static_cast<size_t>(vi)], vi, lay, opts.max_gap, 0.0,
                                                       pair_rng),
                                      lay));

    bool last = e == opts.outer_epochs - 1;
    for (int vi = 0; vi < nv; ++vi) {
      auto inner = optimize_video_noise(surrogate, ctxs[static_cast<size_t>(vi)], tiles[static_cast<size_t>(vi)],
                                        opts.inner_steps, opts.alpha, opts.with_context);
      tiles[static_cast<size_t>(vi)] = std::move(inner.tile);
      if (last) {
        res.last_loss_before.push_back(inner.loss_before);
        res.last_loss_after.push_back(inner.loss_after);
      }
    }

    // outer phase: one surrogate epoch on the noised crops, tiles frozen
    Rng order_rng(derive_seed(opts.seed, "em-outer", static_cast<uint64_t>(e)));
    std::vector<int> order(static_cast<size_t>(nv));
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order.begin(), order.end());
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opts.batch)) {
      size_t stop = std::min(order.size(), start + static_cast<size_t>(opts.batch));
      GradMap acc;
      for (size_t k = start; k < stop; ++k) {
        int vi = order[k];
        Graph<float> g;
        ParamBinder<float> p(g, surrogate, true);
        auto dt = g.constant(tiles[static_cast<size_t>(vi)].delta_t, "delta_t");
        auto dc = g.constant(tiles[static_cast<size_t>(vi)].delta_c, "delta_c");
        const EmCropCtx& ctx = ctxs[static_cast<size_t>(vi)];
        auto loss = balanced_bce(g, em_protected_response(g, p, ctx, dt, dc, opts.with_context), ctx.label);
        auto [val, grads] = eval_and_grad(g, loss, p.bound());
        (void)val;
        for (auto& [name, t] : grads) {
          auto it = acc.find(name);
          if (it == acc.end())
            acc.emplace(name, t);
          else
            for (int64_t i = 0; i < t.size(); ++i) it->second[i] += t[i];
        }
      }
      float inv = 1.0f / static_cast<float>(stop - start);
      for (auto& [name, t] : acc)
        for (int64_t i = 0; i < t.size(); ++i) t[i] *= inv;
      adam_step(surrogate, acc, opts.lr);
    }
  }

  // paste the final tiles into every raw frame, then quantize
  for (int vi = 0; vi < nv; ++vi) {
    const VideoRecord& v = videos[static_cast<size_t>(vi)];
    const NoiseTile& tile = tiles[static_cast<size_t>(vi)];
    VideoRecord out;
    out.id = v.id;
    out.boxes = v.boxes;
    out.frames.reserve(v.frames.size());
    for (size_t t = 0; t < v.frames.size(); ++t) {
      Tensor<float> img = to_float_chw(v.frames[t]);
      const BBox& b = v.boxes[t];
      Tensor<float> prot;
      if (opts.with_context) {
        BBox square = context_crop_spec(b, lay.context_factor).box();
        prot = paste(paste_with_hole(img, tile.delta_c, square, b), tile.delta_t, b);
      } else {
        prot = paste(img, tile.delta_t, b);
      }
      out.frames.push_back(to_image8(prot));
    }
    res.videos.push_back(std::move(out));
    res.tiles.emplace(v.id, tile);
    res.tile_bytes += static_cast<int64_t>(tile.delta_t.size()) * 4;
    if (opts.with_context) res.tile_bytes += static_cast<int64_t>(tile.delta_c.size()) * 4;
  }

  res.manifest = manifest;
  res.manifest.provenance =
      std::string(opts.with_context ? "em-protected+ctx" : "em-protected") + " <- " + manifest.provenance;
  res.optimize_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

void save_noise_tiles(const std::string& dir, const std::map<std::string, NoiseTile>& tiles, bool with_context,
                      const Budget& budget) {
  ParamSet ps;
  for (const auto& [id, tile] : tiles) {
    ps.add(id + "/delta_t", tile.delta_t);
    ps.add(id + "/delta_c", tile.delta_c);
  }
  nlohmann::json extra;
  extra["kind"] = "em-tiles";
  extra["with_context"] = with_context;
  extra["sigma"] = budget.sigma;
  save_checkpoint(dir, ps, extra.dump());
}

std::map<std::string, NoiseTile> load_noise_tiles(const std::string& dir, bool* with_context) {
  std::string extra_json;
  ParamSet ps = load_checkpoint(dir, &extra_json);
  auto extra = nlohmann::json::parse(extra_json);
  if (extra.value("kind", "") != "em-tiles")
    throw std::runtime_error("load_noise_tiles: '" + dir + "' is not a tile checkpoint");
  Budget budget(extra.value("sigma", 8.0 / 255.0));
  if (with_context) *with_context = extra.value("with_context", false);
  std::map<std::string, NoiseTile> tiles;
  for (const auto& e : ps.entries()) {
    auto pos = e.name.rfind('/');
    if (pos == std::string::npos) throw std::runtime_error("load_noise_tiles: malformed entry '" + e.name + "'");
    std::string id = e.name.substr(0, pos);
    std::string field = e.name.substr(pos + 1);
    NoiseTile& t = tiles[id];
    t.budget = budget;
    if (field == "delta_t")
      t.delta_t = e.value;
    else if (field == "delta_c")
      t.delta_c = e.value;
    else
      throw std::runtime_error("load_noise_tiles: unknown field in '" + e.name + "'");
  }
  return tiles;
}

}  // namespace tueforge
