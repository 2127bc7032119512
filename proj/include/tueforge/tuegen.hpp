#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tueforge/autodiff.hpp"
#include "tueforge/geometry.hpp"
#include "tueforge/optim.hpp"
#include "tueforge/tensor.hpp"
#include "tueforge/tracker.hpp"

namespace tueforge {

// Conditional perturbation generator: a small DiT-flavoured transformer over
// patch tokens of a 32x32 crop. The normalized target box is embedded and
// drives per-block scale/shift/gate modulation; the output stage is
// sigma * tanh(raw), so every emitted value sits strictly inside the l-inf
// budget by construction, no projection step anywhere.
struct GenConfig {
  int input_size = 32;
  int patch = 4;
  int depth = 4;
  int heads = 4;
  int width = 64;
  int cond_width = 64;
  int mlp_hidden = 128;
  Budget budget{};

  int grid() const { return input_size / patch; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return 3 * patch * patch; }
};

struct Generator {
  GenConfig cfg;
  ParamSet w;
};

Generator init_generator(const GenConfig& cfg, uint64_t seed);

void save_generator(const std::string& dir, const Generator& gen);
Generator load_generator(const std::string& dir);

// ---- graph builders (templated like the tracker nets, so the double
// precision finite-difference checks run the production code path) ----

// multi-head attention over a stack of B token groups; each head attends
// within its own group only, the qkv and output projections run over the
// whole stack at once
template <class T, class P>
Var<T> blocked_mha(Graph<T>& g, P& p, const std::string& pre, Var<T> tokens, int B, int n, int heads) {
  int d = g.shape(tokens.id)[1];
  int dh = d / heads;
  auto qkv = g.affine(tokens, p(pre + ".qkv.w"), p(pre + ".qkv.b"));
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Var<T>> groups;
  groups.reserve(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i) {
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto q = g.slice(qkv, {i * n, h * dh}, {n, dh});
      auto k = g.slice(qkv, {i * n, d + h * dh}, {n, dh});
      auto v = g.slice(qkv, {i * n, 2 * d + h * dh}, {n, dh});
      auto att = g.softmax_lastdim(g.mul_scalar(g.matmul(q, k, false, true), scale));
      outs.push_back(g.matmul(att, v));
    }
    groups.push_back(g.concat(outs, 1));
  }
  auto cat = B == 1 ? groups[0] : g.concat(groups, 0);
  return g.affine(cat, p(pre + ".proj.w"), p(pre + ".proj.b"));
}

// raw bounded fields for a whole batch of crops at once. Every crop's tokens
// are stacked into one tall matrix so the embeddings, projections and MLPs
// run as a few large matrix products; attention and the conditioning rows
// stay per crop. All the stacked ops work row by row, so each crop's field
// comes out exactly as the one-crop path would produce it.
template <class T, class P>
std::vector<Var<T>> generator_field_batch(Graph<T>& g, P& p, const GenConfig& cfg, const std::vector<Var<T>>& patches,
                                          const std::vector<Var<T>>& conds) {
  if (patches.empty() || patches.size() != conds.size())
    throw std::invalid_argument("generator_field_batch: want matching, non-empty patch and cond lists");
  const int B = static_cast<int>(patches.size());
  const int n = cfg.tokens();
  const int d = cfg.width;
  const int S = cfg.input_size;

  std::vector<Var<T>> tok_parts, cond_parts;
  tok_parts.reserve(patches.size());
  cond_parts.reserve(patches.size());
  for (int i = 0; i < B; ++i) {
    const Shape& sp = g.shape(patches[static_cast<size_t>(i)].id);
    if (sp.size() != 3 || sp[0] != 3 || sp[1] != S || sp[2] != S)
      throw std::invalid_argument("generator_field: patch must be [3," + std::to_string(S) + "," + std::to_string(S) +
                                  "]");
    if (g.numel(conds[static_cast<size_t>(i)].id) != 4)
      throw std::invalid_argument("generator_field: cond must hold 4 values");
    tok_parts.push_back(g.to_patches(patches[static_cast<size_t>(i)], cfg.patch));
    cond_parts.push_back(g.reshape(conds[static_cast<size_t>(i)], Shape{1, 4}));
  }
  auto cat0 = [&](const std::vector<Var<T>>& parts) { return parts.size() == 1 ? parts[0] : g.concat(parts, 0); };
  auto pos = p("gen.pos");
  auto post = B == 1 ? pos : g.concat(std::vector<Var<T>>(patches.size(), pos), 0);
  auto t = g.add(g.affine(cat0(tok_parts), p("gen.embed.w"), p("gen.embed.b")), post);
  auto c = g.tanh(g.affine(cat0(cond_parts), p("gen.cond.w"), p("gen.cond.b")));

  auto rows = [&](Var<T> m, int k) { return g.slice(m, {0, k * d}, {B, d}); };
  auto modulate = [&](Var<T> h, Var<T> m, int k) {
    return g.rowshift(g.rowscale(g.layernorm_lastdim(h), g.add_scalar(rows(m, k), T(1))), rows(m, k + 1));
  };

  for (int b = 0; b < cfg.depth; ++b) {
    std::string pre = "gen.b" + std::to_string(b);
    auto m = g.affine(c, p(pre + ".mod.w"), p(pre + ".mod.b"));
    t = g.add(t, g.rowscale(blocked_mha(g, p, pre, modulate(t, m, 0), B, n, cfg.heads), rows(m, 2)));
    auto h2 = modulate(t, m, 3);
    auto mlp = g.affine(g.tanh(g.affine(h2, p(pre + ".mlp1.w"), p(pre + ".mlp1.b"))), p(pre + ".mlp2.w"),
                        p(pre + ".mlp2.b"));
    t = g.add(t, g.rowscale(mlp, rows(m, 5)));
  }

  auto mf = g.affine(c, p("gen.final_mod.w"), p("gen.final_mod.b"));
  auto raw = g.affine(modulate(t, mf, 0), p("gen.head.w"), p("gen.head.b"));
  auto bounded = g.mul_scalar(g.tanh(raw), static_cast<T>(cfg.budget.sigma_f()));
  std::vector<Var<T>> fields;
  fields.reserve(patches.size());
  for (int i = 0; i < B; ++i) {
    auto chunk = B == 1 ? bounded : g.slice(bounded, {i * n, 0}, {n, cfg.patch_dim()});
    fields.push_back(g.from_patches(chunk, cfg.patch, S, S));
  }
  return fields;
}

// raw bounded field; patch is [3,S,S], cond is a length-4 vector holding the
// normalized box (x, y, w, h)
template <class T, class P>
Var<T> generator_field(Graph<T>& g, P& p, const GenConfig& cfg, Var<T> patch, Var<T> cond) {
  return generator_field_batch(g, p, cfg, std::vector<Var<T>>{patch}, std::vector<Var<T>>{cond}).front();
}

// protected template / search / target-crop triple built in-graph, with the
// clean crops kept around as constants for the contrastive negatives
template <class T>
struct TuePairVars {
  Var<T> z_hat, x_hat, e_hat;
  Var<T> z, x, e;
};

// one optimization item: clean crops plus pasting geometry
template <class T>
struct TuePairSpec {
  Tensor<T> z, x, e;
  BBox target_in_x;
  NormBBox cond_z, cond_x;
};

// builds every pair of the batch around a single stacked generator call
template <class T, class P>
std::vector<TuePairVars<T>> tue_batch_graph(Graph<T>& g, P& p, const GenConfig& cfg,
                                            const std::vector<TuePairSpec<T>>& specs) {
  if (specs.empty()) throw std::invalid_argument("tue_batch_graph: empty batch");
  std::vector<PasteRect> rects;
  rects.reserve(specs.size());
  for (const auto& s : specs) {
    PasteRect r = rounded_rect(s.target_in_x);
    const int S = static_cast<int>(s.x.shape[1]);
    if (r.y0 < 0 || r.x0 < 0 || r.y0 + r.h > S || r.x0 + r.w > S)
      throw std::logic_error("tue_pair_graph: target window sticks out of the search patch");
    rects.push_back(r);
  }

  auto cvec = [&](const NormBBox& nb, const char* name) {
    Tensor<T> t(Shape{4});
    t[0] = static_cast<T>(nb.x);
    t[1] = static_cast<T>(nb.y);
    t[2] = static_cast<T>(nb.w);
    t[3] = static_cast<T>(nb.h);
    return g.constant(std::move(t), name);
  };

  std::vector<TuePairVars<T>> out(specs.size());
  std::vector<Var<T>> imgs, conds;
  imgs.reserve(2 * specs.size());
  conds.reserve(2 * specs.size());
  for (size_t i = 0; i < specs.size(); ++i) {
    out[i].z = g.constant(specs[i].z, "z_clean");
    out[i].x = g.constant(specs[i].x, "x_clean");
    out[i].e = g.constant(specs[i].e, "e_clean");
    imgs.push_back(out[i].z);
    conds.push_back(cvec(specs[i].cond_z, "cond_z"));
    imgs.push_back(out[i].e);
    conds.push_back(cvec(specs[i].cond_x, "cond_x"));
  }
  auto fields = generator_field_batch(g, p, cfg, imgs, conds);
  for (size_t i = 0; i < specs.size(); ++i) {
    auto dz = fields[2 * i];
    auto de = fields[2 * i + 1];
    const PasteRect& r = rects[i];
    out[i].z_hat = g.clamp(g.add(out[i].z, dz), T(0), T(1));
    out[i].e_hat = g.clamp(g.add(out[i].e, de), T(0), T(1));
    out[i].x_hat = g.clamp(g.paste_add(out[i].x, g.resize_bilinear(de, r.h, r.w), r.y0, r.x0), T(0), T(1));
  }
  return out;
}

template <class T, class P>
TuePairVars<T> tue_pair_graph(Graph<T>& g, P& p, const GenConfig& cfg, const Tensor<T>& z, const Tensor<T>& x,
                              const Tensor<T>& e, const BBox& target_in_x, const NormBBox& cond_z,
                              const NormBBox& cond_x) {
  TuePairSpec<T> spec;
  spec.z = z;
  spec.x = x;
  spec.e = e;
  spec.target_in_x = target_in_x;
  spec.cond_z = cond_z;
  spec.cond_x = cond_x;
  return tue_batch_graph(g, p, cfg, std::vector<TuePairSpec<T>>{std::move(spec)}).front();
}

// ---- temporal contrastive loss ----

// x / ||x||, with a small floor so all-zero features stay finite
template <class T>
Var<T> l2_normalize(Graph<T>& g, Var<T> v) {
  auto ss = g.add_scalar(g.sum(g.mul(v, v)), T(1e-12));
  return g.mul(v, g.exp(g.mul_scalar(g.log(ss), T(-0.5))));
}

// pooled, normalized backbone embedding of one patch
template <class T, class P>
Var<T> tcl_feature(Graph<T>& g, P& p, Var<T> patch) {
  return l2_normalize(g, g.gap(nets::conv_backbone(g, p, patch)));
}

// -log( e^{s_pos/tau} / (e^{s_pos/tau} + sum_k e^{s_k/tau}) ) over unit
// feature vectors; returns shape {1}
template <class T>
Var<T> info_nce(Graph<T>& g, Var<T> exemplar, Var<T> positive, const std::vector<Var<T>>& negatives, double tau) {
  if (negatives.size() < 2) throw std::invalid_argument("info_nce: need at least 2 negatives");
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  auto sim = [&](Var<T> a, Var<T> b) { return g.reshape(g.sum(g.mul(a, b)), Shape{1}); };
  std::vector<Var<T>> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(sim(exemplar, positive));
  for (auto nv : negatives) logits.push_back(sim(exemplar, nv));
  auto scores = g.mul_scalar(g.concat(logits, 0), static_cast<T>(1.0 / tau));
  return g.neg(g.log(g.slice(g.softmax_lastdim(scores), {0}, {1})));
}

// one batch item: the protected pair plus its clean crops
template <class T>
struct TclItem {
  Var<T> z_hat, e_hat, z, e;
};

// exemplar z_hat_i vs positive e_hat_i, against every clean crop in the
// batch (own video's z/e included); mean over items. All pairwise
// similarities come out of two feature-matrix products, and each item's
// logit row is gathered from them in the order [positive, own z, own e,
// other videos' z/e ascending].
template <class T, class P>
Var<T> tcl_loss(Graph<T>& g, P& p, const std::vector<TclItem<T>>& items, double tau) {
  if (items.empty()) throw std::invalid_argument("tcl_loss: empty batch");
  if (!(tau > 0.0)) throw std::invalid_argument("tcl_loss: temperature must be positive");
  const int B = static_cast<int>(items.size());
  std::vector<Var<T>> ex_rows, pos_rows, clean_rows;
  ex_rows.reserve(items.size());
  pos_rows.reserve(items.size());
  clean_rows.reserve(2 * items.size());
  auto rowf = [&](Var<T> v) {
    auto f = tcl_feature(g, p, v);
    return g.reshape(f, Shape{1, g.shape(f.id)[0]});
  };
  for (const auto& it : items) {
    ex_rows.push_back(rowf(it.z_hat));
    pos_rows.push_back(rowf(it.e_hat));
    clean_rows.push_back(rowf(it.z));
    clean_rows.push_back(rowf(it.e));
  }
  auto fe = g.concat(ex_rows, 0);
  auto fp = g.concat(pos_rows, 0);
  auto fc = g.concat(clean_rows, 0);
  auto pos_sim = g.matmul(fe, fp, false, true);  // [B,B], diagonal holds the positives
  auto neg_sim = g.matmul(fe, fc, false, true);  // [B,2B], columns 2k/2k+1 are video k's z/e
  Var<T> acc{};
  for (int i = 0; i < B; ++i) {
    std::vector<Var<T>> parts;
    parts.push_back(g.reshape(g.slice(pos_sim, {i, i}, {1, 1}), Shape{1}));
    parts.push_back(g.reshape(g.slice(neg_sim, {i, 2 * i}, {1, 2}), Shape{2}));
    if (i > 0) parts.push_back(g.reshape(g.slice(neg_sim, {i, 0}, {1, 2 * i}), Shape{2 * i}));
    if (i < B - 1) {
      int rest = 2 * (B - 1 - i);
      parts.push_back(g.reshape(g.slice(neg_sim, {i, 2 * i + 2}, {1, rest}), Shape{rest}));
    }
    auto scores = g.mul_scalar(g.concat(parts, 0), static_cast<T>(1.0 / tau));
    auto li = g.neg(g.log(g.slice(g.softmax_lastdim(scores), {0}, {1})));
    acc = i == 0 ? li : g.add(acc, li);
  }
  return g.mul_scalar(acc, T(1) / static_cast<T>(B));
}

// ---- eager wrappers ----

Tensor<float> generator_forward(const Generator& gen, const Tensor<float>& patch, const NormBBox& cond);

// whole batch through one stacked graph; output i is bitwise identical to
// generator_forward(gen, patches[i], conds[i])
std::vector<Tensor<float>> generator_forward_batch(const Generator& gen, const std::vector<Tensor<float>>& patches,
                                                   const std::vector<NormBBox>& conds);

struct TuePatches {
  Tensor<float> z_hat;  // protected template patch
  Tensor<float> x_hat;  // search patch with the target perturbation pasted in
  Tensor<float> e_hat;  // protected exact target crop
  Tensor<float> e;      // clean exact target crop
};

TuePatches make_tue_pair(const Generator& gen, const Tensor<float>& z, const Tensor<float>& x,
                         const BBox& target_in_x, const NormBBox& cond_z, const NormBBox& cond_x);

}  // namespace tueforge
