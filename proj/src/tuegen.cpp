#include "tueforge/tuegen.hpp"

#include <cmath>
#include <string>

#include "json.hpp"
#include "tueforge/rng.hpp"

namespace tueforge {

namespace {

void add_uniform(ParamSet& ps, Rng& rng, const std::string& name, Shape shape, int fan_in) {
  Tensor<float> t(shape);
  float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniformf(-bound, bound);
  ps.add(name, std::move(t));
}

void add_normal(ParamSet& ps, Rng& rng, const std::string& name, Shape shape, float sd) {
  Tensor<float> t(shape);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal(0.0, sd));
  ps.add(name, std::move(t));
}

void add_const(ParamSet& ps, const std::string& name, Shape shape, float v) {
  ps.add(name, Tensor<float>::full(shape, v));
}

void check_config(const GenConfig& cfg) {
  if (cfg.input_size < 1 || cfg.patch < 1 || cfg.input_size % cfg.patch != 0)
    throw std::invalid_argument("generator config: patch must divide the input size");
  if (cfg.width < 1 || cfg.heads < 1 || cfg.width % cfg.heads != 0)
    throw std::invalid_argument("generator config: heads must divide the width");
  if (cfg.depth < 1 || cfg.cond_width < 1 || cfg.mlp_hidden < 1)
    throw std::invalid_argument("generator config: degenerate dimensions");
}

}  // namespace

Generator init_generator(const GenConfig& cfg, uint64_t seed) {
  check_config(cfg);
  const int d = cfg.width;
  Generator gen;
  gen.cfg = cfg;
  ParamSet& ps = gen.w;
  Rng rng(seed);
  add_uniform(ps, rng, "gen.embed.w", {cfg.patch_dim(), d}, cfg.patch_dim());
  add_const(ps, "gen.embed.b", {d}, 0.0f);
  add_normal(ps, rng, "gen.pos", {cfg.tokens(), d}, 0.02f);
  add_uniform(ps, rng, "gen.cond.w", {4, cfg.cond_width}, 4);
  add_const(ps, "gen.cond.b", {cfg.cond_width}, 0.0f);
  for (int b = 0; b < cfg.depth; ++b) {
    std::string pre = "gen.b" + std::to_string(b);
    add_uniform(ps, rng, pre + ".qkv.w", {d, 3 * d}, d);
    add_const(ps, pre + ".qkv.b", {3 * d}, 0.0f);
    add_uniform(ps, rng, pre + ".proj.w", {d, d}, d);
    add_const(ps, pre + ".proj.b", {d}, 0.0f);
    add_uniform(ps, rng, pre + ".mlp1.w", {d, cfg.mlp_hidden}, d);
    add_const(ps, pre + ".mlp1.b", {cfg.mlp_hidden}, 0.0f);
    add_uniform(ps, rng, pre + ".mlp2.w", {cfg.mlp_hidden, d}, cfg.mlp_hidden);
    add_const(ps, pre + ".mlp2.b", {d}, 0.0f);
    // modulation opens neutral: scale 1, shift 0, gates 0, so every block is
    // the identity until training moves it
    add_const(ps, pre + ".mod.w", {cfg.cond_width, 6 * d}, 0.0f);
    add_const(ps, pre + ".mod.b", {6 * d}, 0.0f);
  }
  add_const(ps, "gen.final_mod.w", {cfg.cond_width, 2 * d}, 0.0f);
  add_const(ps, "gen.final_mod.b", {2 * d}, 0.0f);
  // zero head: the generator starts emitting exactly nothing
  add_const(ps, "gen.head.w", {d, cfg.patch_dim()}, 0.0f);
  add_const(ps, "gen.head.b", {cfg.patch_dim()}, 0.0f);
  return gen;
}

void save_generator(const std::string& dir, const Generator& gen) {
  nlohmann::json extra;
  extra["kind"] = "tue-generator";
  extra["input_size"] = gen.cfg.input_size;
  extra["patch"] = gen.cfg.patch;
  extra["depth"] = gen.cfg.depth;
  extra["heads"] = gen.cfg.heads;
  extra["width"] = gen.cfg.width;
  extra["cond_width"] = gen.cfg.cond_width;
  extra["mlp_hidden"] = gen.cfg.mlp_hidden;
  extra["sigma"] = gen.cfg.budget.sigma;
  save_checkpoint(dir, gen.w, extra.dump());
}

Generator load_generator(const std::string& dir) {
  std::string extra_json;
  ParamSet ps = load_checkpoint(dir, &extra_json);
  auto extra = nlohmann::json::parse(extra_json);
  if (extra.value("kind", "") != "tue-generator")
    throw std::runtime_error("load_generator: '" + dir + "' is not a generator checkpoint");
  GenConfig cfg;
  cfg.input_size = extra.value("input_size", cfg.input_size);
  cfg.patch = extra.value("patch", cfg.patch);
  cfg.depth = extra.value("depth", cfg.depth);
  cfg.heads = extra.value("heads", cfg.heads);
  cfg.width = extra.value("width", cfg.width);
  cfg.cond_width = extra.value("cond_width", cfg.cond_width);
  cfg.mlp_hidden = extra.value("mlp_hidden", cfg.mlp_hidden);
  cfg.budget = Budget(extra.value("sigma", 8.0 / 255.0));
  check_config(cfg);
  Generator gen;
  gen.cfg = cfg;
  gen.w = std::move(ps);
  return gen;
}

namespace {

void check_cond(const NormBBox& nb, const char* who) {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in01(nb.x) || !in01(nb.y) || !in01(nb.w) || !in01(nb.h))
    throw std::invalid_argument(std::string(who) + ": condition box leaves [0,1]");
}

Tensor<float> cond_tensor(const NormBBox& nb) {
  Tensor<float> t(Shape{4});
  t[0] = static_cast<float>(nb.x);
  t[1] = static_cast<float>(nb.y);
  t[2] = static_cast<float>(nb.w);
  t[3] = static_cast<float>(nb.h);
  return t;
}

}  // namespace

Tensor<float> generator_forward(const Generator& gen, const Tensor<float>& patch, const NormBBox& cond) {
  check_cond(cond, "generator_forward");
  Graph<float> g;
  ParamBinder<float> p(g, gen.w, false);
  auto pv = g.constant(patch, "patch");
  auto cv = g.constant(cond_tensor(cond), "cond");
  return g.value(generator_field(g, p, gen.cfg, pv, cv));
}

std::vector<Tensor<float>> generator_forward_batch(const Generator& gen, const std::vector<Tensor<float>>& patches,
                                                   const std::vector<NormBBox>& conds) {
  if (patches.size() != conds.size())
    throw std::invalid_argument("generator_forward_batch: " + std::to_string(patches.size()) + " patches vs " +
                                std::to_string(conds.size()) + " conditions");
  if (patches.empty()) return {};
  Graph<float> g;
  ParamBinder<float> p(g, gen.w, false);
  std::vector<Var<float>> pv, cv;
  pv.reserve(patches.size());
  cv.reserve(conds.size());
  for (size_t i = 0; i < patches.size(); ++i) {
    check_cond(conds[i], "generator_forward_batch");
    pv.push_back(g.constant(patches[i], "patch"));
    cv.push_back(g.constant(cond_tensor(conds[i]), "cond"));
  }
  auto fields = generator_field_batch(g, p, gen.cfg, pv, cv);
  std::vector<Tensor<float>> out;
  out.reserve(fields.size());
  for (auto f : fields) out.push_back(g.value(f));
  return out;
}

TuePatches make_tue_pair(const Generator& gen, const Tensor<float>& z, const Tensor<float>& x,
                         const BBox& target_in_x, const NormBBox& cond_z, const NormBBox& cond_x) {
  check_cond(cond_z, "make_tue_pair");
  check_cond(cond_x, "make_tue_pair");
  Tensor<float> e = crop_exact(x, target_in_x, gen.cfg.input_size);
  Graph<float> g;
  ParamBinder<float> p(g, gen.w, false);
  auto vars = tue_pair_graph(g, p, gen.cfg, z, x, e, target_in_x, cond_z, cond_x);
  TuePatches out;
  out.z_hat = g.value(vars.z_hat);
  out.x_hat = g.value(vars.x_hat);
  out.e_hat = g.value(vars.e_hat);
  out.e = std::move(e);
  return out;
}

}  // namespace tueforge
