#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "suites/loss_suite.hpp"
#include "tueforge/tuegen.hpp"

using namespace tueforge;

namespace {

struct MapBinder {
  Graph<double>* g;
  std::map<std::string, Tensor<double>>* theta;
  std::map<std::string, Var<double>> bound;
  Var<double> operator()(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    Var<double> v = g->leaf(theta->at(name), true, "param");
    bound.emplace(name, v);
    return v;
  }
};

Tensor<float> random_patch(int size, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
  Tensor<float> t(Shape{3, size, size});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniformf(lo, hi);
  return t;
}

// nudges every parameter, so the zero-initialized modulation and head layers
// actually participate
Generator perturbed_generator(uint64_t seed, double scale) {
  Generator gen = init_generator(GenConfig{}, seed);
  Rng rng(derive_seed(seed, "perturb"));
  for (auto& e : gen.w.entries()) {
    Tensor<float>& t = gen.w.entry(e.name).value;
    for (int64_t i = 0; i < t.size(); ++i) t[i] += static_cast<float>(rng.normal(0.0, scale));
  }
  return gen;
}

NormBBox nb(double x, double y, double w, double h) {
  NormBBox b;
  b.x = x;
  b.y = y;
  b.w = w;
  b.h = h;
  return b;
}

double max_abs(const Tensor<float>& t) {
  double m = 0;
  for (int64_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(static_cast<double>(t[i])));
  return m;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (!(a.shape == b.shape)) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

// double-precision generator evaluation for the finite-difference checks;
// loss is the field contracted with a fixed random direction
double field_probe_loss(std::map<std::string, Tensor<double>>& theta, const Tensor<double>& patch,
                        const Tensor<double>& cond, const Tensor<double>& probe,
                        std::map<std::string, Tensor<double>>* grads, Tensor<double>* cond_grad) {
  Graph<double> g;
  MapBinder b{&g, &theta, {}};
  auto pv = g.constant(patch, "patch");
  auto cv = g.leaf(cond, true, "cond");
  auto delta = generator_field(g, b, GenConfig{}, pv, cv);
  auto loss = g.sum(g.mul(delta, g.constant(probe, "probe")));
  if (grads) {
    auto [val, gs] = eval_and_grad(g, loss, b.bound);
    *grads = std::move(gs);
    if (cond_grad) *cond_grad = g.grad(cv);
    return val;
  }
  return g.scalar_value(loss);
}

}  // namespace

TEST_CASE("generator init is deterministic and layered as configured") {
  Generator a = init_generator(GenConfig{}, 7);
  Generator b = init_generator(GenConfig{}, 7);
  Generator c = init_generator(GenConfig{}, 8);
  CHECK(a.w.entries().size() == b.w.entries().size());
  bool same = true, differ = false;
  for (const auto& e : a.w.entries()) {
    same = same && bitwise_equal(e.value, b.w.get(e.name));
    differ = differ || !bitwise_equal(e.value, c.w.get(e.name));
  }
  CHECK(same);
  CHECK(differ);

  CHECK(a.w.get("gen.embed.w").shape == Shape{48, 64});
  CHECK(a.w.get("gen.pos").shape == Shape{64, 64});
  CHECK(a.w.get("gen.b3.mod.w").shape == Shape{64, 384});
  CHECK(a.w.get("gen.head.w").shape == Shape{64, 48});
  CHECK(max_abs(a.w.get("gen.head.w")) == 0.0);
  CHECK(max_abs(a.w.get("gen.b0.mod.w")) == 0.0);
  CHECK(max_abs(a.w.get("gen.final_mod.b")) == 0.0);
  CHECK(max_abs(a.w.get("gen.embed.w")) > 0.0);

  GenConfig bad;
  bad.patch = 5;
  CHECK_THROWS_AS(init_generator(bad, 1), std::invalid_argument);
  bad = GenConfig{};
  bad.heads = 5;
  CHECK_THROWS_AS(init_generator(bad, 1), std::invalid_argument);
}

TEST_CASE("fresh generator is silent and the budget is architectural") {
  const double sigma = 8.0 / 255.0;
  Rng rng(11);
  Generator gen = init_generator(GenConfig{}, 3);
  Tensor<float> patch = random_patch(32, rng);
  Tensor<float> delta = generator_forward(gen, patch, nb(0.2, 0.3, 0.4, 0.5));
  CHECK(delta.shape == Shape{3, 32, 32});
  CHECK(max_abs(delta) == 0.0);

  // wildly scaled parameters saturate the tanh but never pierce the budget
  Generator wild = perturbed_generator(4, 5.0);
  Tensor<float> big = generator_forward(wild, patch, nb(0.1, 0.1, 0.5, 0.5));
  CHECK(max_abs(big) > 0.9 * sigma);
  CHECK(max_abs(big) < sigma);

  // sweep across parameter scales, inputs and conditions
  double worst = 0;
  int64_t values = 0;
  for (int trial = 0; trial < 30; ++trial) {
    double scale = std::pow(10.0, rng.uniform(-2.0, 1.0));
    Generator gt = perturbed_generator(100 + static_cast<uint64_t>(trial), scale);
    Tensor<float> pt = random_patch(32, rng);
    NormBBox cond = nb(rng.uniform(0, 0.5), rng.uniform(0, 0.5), rng.uniform(0, 0.5), rng.uniform(0, 0.5));
    Tensor<float> d = generator_forward(gt, pt, cond);
    worst = std::max(worst, max_abs(d));
    values += d.size();
  }
  CHECK(values >= 90000);
  CHECK(worst < sigma);

  // a condition outside the unit square is rejected
  CHECK_THROWS_AS(generator_forward(gen, patch, nb(1.2, 0.0, 0.3, 0.3)), std::invalid_argument);
  // so is a mis-sized input
  CHECK_THROWS_AS(generator_forward(gen, random_patch(16, rng), nb(0.1, 0.1, 0.2, 0.2)), std::invalid_argument);
}

TEST_CASE("generator checkpoint roundtrip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "tueforge_gen_ckpt";
  fs::remove_all(dir);

  Generator gen = perturbed_generator(21, 0.4);
  save_generator(dir.string(), gen);
  Generator back = load_generator(dir.string());
  CHECK(back.cfg.input_size == gen.cfg.input_size);
  CHECK(back.cfg.depth == gen.cfg.depth);
  CHECK(back.cfg.heads == gen.cfg.heads);
  CHECK(back.cfg.width == gen.cfg.width);
  CHECK(back.cfg.budget.sigma == gen.cfg.budget.sigma);
  bool same = true;
  for (const auto& e : gen.w.entries()) same = same && bitwise_equal(e.value, back.w.get(e.name));
  CHECK(same);

  // a foreign checkpoint kind is refused
  fs::path other = fs::temp_directory_path() / "tueforge_gen_ckpt_other";
  fs::remove_all(other);
  save_checkpoint(other.string(), gen.w, "{\"kind\":\"something-else\"}");
  CHECK_THROWS_AS(load_generator(other.string()), std::runtime_error);
  fs::remove_all(dir);
  fs::remove_all(other);
}

TEST_CASE("conditioning reaches the output") {
  Generator gen = perturbed_generator(31, 0.3);
  Rng rng(32);
  Tensor<float> patch = random_patch(32, rng);
  Tensor<float> da = generator_forward(gen, patch, nb(0.1, 0.2, 0.3, 0.4));
  Tensor<float> db = generator_forward(gen, patch, nb(0.7, 0.6, 0.2, 0.3));
  double l2 = 0;
  for (int64_t i = 0; i < da.size(); ++i) {
    double d = static_cast<double>(da[i]) - db[i];
    l2 += d * d;
  }
  CHECK(std::sqrt(l2) > 0.0);

  // analytic gradient w.r.t. the condition vector against central differences
  std::map<std::string, Tensor<double>> theta;
  for (const auto& e : gen.w.entries()) theta.emplace(e.name, e.value.cast<double>());
  Tensor<double> pd = patch.cast<double>();
  Tensor<double> cond(Shape{4});
  cond[0] = 0.3;
  cond[1] = 0.45;
  cond[2] = 0.25;
  cond[3] = 0.2;
  Tensor<double> probe(Shape{3, 32, 32});
  for (int64_t i = 0; i < probe.size(); ++i) probe[i] = rng.normal();

  std::map<std::string, Tensor<double>> grads;
  Tensor<double> cg;
  field_probe_loss(theta, pd, cond, probe, &grads, &cg);
  double gnorm = 0;
  for (int i = 0; i < 4; ++i) gnorm += cg[i] * cg[i];
  CHECK(gnorm > 0.0);

  Tensor<double> dir(Shape{4});
  double n2 = 0;
  for (int i = 0; i < 4; ++i) {
    dir[i] = rng.normal();
    n2 += dir[i] * dir[i];
  }
  double dot = 0;
  for (int i = 0; i < 4; ++i) {
    dir[i] /= std::sqrt(n2);
    dot += dir[i] * cg[i];
  }
  const double h = 1e-5;
  Tensor<double> cp = cond, cm = cond;
  for (int i = 0; i < 4; ++i) {
    cp[i] += h * dir[i];
    cm[i] -= h * dir[i];
  }
  double fd = (field_probe_loss(theta, pd, cp, probe, nullptr, nullptr) -
               field_probe_loss(theta, pd, cm, probe, nullptr, nullptr)) /
              (2.0 * h);
  double rel = std::abs(fd - dot) / std::max({1e-8, std::abs(fd), std::abs(dot)});
  INFO("cond analytic=" << dot << " fd=" << fd);
  CHECK(rel < 1e-5);
}

TEST_CASE("generator gradients match finite differences") {
  Generator gen = perturbed_generator(41, 0.25);
  Rng rng(42);
  std::map<std::string, Tensor<double>> theta;
  for (const auto& e : gen.w.entries()) theta.emplace(e.name, e.value.cast<double>());
  Tensor<double> patch(Shape{3, 32, 32});
  for (int64_t i = 0; i < patch.size(); ++i) patch[i] = rng.uniform(0.0, 1.0);
  Tensor<double> cond(Shape{4});
  cond[0] = 0.2;
  cond[1] = 0.5;
  cond[2] = 0.3;
  cond[3] = 0.25;
  Tensor<double> probe(Shape{3, 32, 32});
  for (int64_t i = 0; i < probe.size(); ++i) probe[i] = rng.normal();

  std::map<std::string, Tensor<double>> grads;
  field_probe_loss(theta, patch, cond, probe, &grads, nullptr);

  std::map<std::string, Tensor<double>> dir;
  double norm2 = 0;
  for (auto& [name, t] : theta) {
    Tensor<double> d(t.shape);
    for (int64_t i = 0; i < d.size(); ++i) {
      d[i] = rng.normal();
      norm2 += d[i] * d[i];
    }
    dir.emplace(name, std::move(d));
  }
  double inv = 1.0 / std::sqrt(norm2);
  double dot = 0;
  for (auto& [name, d] : dir) {
    const Tensor<double>& gt = grads.at(name);
    for (int64_t i = 0; i < d.size(); ++i) {
      d[i] *= inv;
      dot += gt[i] * d[i];
    }
  }
  const double h = 1e-5;
  auto shift = [&](double step) {
    for (auto& [name, d] : dir) {
      Tensor<double>& t = theta[name];
      for (int64_t i = 0; i < d.size(); ++i) t[i] += step * d[i];
    }
  };
  shift(h);
  double lp = field_probe_loss(theta, patch, cond, probe, nullptr, nullptr);
  shift(-2.0 * h);
  double lm = field_probe_loss(theta, patch, cond, probe, nullptr, nullptr);
  shift(h);
  double fd = (lp - lm) / (2.0 * h);
  double rel = std::abs(fd - dot) / std::max({1e-8, std::abs(fd), std::abs(dot)});
  INFO("params analytic=" << dot << " fd=" << fd);
  CHECK(rel < 1e-5);
}

TEST_CASE("tue pair assembly") {
  const double sigma = 8.0 / 255.0;
  Rng rng(51);
  Tensor<float> x = random_patch(64, rng, 0.15f, 0.85f);
  Tensor<float> z = random_patch(32, rng, 0.15f, 0.85f);
  BBox box{18, 9, 32, 32};
  NormBBox cz = nb(0.3, 0.3, 0.25, 0.25);
  NormBBox cx = nb(0.28, 0.14, 0.5, 0.5);

  Generator silent = init_generator(GenConfig{}, 5);
  TuePatches clean = make_tue_pair(silent, z, x, box, cz, cx);
  CHECK(bitwise_equal(clean.z_hat, z));
  CHECK(bitwise_equal(clean.x_hat, x));
  CHECK(bitwise_equal(clean.e, crop_exact(x, box, 32)));
  CHECK(bitwise_equal(clean.e_hat, clean.e));

  Generator gen = perturbed_generator(52, 1.0);
  TuePatches p = make_tue_pair(gen, z, x, box, cz, cx);
  TuePatches p2 = make_tue_pair(gen, z, x, box, cz, cx);
  CHECK(bitwise_equal(p.x_hat, p2.x_hat));
  CHECK(bitwise_equal(p.z_hat, p2.z_hat));
  CHECK(bitwise_equal(p.e_hat, p2.e_hat));

  // the template deviates by at most the budget everywhere; the float add
  // z + delta rounds, so the measured gap gets half-ulp slack even though
  // delta itself is strictly inside the budget
  double worst_z = 0;
  for (int64_t i = 0; i < z.size(); ++i) worst_z = std::max(worst_z, std::abs(static_cast<double>(p.z_hat[i]) - z[i]));
  CHECK(worst_z > 0.0);
  CHECK(worst_z < sigma + 1e-6);

  // the search patch changes only inside the box, and within budget there
  PasteRect r = rounded_rect(box);
  double worst_in = 0;
  bool outside_clean = true;
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 64; ++yy)
      for (int xx = 0; xx < 64; ++xx) {
        double d = std::abs(static_cast<double>(p.x_hat.at(c, yy, xx)) - x.at(c, yy, xx));
        bool inside = yy >= r.y0 && yy < r.y0 + r.h && xx >= r.x0 && xx < r.x0 + r.w;
        if (inside)
          worst_in = std::max(worst_in, d);
        else
          outside_clean = outside_clean && d == 0.0;
      }
  CHECK(outside_clean);
  CHECK(worst_in > 0.0);
  CHECK(worst_in < sigma + 1e-6);

  // integer box of the generator's own size: re-cropping the protected search
  // patch recovers the protected crop exactly
  CHECK(bitwise_equal(crop_exact(p.x_hat, box, 32), p.e_hat));

  // fractional boxes paste through the rounded window
  BBox frac{20.3, 11.7, 14.2, 17.9};
  TuePatches pf = make_tue_pair(gen, z, x, frac, cz, cx);
  PasteRect rf = rounded_rect(frac);
  bool outside_ok = true;
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 64; ++yy)
      for (int xx = 0; xx < 64; ++xx) {
        bool inside = yy >= rf.y0 && yy < rf.y0 + rf.h && xx >= rf.x0 && xx < rf.x0 + rf.w;
        if (!inside) outside_ok = outside_ok && pf.x_hat.at(c, yy, xx) == x.at(c, yy, xx);
      }
  CHECK(outside_ok);
  CHECK(pf.e_hat.shape == Shape{3, 32, 32});

  // degenerate and escaping boxes are rejected
  CHECK_THROWS_AS(make_tue_pair(gen, z, x, BBox{10, 10, 0, 12}, cz, cx), std::invalid_argument);
  CHECK_THROWS_AS(make_tue_pair(gen, z, x, BBox{50, 50, 30, 30}, cz, cx), std::logic_error);
}

TEST_CASE("contrastive loss closed forms") {
  // exchangeable similarities, random-case loop oracle, positivity
  suites::NceOracleResult res = suites::run_infonce_oracle(24, 61);
  CHECK(res.cases == 24);
  CHECK(res.max_err < 1e-6);
  CHECK(res.max_sym_err < 1e-12);
  CHECK(res.min_loss >= 0.0);

  // saturated case: positive at similarity +1, three negatives at -1
  Graph<double> g;
  Tensor<double> u = Tensor<double>::zeros(Shape{6});
  u[0] = 1.0;
  Tensor<double> nu = Tensor<double>::zeros(Shape{6});
  nu[0] = -1.0;
  auto uv = g.constant(u, "u");
  auto nv = g.constant(nu, "nu");
  double got = g.scalar_value(info_nce(g, uv, uv, {nv, nv, nv}, 0.2));
  double want = std::log1p(3.0 * std::exp(-10.0));
  CHECK(std::abs(got - want) < 1e-12);
  CHECK(got == doctest::Approx(1.362e-4).epsilon(0.01));

  CHECK_THROWS_AS(info_nce(g, uv, uv, {nv}, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(info_nce(g, uv, uv, {nv, nv}, 0.0), std::invalid_argument);
}

TEST_CASE("batched contrastive loss matches a scalar loop through the backbone") {
  ParamSet surr = init_tracker(Arch::ConvSiamese, 71);
  Rng rng(72);
  const double tau = 0.2;
  const int B = 4;

  Graph<float> g;
  ParamBinder<float> p(g, surr, false);
  std::vector<TclItem<float>> items;
  for (int i = 0; i < B; ++i) {
    TclItem<float> it;
    it.z_hat = g.constant(random_patch(32, rng), "zh");
    it.e_hat = g.constant(random_patch(32, rng), "eh");
    it.z = g.constant(random_patch(32, rng), "z");
    it.e = g.constant(random_patch(32, rng), "e");
    items.push_back(it);
  }
  double got = static_cast<double>(g.scalar_value(tcl_loss(g, p, items, tau)));
  CHECK(got > 0.0);
  CHECK(std::isfinite(got));

  // features recomputed through the same graph ops, then a double loop
  auto feat = [&](Var<float> v) { return g.value(tcl_feature(g, p, v)); };
  std::vector<std::vector<double>> ex(B), pos(B), zc(B), ec(B);
  for (int i = 0; i < B; ++i) {
    auto to_vec = [](const Tensor<float>& t) {
      std::vector<double> v(static_cast<size_t>(t.size()));
      for (int64_t k = 0; k < t.size(); ++k) v[static_cast<size_t>(k)] = t[k];
      return v;
    };
    ex[static_cast<size_t>(i)] = to_vec(feat(items[static_cast<size_t>(i)].z_hat));
    pos[static_cast<size_t>(i)] = to_vec(feat(items[static_cast<size_t>(i)].e_hat));
    zc[static_cast<size_t>(i)] = to_vec(feat(items[static_cast<size_t>(i)].z));
    ec[static_cast<size_t>(i)] = to_vec(feat(items[static_cast<size_t>(i)].e));
  }
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
  };
  double want = 0;
  for (int i = 0; i < B; ++i) {
    std::vector<std::vector<double>*> negs{&zc[static_cast<size_t>(i)], &ec[static_cast<size_t>(i)]};
    for (int k = 0; k < B; ++k) {
      if (k == i) continue;
      negs.push_back(&zc[static_cast<size_t>(k)]);
      negs.push_back(&ec[static_cast<size_t>(k)]);
    }
    double denom = std::exp(dot(ex[static_cast<size_t>(i)], pos[static_cast<size_t>(i)]) / tau);
    double num = denom;
    for (auto* nv : negs) denom += std::exp(dot(ex[static_cast<size_t>(i)], *nv) / tau);
    want += -std::log(num / denom);
  }
  want /= B;
  CHECK(std::abs(got - want) < 1e-6);

  // a single-item batch still has its own clean crops as negatives
  Graph<float> g1;
  ParamBinder<float> p1(g1, surr, false);
  TclItem<float> solo;
  solo.z_hat = g1.constant(random_patch(32, rng), "zh");
  solo.e_hat = g1.constant(random_patch(32, rng), "eh");
  solo.z = g1.constant(random_patch(32, rng), "z");
  solo.e = g1.constant(random_patch(32, rng), "e");
  CHECK(g1.scalar_value(tcl_loss(g1, p1, {solo}, tau)) > 0.0);

  Graph<float> g2;
  ParamBinder<float> p2(g2, surr, false);
  CHECK_THROWS_AS(tcl_loss(g2, p2, std::vector<TclItem<float>>{}, tau), std::invalid_argument);
}

TEST_CASE("pair graph feeds gradients to the generator") {
  Generator gen = perturbed_generator(81, 0.2);
  ParamSet surr = init_tracker(Arch::ConvSiamese, 82);
  TrackerLayout lay = layout_for(Arch::ConvSiamese);
  Rng rng(83);

  Graph<float> g;
  ParamBinder<float> pg(g, gen.w, true);
  ParamBinder<float> ps(g, surr, false);
  std::vector<TclItem<float>> items;
  Var<float> bce{};
  for (int i = 0; i < 2; ++i) {
    Tensor<float> z = random_patch(32, rng, 0.2f, 0.8f);
    Tensor<float> x = random_patch(64, rng, 0.2f, 0.8f);
    BBox box{24.0 + i, 22.0, 16.0, 15.0};
    Tensor<float> e = crop_exact(x, box, 32);
    auto pair = tue_pair_graph(g, pg, gen.cfg, z, x, e, box, nb(0.4, 0.4, 0.2, 0.2), nb(0.38, 0.36, 0.25, 0.23));
    auto resp = nets::response_map(g, ps, Arch::ConvSiamese, pair.z_hat, pair.x_hat);
    auto li = balanced_bce(g, resp, gt_response(lay, 31.5, 30.5));
    bce = i == 0 ? li : g.add(bce, li);
    items.push_back({pair.z_hat, pair.e_hat, pair.z, pair.e});
  }
  auto loss = g.add(g.mul_scalar(bce, 0.5f), g.mul_scalar(tcl_loss(g, ps, items, 0.2), 0.05f));
  auto [val, grads] = eval_and_grad(g, loss, pg.bound());
  CHECK(std::isfinite(val));
  CHECK(val > 0.0);
  double gnorm = 0;
  for (const auto& [name, t] : grads)
    for (int64_t i = 0; i < t.size(); ++i) gnorm += static_cast<double>(t[i]) * t[i];
  CHECK(gnorm > 0.0);
  // every generator tensor is wired into the graph
  CHECK(pg.bound().size() == gen.w.entries().size());
}
