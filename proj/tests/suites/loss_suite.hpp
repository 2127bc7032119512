#pragma once

// Scalar-loop oracles for the training losses, shared between the unit tests
// and the acceptance run. Everything here is double precision.

#include <cmath>
#include <cstdint>
#include <vector>

#include "tueforge/rng.hpp"
#include "tueforge/tracker.hpp"
#include "tueforge/tuegen.hpp"

namespace tueforge::suites {

struct BceOracleResult {
  double max_err = 0;       // worst |graph - loop| over random cases
  double uniform_err = 0;   // |loss(all 0.5) - ln 2|
  double perfect_loss = 0;  // loss at a saturated correct prediction
  int cases = 0;
};

// Loop oracle: per-cell -w*log(p) with w = n_neg/n_pos on positives, total
// divided by the weight sum. The graph version must agree to float-free
// double accuracy.
inline BceOracleResult run_bce_oracle(int n_cases, uint64_t seed) {
  Rng rng(seed);
  BceOracleResult res;
  for (int t = 0; t < n_cases; ++t) {
    int n = 2 + static_cast<int>(rng.below(7));
    Tensor<double> resp(Shape{n, n});
    Tensor<float> label(Shape{n, n});
    double p_pos = t == 0 ? 0.0 : (t == 1 ? 1.0 : rng.uniform(0.05, 0.6));
    for (int64_t i = 0; i < resp.size(); ++i) {
      resp[i] = rng.uniform(0.02, 0.98);
      label[i] = rng.uniform() < p_pos ? 1.0f : 0.0f;
    }
    int64_t n_pos = 0;
    for (int64_t i = 0; i < label.size(); ++i) n_pos += label[i] > 0.5f ? 1 : 0;
    int64_t n_neg = label.size() - n_pos;
    double w_pos = (n_pos > 0 && n_neg > 0) ? static_cast<double>(n_neg) / static_cast<double>(n_pos) : 1.0;
    double acc = 0, wsum = 0;
    for (int64_t i = 0; i < resp.size(); ++i) {
      double p = std::min(1.0 - 1e-7, std::max(1e-7, resp[i]));
      bool pos = label[i] > 0.5f;
      double w = pos ? w_pos : 1.0;
      acc += w * -(pos ? std::log(p) : std::log(1.0 - p));
      wsum += w;
    }
    double want = acc / wsum;

    Graph<double> g;
    auto r = g.leaf(resp);
    double got = g.scalar_value(balanced_bce(g, r, label));
    double err = std::abs(got - want) / std::max(1.0, std::abs(want));
    if (err > res.max_err) res.max_err = err;
    ++res.cases;
  }
  {
    Graph<double> g;
    Tensor<float> label = gt_response(layout_for(Arch::ConvSiamese), 31.5, 31.5);
    auto r = g.leaf(Tensor<double>::full(Shape{17, 17}, 0.5));
    res.uniform_err = std::abs(g.scalar_value(balanced_bce(g, r, label)) - std::log(2.0));
  }
  {
    Graph<double> g;
    Tensor<float> label = gt_response(layout_for(Arch::ConvSiamese), 31.5, 31.5);
    Tensor<double> resp(Shape{17, 17});
    for (int64_t i = 0; i < resp.size(); ++i) resp[i] = label[i] > 0.5f ? 1.0 : 0.0;
    auto r = g.leaf(std::move(resp));
    res.perfect_loss = g.scalar_value(balanced_bce(g, r, label));
  }
  return res;
}

struct NceOracleResult {
  double max_err = 0;      // worst |float graph - double loop| over random cases
  double max_sym_err = 0;  // worst |loss - ln(1+K)| on exchangeable cases, double graph
  double min_loss = 1e30;  // the loss should never go negative
  int cases = 0;
};

// Random raw feature vectors through the graph loss (float, including the
// in-graph normalization) against a plain double loop; plus the exchangeable
// similarity cases where the answer is ln(1+K) in closed form.
inline NceOracleResult run_infonce_oracle(int n_cases, uint64_t seed) {
  Rng rng(seed);
  NceOracleResult res;
  for (int t = 0; t < n_cases; ++t) {
    int dim = 4 + static_cast<int>(rng.below(29));
    int K = 2 + static_cast<int>(rng.below(5));
    double tau = t % 3 == 0 ? 0.07 : (t % 3 == 1 ? 0.2 : 0.5);
    std::vector<std::vector<double>> raw(static_cast<size_t>(K + 2), std::vector<double>(static_cast<size_t>(dim)));
    for (auto& v : raw)
      for (auto& x : v) x = rng.normal(0.0, 1.0);

    Graph<float> g;
    std::vector<Var<float>> feats;
    for (auto& v : raw) {
      Tensor<float> ft(Shape{dim});
      for (int i = 0; i < dim; ++i) ft[i] = static_cast<float>(v[static_cast<size_t>(i)]);
      feats.push_back(l2_normalize(g, g.constant(std::move(ft), "feat")));
    }
    std::vector<Var<float>> negs(feats.begin() + 2, feats.end());
    double got = static_cast<double>(g.scalar_value(info_nce(g, feats[0], feats[1], negs, tau)));

    // the loop repeats the whole computation in doubles
    auto unit = [&](const std::vector<double>& v) {
      double ss = 1e-12;
      for (double x : v) ss += x * x;
      std::vector<double> u(v.size());
      double inv = 1.0 / std::sqrt(ss);
      for (size_t i = 0; i < v.size(); ++i) u[i] = v[i] * inv;
      return u;
    };
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
      double s = 0;
      for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return s;
    };
    std::vector<std::vector<double>> un;
    for (auto& v : raw) un.push_back(unit(v));
    double s_pos = dot(un[0], un[1]);
    double denom = std::exp(s_pos / tau);
    for (int k = 0; k < K; ++k) denom += std::exp(dot(un[0], un[static_cast<size_t>(k + 2)]) / tau);
    double want = -std::log(std::exp(s_pos / tau) / denom);

    double err = std::abs(got - want) / std::max(1.0, std::abs(want));
    if (err > res.max_err) res.max_err = err;
    if (got < res.min_loss) res.min_loss = got;
    ++res.cases;
  }
  // exchangeable similarities: identical unit features make every logit equal
  for (int K : {2, 3, 5, 7}) {
    Graph<double> g;
    Tensor<double> u = Tensor<double>::zeros(Shape{8});
    u[0] = 1.0;
    auto uv = g.constant(u, "unit");
    std::vector<Var<double>> negs(static_cast<size_t>(K), uv);
    double got = g.scalar_value(info_nce(g, uv, uv, negs, 0.2));
    double err = std::abs(got - std::log(1.0 + K));
    if (err > res.max_sym_err) res.max_sym_err = err;
  }
  return res;
}

}  // namespace tueforge::suites
