#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tueforge/autodiff.hpp"
#include "tueforge/rng.hpp"

namespace tueforge::test {

// Builds the same expression on demand so finite differences can re-evaluate
// it at perturbed leaves. Leaves are bound in order as trainable.
using Builder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // leaf index / element of the worst deviation
  int64_t checked = 0;
};

inline double eval_loss(const Builder& build, const std::vector<Tensor<double>>& leaves) {
  Graph<double> g;
  std::vector<Var<double>> vs;
  vs.reserve(leaves.size());
  for (auto& t : leaves) vs.push_back(g.leaf(t, true));
  return g.scalar_value(build(g, vs));
}

// Central finite differences against reverse-mode gradients, double
// precision. rel err uses max(1, |analytic|, |numeric|) as scale.
inline GradCheckReport grad_check(const Builder& build, std::vector<Tensor<double>> leaves, double h = 1e-4) {
  GradCheckReport rep;
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    std::vector<Var<double>> vs;
    for (auto& t : leaves) vs.push_back(g.leaf(t, true));
    Var<double> loss = build(g, vs);
    g.backward(loss);
    for (auto& v : vs) analytic.push_back(g.grad(v));
  }
  for (size_t li = 0; li < leaves.size(); ++li) {
    for (int64_t i = 0; i < leaves[li].size(); ++i) {
      double orig = leaves[li][i];
      leaves[li][i] = orig + h;
      double fp = eval_loss(build, leaves);
      leaves[li][i] = orig - h;
      double fm = eval_loss(build, leaves);
      leaves[li][i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic[li][i];
      double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(i) + ": analytic " + std::to_string(an) +
                    " vs fd " + std::to_string(fd);
      }
    }
  }
  return rep;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0, double offset = 0.0) {
  Tensor<double> t(std::move(s));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = offset + scale * rng.normal();
  return t;
}

inline Tensor<double> random_uniform_tensor(Shape s, Rng& rng, double lo, double hi) {
  Tensor<double> t(std::move(s));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace tueforge::test
