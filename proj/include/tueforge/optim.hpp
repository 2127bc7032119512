#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "tueforge/autodiff.hpp"
#include "tueforge/tensor.hpp"

namespace tueforge {

using GradMap = std::map<std::string, Tensor<float>>;

struct AdamMoments {
  Tensor<float> m, v;
};

struct ParamEntry {
  std::string name;
  Tensor<float> value;
  AdamMoments adam;
};

// Named trainable tensors plus Adam state. Entry order is insertion order
// and fixes the serialization layout.
class ParamSet {
 public:
  Tensor<float>& add(const std::string& name, Tensor<float> init) {
    if (index_.count(name)) throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
    ParamEntry e;
    e.name = name;
    e.adam.m = Tensor<float>::zeros(init.shape);
    e.adam.v = Tensor<float>::zeros(init.shape);
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    index_[name] = entries_.size() - 1;
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<float>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamSet: unknown parameter '" + name + "'");
    return entries_[it->second].value;
  }
  const Tensor<float>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamSet: unknown parameter '" + name + "'");
    return entries_[it->second].value;
  }

  ParamEntry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamSet: unknown parameter '" + name + "'");
    return entries_[it->second];
  }

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }

  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }
  void bump_step() { ++step_; }

  int64_t total_numel() const {
    int64_t n = 0;
    for (auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, size_t> index_;
  int64_t step_ = 0;
};

// One Adam update over the listed gradients. Parameters without an entry in
// grads are left untouched. Non-finite gradients are an error, named.
inline void adam_step(ParamSet& ps, const GradMap& grads, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
                      float eps = 1e-8f) {
  for (auto& [name, g] : grads) {
    ParamEntry& e = ps.entry(name);
    if (!same_shape(g.shape, e.value.shape))
      throw std::invalid_argument("adam_step: gradient shape " + shape_str(g.shape) + " does not match parameter '" +
                                  name + "' " + shape_str(e.value.shape));
    for (float v : g.data)
      if (!std::isfinite(v)) throw std::runtime_error("adam_step: non-finite gradient for parameter '" + name + "'");
  }
  ps.bump_step();
  auto t = static_cast<double>(ps.step());
  double c1 = 1.0 - std::pow(static_cast<double>(beta1), t);
  double c2 = 1.0 - std::pow(static_cast<double>(beta2), t);
  for (auto& [name, g] : grads) {
    ParamEntry& e = ps.entry(name);
    float* p = e.value.ptr();
    float* m = e.adam.m.ptr();
    float* v = e.adam.v.ptr();
    const float* gp = g.ptr();
    int64_t n = e.value.size();
    for (int64_t i = 0; i < n; ++i) {
      m[i] = beta1 * m[i] + (1.0f - beta1) * gp[i];
      v[i] = beta2 * v[i] + (1.0f - beta2) * gp[i] * gp[i];
      double mhat = m[i] / c1;
      double vhat = v[i] / c2;
      p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// Binds ParamSet entries into a graph as leaves, one per first use.
// trainable controls whether gradients flow to them.
template <class T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& g, const ParamSet& ps, bool trainable) : g_(&g), ps_(&ps), trainable_(trainable) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor<float>& t = ps_->get(name);
    Var<T> v = g_->leaf(t.template cast<T>(), trainable_, "param");
    bound_.emplace(name, v);
    return v;
  }

  const std::map<std::string, Var<T>>& bound() const { return bound_; }

 private:
  Graph<T>* g_;
  const ParamSet* ps_;
  bool trainable_;
  std::map<std::string, Var<T>> bound_;
};

// Runs backward from loss and collects gradients for the named variables.
// Repeated calls on freshly built graphs with the same inputs are
// bit-identical; parameters the loss never touches get zero gradients.
template <class T>
std::pair<T, std::map<std::string, Tensor<T>>> eval_and_grad(Graph<T>& g, Var<T> loss,
                                                             const std::map<std::string, Var<T>>& wrt) {
  g.backward(loss);
  std::map<std::string, Tensor<T>> out;
  for (auto& [name, v] : wrt) out.emplace(name, g.grad(v));
  return {g.scalar_value(loss), std::move(out)};
}

template <class T>
GradMap to_grad_map(const std::map<std::string, Tensor<T>>& grads) {
  GradMap out;
  for (auto& [name, t] : grads) out.emplace(name, t.template cast<float>());
  return out;
}

// Checkpoint directory layout: meta.json (names, shapes, dtype, step, extra)
// plus params.bin, the float32 little-endian payload in meta order.
void save_checkpoint(const std::string& dir, const ParamSet& ps, const std::string& extra_json = "{}");
ParamSet load_checkpoint(const std::string& dir, std::string* extra_json = nullptr);

}  // namespace tueforge
