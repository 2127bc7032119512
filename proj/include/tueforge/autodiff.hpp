#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tueforge/kernels.hpp"
#include "tueforge/tensor.hpp"

namespace tueforge {

template <class T>
class Graph;

// Handle into a graph; cheap to copy, valid for the graph's lifetime.
template <class T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

// Dynamic reverse-mode tape. Each op records its inputs and a backward
// closure; the whole structure is built per evaluation and dropped
// afterwards. T is float for training, double for gradient checking.
template <class T>
class Graph {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    std::vector<int> in;
    std::function<void(Graph&, int)> back;
    const char* op = "";
    bool requires_grad = false;
  };

  std::vector<Node> nodes;

  // typical graphs here run hundreds to thousands of nodes; growing from
  // zero re-moves every std::function on each doubling
  Graph() { nodes.reserve(512); }

  int64_t numel(int id) const { return static_cast<int64_t>(nodes[static_cast<size_t>(id)].value.size()); }
  const Shape& shape(int id) const { return nodes[static_cast<size_t>(id)].shape; }
  const T* val(int id) const { return nodes[static_cast<size_t>(id)].value.data(); }
  T* val_mut(int id) { return nodes[static_cast<size_t>(id)].value.data(); }

  // grad destination for an input; null when the input does not need one
  T* grad_dst(int id) {
    Node& n = nodes[static_cast<size_t>(id)];
    if (!n.requires_grad) return nullptr;
    touched_[static_cast<size_t>(id)] = 1;
    return n.grad.data();
  }

  Tensor<T> value(Var<T> v) const {
    const Node& n = nodes.at(static_cast<size_t>(v.id));
    return Tensor<T>(n.shape, n.value);
  }

  T scalar_value(Var<T> v) const {
    const Node& n = nodes.at(static_cast<size_t>(v.id));
    if (n.value.size() != 1)
      throw std::invalid_argument(std::string("scalar_value: node '") + n.op + "' has shape " + shape_str(n.shape));
    return n.value[0];
  }

  // zeros if backward never reached the node
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes.at(static_cast<size_t>(v.id));
    if (n.grad.empty()) return Tensor<T>::zeros(n.shape);
    return Tensor<T>(n.shape, n.grad);
  }

  Var<T> leaf(Tensor<T> t, bool requires_grad = false, const char* name = "leaf") {
    int id = add_node(std::move(t.shape), std::move(t.data), {}, name, requires_grad);
    return {this, id};
  }

  Var<T> constant(Tensor<T> t, const char* name = "const") { return leaf(std::move(t), false, name); }

  Var<T> scalar(T v) { return constant(Tensor<T>::full(Shape{}, v), "scalar"); }

  // ---- elementwise ----

  Var<T> add(Var<T> a, Var<T> b) { return binary_ew(a, b, "add", Ew::Add); }
  Var<T> sub(Var<T> a, Var<T> b) { return binary_ew(a, b, "sub", Ew::Sub); }
  Var<T> mul(Var<T> a, Var<T> b) { return binary_ew(a, b, "mul", Ew::Mul); }

  Var<T> neg(Var<T> a) { return mul_scalar(a, T(-1)); }

  Var<T> add_scalar(Var<T> a, T c) {
    int id = unary_begin(a, "add_scalar");
    const T* x = val(a.id);
    T* y = val_mut(id);
    for (int64_t i = 0, n = numel(id); i < n; ++i) y[i] = x[i] + c;
    finish(id, [a](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
        for (int64_t i = 0, n = g.numel(self); i < n; ++i) ga[i] += gy[i];
      }
    });
    return {this, id};
  }

  Var<T> mul_scalar(Var<T> a, T c) {
    int id = unary_begin(a, "mul_scalar");
    const T* x = val(a.id);
    T* y = val_mut(id);
    for (int64_t i = 0, n = numel(id); i < n; ++i) y[i] = c * x[i];
    finish(id, [a, c](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
        for (int64_t i = 0, n = g.numel(self); i < n; ++i) ga[i] += c * gy[i];
      }
    });
    return {this, id};
  }

  Var<T> tanh(Var<T> a) {
    int id = unary_begin(a, "tanh");
    const T* x = val(a.id);
    T* y = val_mut(id);
    for (int64_t i = 0, n = numel(id); i < n; ++i) y[i] = std::tanh(x[i]);
    finish(id, [a](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const Node& s = g.nodes[static_cast<size_t>(self)];
        for (int64_t i = 0, n = g.numel(self); i < n; ++i)
          ga[i] += s.grad[static_cast<size_t>(i)] * (T(1) - s.value[static_cast<size_t>(i)] * s.value[static_cast<size_t>(i)]);
      }
    });
    return {this, id};
  }

  Var<T> sigmoid(Var<T> a) {
    int id = unary_begin(a, "sigmoid");
    const T* x = val(a.id);
    T* y = val_mut(id);
    for (int64_t i = 0, n = numel(id); i < n; ++i) {
      T v = x[i];
      if (v >= T(0)) {
        T e = std::exp(-v);
        y[i] = T(1) / (T(1) + e);
      } else {
        T e = std::exp(v);
        y[i] = e / (T(1) + e);
      }
    }
    finish(id, [a](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const Node& s = g.nodes[static_cast<size_t>(self)];
        for (int64_t i = 0, n = g.numel(self); i < n; ++i) {
          T yv = s.value[static_cast<size_t>(i)];
          ga[i] += s.grad[static_cast<size_t>(i)] * yv * (T(1) - yv);
        }
      }
    });
    return {this, id};
  }

  Var<T> exp(Var<T> a) {
    int id = unary_begin(a, "exp");
    const T* x = val(a.id);
    T* y = val_mut(id);
    for (int64_t i = 0, n = numel(id); i < n; ++i) y[i] = std::exp(x[i]);
    finish(id, [a](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const Node& s = g.nodes[static_cast<size_t>(self)];
        for (int64_t i = 0, n = g.numel(self); i < n; ++i)
          ga[i] += s.grad[static_cast<size_t>(i)] * s.value[static_cast<size_t>(i)];
      }
    });
    return {this, id};
  }

  Var<T> log(Var<T> a) {
    int id = unary_begin(a, "log");
    const T* x = val(a.id);
    T* y = val_mut(id);
    for (int64_t i = 0, n = numel(id); i < n; ++i) y[i] = std::log(x[i]);
    finish(id, [a](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const Node& s = g.nodes[static_cast<size_t>(self)];
        const T* x = g.val(a.id);
        for (int64_t i = 0, n = g.numel(self); i < n; ++i)
          ga[i] += s.grad[static_cast<size_t>(i)] / x[i];
      }
    });
    return {this, id};
  }

  // clamp with pass-through subgradient strictly inside the range
  Var<T> clamp(Var<T> a, T lo, T hi) {
    if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
    int id = unary_begin(a, "clamp");
    const T* x = val(a.id);
    T* y = val_mut(id);
    for (int64_t i = 0, n = numel(id); i < n; ++i) y[i] = x[i] < lo ? lo : (x[i] > hi ? hi : x[i]);
    finish(id, [a, lo, hi](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const Node& s = g.nodes[static_cast<size_t>(self)];
        const T* x = g.val(a.id);
        for (int64_t i = 0, n = g.numel(self); i < n; ++i)
          if (x[i] > lo && x[i] < hi) ga[i] += s.grad[static_cast<size_t>(i)];
      }
    });
    return {this, id};
  }

  // ---- reductions ----

  Var<T> sum(Var<T> a) {
    check_var(a, "sum");
    double acc = 0.0;
    const T* x = val(a.id);
    for (int64_t i = 0, n = numel(a.id); i < n; ++i) acc += static_cast<double>(x[i]);
    int id = add_node(Shape{}, {static_cast<T>(acc)}, {a.id}, "sum", nodes[static_cast<size_t>(a.id)].requires_grad);
    finish(id, [a](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        T gy = g.nodes[static_cast<size_t>(self)].grad[0];
        for (int64_t i = 0, n = g.numel(a.id); i < n; ++i) ga[i] += gy;
      }
    });
    return {this, id};
  }

  Var<T> mean(Var<T> a) {
    check_var(a, "mean");
    int64_t n = numel(a.id);
    if (n == 0) throw std::invalid_argument("mean of empty tensor");
    return mul_scalar(sum(a), T(1) / static_cast<T>(n));
  }

  // ---- shape plumbing ----

  Var<T> reshape(Var<T> a, Shape s) {
    check_var(a, "reshape");
    if (shape_numel(s) != numel(a.id))
      throw std::invalid_argument("reshape: cannot view " + shape_str(shape(a.id)) + " as " + shape_str(s));
    int id = add_node(std::move(s), std::vector<T>(nodes[static_cast<size_t>(a.id)].value), {a.id}, "reshape",
                      nodes[static_cast<size_t>(a.id)].requires_grad);
    finish(id, [a](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const auto& gy = g.nodes[static_cast<size_t>(self)].grad;
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
    });
    return {this, id};
  }

  Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    for (auto& p : parts) check_var(p, "concat");
    const Shape& s0 = shape(parts[0].id);
    int rank = static_cast<int>(s0.size());
    if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: axis out of range");
    Shape out = s0;
    int total = 0;
    bool rg = false;
    for (auto& p : parts) {
      const Shape& s = shape(p.id);
      if (static_cast<int>(s.size()) != rank) throw std::invalid_argument("concat: rank mismatch");
      for (int d = 0; d < rank; ++d)
        if (d != axis && s[static_cast<size_t>(d)] != s0[static_cast<size_t>(d)])
          throw std::invalid_argument("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
      total += s[static_cast<size_t>(axis)];
      rg = rg || nodes[static_cast<size_t>(p.id)].requires_grad;
    }
    out[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= s0[static_cast<size_t>(d)];

    std::vector<T> value(static_cast<size_t>(shape_numel(out)));
    std::vector<int> ids;
    int64_t off = 0;
    for (auto& p : parts) {
      ids.push_back(p.id);
      int64_t di = shape(p.id)[static_cast<size_t>(axis)] * inner;
      const T* src = val(p.id);
      for (int64_t o = 0; o < outer; ++o)
        std::copy(src + o * di, src + (o + 1) * di, value.data() + o * total * inner + off);
      off += di;
    }
    int id = add_node(std::move(out), std::move(value), std::move(ids), "concat", rg);
    int64_t inner_c = inner, outer_c = outer, total_c = static_cast<int64_t>(total) * inner;
    auto parts_c = parts;
    finish(id, [parts_c, inner_c, outer_c, total_c](Graph& g, int self) {
      const auto& gy = g.nodes[static_cast<size_t>(self)].grad;
      int64_t off = 0;
      for (auto& p : parts_c) {
        // recover this part's slab width from its numel
        int64_t axis_extent = g.numel(p.id) / (outer_c * inner_c);
        int64_t w = axis_extent * inner_c;
        if (T* ga = g.grad_dst(p.id)) {
          for (int64_t o = 0; o < outer_c; ++o) {
            const T* src = gy.data() + o * total_c + off;
            T* dst = ga + o * w;
            for (int64_t i = 0; i < w; ++i) dst[i] += src[i];
          }
        }
        off += w;
      }
    });
    return {this, id};
  }

  Var<T> slice(Var<T> a, const std::vector<int>& offset, const std::vector<int>& size) {
    check_var(a, "slice");
    const Shape& s = shape(a.id);
    int rank = static_cast<int>(s.size());
    if (static_cast<int>(offset.size()) != rank || static_cast<int>(size.size()) != rank)
      throw std::invalid_argument("slice: offset/size rank mismatch for " + shape_str(s));
    for (int d = 0; d < rank; ++d) {
      if (offset[static_cast<size_t>(d)] < 0 || size[static_cast<size_t>(d)] < 1 ||
          offset[static_cast<size_t>(d)] + size[static_cast<size_t>(d)] > s[static_cast<size_t>(d)])
        throw std::invalid_argument("slice: window exceeds " + shape_str(s));
    }
    Shape out(size.begin(), size.end());
    std::vector<int64_t> in_stride(static_cast<size_t>(rank), 1);
    for (int d = rank - 2; d >= 0; --d)
      in_stride[static_cast<size_t>(d)] = in_stride[static_cast<size_t>(d) + 1] * s[static_cast<size_t>(d) + 1];
    int64_t n_out = shape_numel(out);
    std::vector<T> value(static_cast<size_t>(n_out));
    const T* src = val(a.id);
    std::vector<int> idx(static_cast<size_t>(rank), 0);
    for (int64_t f = 0; f < n_out; ++f) {
      int64_t pos = 0;
      for (int d = 0; d < rank; ++d)
        pos += (offset[static_cast<size_t>(d)] + idx[static_cast<size_t>(d)]) * in_stride[static_cast<size_t>(d)];
      value[static_cast<size_t>(f)] = src[pos];
      for (int d = rank - 1; d >= 0; --d) {
        if (++idx[static_cast<size_t>(d)] < size[static_cast<size_t>(d)]) break;
        idx[static_cast<size_t>(d)] = 0;
      }
    }
    int id = add_node(std::move(out), std::move(value), {a.id}, "slice", nodes[static_cast<size_t>(a.id)].requires_grad);
    finish(id, [a, offset, size, in_stride](Graph& g, int self) {
      T* ga = g.grad_dst(a.id);
      if (!ga) return;
      const auto& gy = g.nodes[static_cast<size_t>(self)].grad;
      int rank = static_cast<int>(size.size());
      std::vector<int> idx(static_cast<size_t>(rank), 0);
      for (int64_t f = 0; f < static_cast<int64_t>(gy.size()); ++f) {
        int64_t pos = 0;
        for (int d = 0; d < rank; ++d)
          pos += (offset[static_cast<size_t>(d)] + idx[static_cast<size_t>(d)]) * in_stride[static_cast<size_t>(d)];
        ga[pos] += gy[static_cast<size_t>(f)];
        for (int d = rank - 1; d >= 0; --d) {
          if (++idx[static_cast<size_t>(d)] < size[static_cast<size_t>(d)]) break;
          idx[static_cast<size_t>(d)] = 0;
        }
      }
    });
    return {this, id};
  }

  // folds an image into patch rows: x [C,H,W] -> [(H/p)*(W/p), C*p*p], rows
  // ordered py-major then px, each row flattened (c, dy, dx). Pure data
  // movement, same layout the slice/reshape/concat chain would produce.
  Var<T> to_patches(Var<T> x, int patch) {
    check_var(x, "to_patches");
    const Shape& s = shape(x.id);
    if (s.size() != 3) throw std::invalid_argument("to_patches: want [C,H,W], got " + shape_str(s));
    if (patch < 1 || s[1] % patch != 0 || s[2] % patch != 0)
      throw std::invalid_argument("to_patches: patch " + std::to_string(patch) + " does not tile " + shape_str(s));
    int C = s[0], H = s[1], W = s[2];
    int ny = H / patch, nx = W / patch;
    int cols = C * patch * patch;
    std::vector<T> value(static_cast<size_t>(ny) * nx * cols);
    const T* src = val(x.id);
    for (int py = 0; py < ny; ++py)
      for (int px = 0; px < nx; ++px) {
        T* row = value.data() + (static_cast<size_t>(py) * nx + px) * cols;
        for (int c = 0; c < C; ++c)
          for (int dy = 0; dy < patch; ++dy) {
            const T* sp = src + (static_cast<size_t>(c) * H + py * patch + dy) * W + px * patch;
            std::copy(sp, sp + patch, row + (c * patch + dy) * patch);
          }
      }
    int id = add_node(Shape{ny * nx, cols}, std::move(value), {x.id}, "to_patches",
                      nodes[static_cast<size_t>(x.id)].requires_grad);
    finish(id, [x, C, H, W, patch, ny, nx, cols](Graph& g, int self) {
      T* gx = g.grad_dst(x.id);
      if (!gx) return;
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      for (int py = 0; py < ny; ++py)
        for (int px = 0; px < nx; ++px) {
          const T* row = gy + (static_cast<size_t>(py) * nx + px) * cols;
          for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < patch; ++dy) {
              T* dp = gx + (static_cast<size_t>(c) * H + py * patch + dy) * W + px * patch;
              const T* rp = row + (c * patch + dy) * patch;
              for (int dx = 0; dx < patch; ++dx) dp[dx] += rp[dx];
            }
        }
    });
    return {this, id};
  }

  // inverse of to_patches: rows [(h/p)*(w/p), C*p*p] -> [C,h,w]
  Var<T> from_patches(Var<T> t, int patch, int h, int w) {
    check_var(t, "from_patches");
    const Shape& s = shape(t.id);
    if (s.size() != 2) throw std::invalid_argument("from_patches: want patch rows, got " + shape_str(s));
    if (patch < 1 || h < 1 || w < 1 || h % patch != 0 || w % patch != 0)
      throw std::invalid_argument("from_patches: patch " + std::to_string(patch) + " does not tile " +
                                  std::to_string(h) + "x" + std::to_string(w));
    int ny = h / patch, nx = w / patch;
    if (s[0] != ny * nx || s[1] % (patch * patch) != 0)
      throw std::invalid_argument("from_patches: " + shape_str(s) + " does not hold " + std::to_string(ny * nx) +
                                  " patches");
    int C = s[1] / (patch * patch);
    std::vector<T> value(static_cast<size_t>(C) * h * w);
    const T* src = val(t.id);
    int cols = s[1];
    for (int py = 0; py < ny; ++py)
      for (int px = 0; px < nx; ++px) {
        const T* row = src + (static_cast<size_t>(py) * nx + px) * cols;
        for (int c = 0; c < C; ++c)
          for (int dy = 0; dy < patch; ++dy) {
            T* dp = value.data() + (static_cast<size_t>(c) * h + py * patch + dy) * w + px * patch;
            std::copy(row + (c * patch + dy) * patch, row + (c * patch + dy) * patch + patch, dp);
          }
      }
    int id = add_node(Shape{C, h, w}, std::move(value), {t.id}, "from_patches",
                      nodes[static_cast<size_t>(t.id)].requires_grad);
    finish(id, [t, C, patch, ny, nx, cols, h, w](Graph& g, int self) {
      T* gt = g.grad_dst(t.id);
      if (!gt) return;
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      for (int py = 0; py < ny; ++py)
        for (int px = 0; px < nx; ++px) {
          T* row = gt + (static_cast<size_t>(py) * nx + px) * cols;
          for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < patch; ++dy) {
              const T* sp = gy + (static_cast<size_t>(c) * h + py * patch + dy) * w + px * patch;
              T* rp = row + (c * patch + dy) * patch;
              for (int dx = 0; dx < patch; ++dx) rp[dx] += sp[dx];
            }
        }
    });
    return {this, id};
  }

  // h [n,d] scaled per column by s: one row ([d] or [1,d]) broadcast down all
  // of h, or one row per equal block of h's rows ([B,d] with B dividing n)
  Var<T> rowscale(Var<T> h, Var<T> s) { return row_broadcast(h, s, "rowscale", true); }

  // h [n,d] shifted per column by s, broadcast the same way as rowscale
  Var<T> rowshift(Var<T> h, Var<T> s) { return row_broadcast(h, s, "rowshift", false); }

  // ---- linear algebra ----

  // op(a)[m,k] * op(b)[k,n]; a flag means the operand is stored transposed
  Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
    check_var(a, "matmul");
    check_var(b, "matmul");
    const Shape& sa = shape(a.id);
    const Shape& sb = shape(b.id);
    if (sa.size() != 2 || sb.size() != 2)
      throw std::invalid_argument("matmul: want matrices, got " + shape_str(sa) + " and " + shape_str(sb));
    int m = ta ? sa[1] : sa[0];
    int ka = ta ? sa[0] : sa[1];
    int kb = tb ? sb[1] : sb[0];
    int n = tb ? sb[0] : sb[1];
    if (ka != kb)
      throw std::invalid_argument("matmul: inner dims disagree, " + shape_str(sa) + (ta ? "^T" : "") + " vs " +
                                  shape_str(sb) + (tb ? "^T" : ""));
    std::vector<T> value(static_cast<size_t>(m) * n, T(0));
    kernels::gemm_acc(ta, tb, m, n, ka, val(a.id), val(b.id), value.data());
    bool rg = nodes[static_cast<size_t>(a.id)].requires_grad || nodes[static_cast<size_t>(b.id)].requires_grad;
    int id = add_node(Shape{m, n}, std::move(value), {a.id, b.id}, "matmul", rg);
    finish(id, [a, b, ta, tb, m, n, ka](Graph& g, int self) {
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      if (T* ga = g.grad_dst(a.id)) {
        if (!ta)
          kernels::gemm_acc(false, !tb, m, ka, n, gy, g.val(b.id), ga);
        else
          kernels::gemm_acc(tb, true, ka, m, n, g.val(b.id), gy, ga);
      }
      if (T* gb = g.grad_dst(b.id)) {
        if (!tb)
          kernels::gemm_acc(!ta, false, ka, n, m, g.val(a.id), gy, gb);
        else
          kernels::gemm_acc(true, ta, n, ka, m, gy, g.val(a.id), gb);
      }
    });
    return {this, id};
  }

  // x[m,k] * w[k,n] + bias[n] broadcast over rows
  Var<T> affine(Var<T> x, Var<T> w, Var<T> bias) {
    check_var(x, "affine");
    check_var(w, "affine");
    check_var(bias, "affine");
    const Shape& sx = shape(x.id);
    const Shape& sw = shape(w.id);
    const Shape& sb = shape(bias.id);
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[0])
      throw std::invalid_argument("affine: " + shape_str(sx) + " * " + shape_str(sw));
    if (!(sb.size() == 1 && sb[0] == sw[1]))
      throw std::invalid_argument("affine: bias " + shape_str(sb) + " does not match " + shape_str(sw));
    int m = sx[0], k = sx[1], n = sw[1];
    std::vector<T> value(static_cast<size_t>(m) * n);
    const T* bv = val(bias.id);
    for (int i = 0; i < m; ++i) std::copy(bv, bv + n, value.data() + static_cast<size_t>(i) * n);
    kernels::gemm_acc(false, false, m, n, k, val(x.id), val(w.id), value.data());
    bool rg = nodes[static_cast<size_t>(x.id)].requires_grad || nodes[static_cast<size_t>(w.id)].requires_grad ||
              nodes[static_cast<size_t>(bias.id)].requires_grad;
    int id = add_node(Shape{m, n}, std::move(value), {x.id, w.id, bias.id}, "affine", rg);
    finish(id, [x, w, bias, m, n, k](Graph& g, int self) {
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      if (T* gx = g.grad_dst(x.id)) kernels::gemm_acc(false, true, m, k, n, gy, g.val(w.id), gx);
      if (T* gw = g.grad_dst(w.id)) kernels::gemm_acc(true, false, k, n, m, g.val(x.id), gy, gw);
      if (T* gb = g.grad_dst(bias.id)) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gb[j] += gy[static_cast<size_t>(i) * n + j];
      }
    });
    return {this, id};
  }

  // ---- convolution and correlation ----

  Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int pad) {
    return conv2d_impl(x, w, &bias, stride, pad);
  }
  Var<T> conv2d(Var<T> x, Var<T> w, int stride, int pad) { return conv2d_impl(x, w, nullptr, stride, pad); }

  // template z slides over search x, channels summed
  Var<T> xcorr(Var<T> z, Var<T> x) {
    check_var(z, "xcorr");
    check_var(x, "xcorr");
    const Shape& sz = shape(z.id);
    const Shape& sx = shape(x.id);
    if (sz.size() != 3 || sx.size() != 3 || sz[0] != sx[0])
      throw std::invalid_argument("xcorr: want [C,h,w] pair, got " + shape_str(sz) + " and " + shape_str(sx));
    int ho = sx[1] - sz[1] + 1, wo = sx[2] - sz[2] + 1;
    if (ho < 1 || wo < 1)
      throw std::invalid_argument("xcorr: template " + shape_str(sz) + " larger than search " + shape_str(sx));
    int C = sz[0], hz = sz[1], wz = sz[2], hx = sx[1], wx = sx[2];
    std::vector<T> value(static_cast<size_t>(ho) * wo, T(0));
    kernels::xcorr_acc(val(z.id), val(x.id), value.data(), C, hz, wz, hx, wx);
    bool rg = nodes[static_cast<size_t>(z.id)].requires_grad || nodes[static_cast<size_t>(x.id)].requires_grad;
    int id = add_node(Shape{ho, wo}, std::move(value), {z.id, x.id}, "xcorr", rg);
    finish(id, [z, x, C, hz, wz, hx, wx](Graph& g, int self) {
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      T* gz = g.grad_dst(z.id);
      T* gx = g.grad_dst(x.id);
      if (gz || gx) kernels::xcorr_grad_acc(gy, g.val(z.id), g.val(x.id), gz, gx, C, hz, wz, hx, wx);
    });
    return {this, id};
  }

  // ---- image ops ----

  Var<T> resize_bilinear(Var<T> a, int oh, int ow) {
    check_var(a, "resize_bilinear");
    const Shape& s = shape(a.id);
    if (s.size() != 3) throw std::invalid_argument("resize_bilinear: want [C,H,W], got " + shape_str(s));
    if (oh < 1 || ow < 1) throw std::invalid_argument("resize_bilinear: output size must be positive");
    int C = s[0], H = s[1], W = s[2];
    std::vector<T> value(static_cast<size_t>(C) * oh * ow);
    kernels::resize_bilinear(val(a.id), value.data(), C, H, W, oh, ow);
    int id = add_node(Shape{C, oh, ow}, std::move(value), {a.id}, "resize_bilinear",
                      nodes[static_cast<size_t>(a.id)].requires_grad);
    finish(id, [a, C, H, W, oh, ow](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id))
        kernels::resize_bilinear_grad_acc(g.nodes[static_cast<size_t>(self)].grad.data(), ga, C, H, W, oh, ow);
    });
    return {this, id};
  }

  // global average pool [C,H,W] -> [C]
  Var<T> gap(Var<T> a) {
    check_var(a, "gap");
    const Shape& s = shape(a.id);
    if (s.size() != 3) throw std::invalid_argument("gap: want [C,H,W], got " + shape_str(s));
    int C = s[0], H = s[1], W = s[2];
    int64_t hw = static_cast<int64_t>(H) * W;
    if (hw == 0) throw std::invalid_argument("gap: empty spatial extent");
    std::vector<T> value(static_cast<size_t>(C));
    const T* x = val(a.id);
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t i = 0; i < hw; ++i) acc += static_cast<double>(x[c * hw + i]);
      value[static_cast<size_t>(c)] = static_cast<T>(acc / static_cast<double>(hw));
    }
    int id = add_node(Shape{C}, std::move(value), {a.id}, "gap", nodes[static_cast<size_t>(a.id)].requires_grad);
    finish(id, [a, C, hw](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
        for (int c = 0; c < C; ++c) {
          T gv = gy[c] / static_cast<T>(hw);
          for (int64_t i = 0; i < hw; ++i) ga[c * hw + i] += gv;
        }
      }
    });
    return {this, id};
  }

  // adds tile [C,th,tw] into a copy of img [C,H,W] at (y0,x0); window must fit
  Var<T> paste_add(Var<T> img, Var<T> tile, int y0, int x0) {
    check_var(img, "paste_add");
    check_var(tile, "paste_add");
    const Shape& si = shape(img.id);
    const Shape& st = shape(tile.id);
    if (si.size() != 3 || st.size() != 3 || si[0] != st[0])
      throw std::invalid_argument("paste_add: want [C,H,W] pair, got " + shape_str(si) + " and " + shape_str(st));
    int C = si[0], H = si[1], W = si[2], th = st[1], tw = st[2];
    if (y0 < 0 || x0 < 0 || y0 + th > H || x0 + tw > W)
      throw std::invalid_argument("paste_add: tile window outside image");
    std::vector<T> value(nodes[static_cast<size_t>(img.id)].value);
    const T* tv = val(tile.id);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < th; ++y) {
        T* dst = value.data() + (static_cast<size_t>(c) * H + y0 + y) * W + x0;
        const T* src = tv + (static_cast<size_t>(c) * th + y) * tw;
        for (int x = 0; x < tw; ++x) dst[x] += src[x];
      }
    bool rg = nodes[static_cast<size_t>(img.id)].requires_grad || nodes[static_cast<size_t>(tile.id)].requires_grad;
    int id = add_node(Shape{C, H, W}, std::move(value), {img.id, tile.id}, "paste_add", rg);
    finish(id, [img, tile, C, H, W, th, tw, y0, x0](Graph& g, int self) {
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      if (T* gi = g.grad_dst(img.id)) {
        for (int64_t i = 0, n = static_cast<int64_t>(C) * H * W; i < n; ++i) gi[i] += gy[i];
      }
      if (T* gt = g.grad_dst(tile.id)) {
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < th; ++y) {
            const T* src = gy + (static_cast<size_t>(c) * H + y0 + y) * W + x0;
            T* dst = gt + (static_cast<size_t>(c) * th + y) * tw;
            for (int x = 0; x < tw; ++x) dst[x] += src[x];
          }
      }
    });
    return {this, id};
  }

  // ---- normalization ----

  Var<T> softmax_lastdim(Var<T> a) {
    check_var(a, "softmax");
    const Shape& s = shape(a.id);
    if (s.empty()) throw std::invalid_argument("softmax: scalar input");
    int n = s.back();
    int64_t rows = numel(a.id) / n;
    std::vector<T> value(static_cast<size_t>(numel(a.id)));
    const T* x = val(a.id);
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * n;
      T* yr = value.data() + r * n;
      T mx = xr[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
      double denom = 0.0;
      for (int i = 0; i < n; ++i) {
        double e = std::exp(static_cast<double>(xr[i] - mx));
        yr[i] = static_cast<T>(e);
        denom += e;
      }
      T inv = static_cast<T>(1.0 / denom);
      for (int i = 0; i < n; ++i) yr[i] *= inv;
    }
    int id = add_node(Shape(s), std::move(value), {a.id}, "softmax", nodes[static_cast<size_t>(a.id)].requires_grad);
    finish(id, [a, n, rows](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const Node& sn = g.nodes[static_cast<size_t>(self)];
        for (int64_t r = 0; r < rows; ++r) {
          const T* y = sn.value.data() + r * n;
          const T* gy = sn.grad.data() + r * n;
          double dot = 0.0;
          for (int i = 0; i < n; ++i) dot += static_cast<double>(gy[i]) * y[i];
          for (int i = 0; i < n; ++i) ga[r * n + i] += y[i] * (gy[i] - static_cast<T>(dot));
        }
      }
    });
    return {this, id};
  }

  // per-row standardization over the last dim, no learned affine
  Var<T> layernorm_lastdim(Var<T> a, T eps = T(1e-5)) {
    check_var(a, "layernorm");
    const Shape& s = shape(a.id);
    if (s.empty()) throw std::invalid_argument("layernorm: scalar input");
    int n = s.back();
    if (n < 1) throw std::invalid_argument("layernorm: empty last dim");
    int64_t rows = numel(a.id) / n;
    std::vector<T> value(static_cast<size_t>(numel(a.id)));
    std::vector<T> inv_sd(static_cast<size_t>(rows));
    const T* x = val(a.id);
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * n;
      double mu = 0.0;
      for (int i = 0; i < n; ++i) mu += static_cast<double>(xr[i]);
      mu /= n;
      double var = 0.0;
      for (int i = 0; i < n; ++i) {
        double d = static_cast<double>(xr[i]) - mu;
        var += d * d;
      }
      var /= n;
      double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
      inv_sd[static_cast<size_t>(r)] = static_cast<T>(inv);
      for (int i = 0; i < n; ++i)
        value[static_cast<size_t>(r * n + i)] = static_cast<T>((static_cast<double>(xr[i]) - mu) * inv);
    }
    int id = add_node(Shape(s), std::move(value), {a.id}, "layernorm", nodes[static_cast<size_t>(a.id)].requires_grad);
    finish(id, [a, n, rows, inv_sd](Graph& g, int self) {
      if (T* ga = g.grad_dst(a.id)) {
        const Node& sn = g.nodes[static_cast<size_t>(self)];
        for (int64_t r = 0; r < rows; ++r) {
          const T* y = sn.value.data() + r * n;
          const T* gy = sn.grad.data() + r * n;
          double mg = 0.0, mgy = 0.0;
          for (int i = 0; i < n; ++i) {
            mg += static_cast<double>(gy[i]);
            mgy += static_cast<double>(gy[i]) * y[i];
          }
          mg /= n;
          mgy /= n;
          T inv = inv_sd[static_cast<size_t>(r)];
          for (int i = 0; i < n; ++i)
            ga[r * n + i] += inv * (gy[i] - static_cast<T>(mg) - y[i] * static_cast<T>(mgy));
        }
      }
    });
    return {this, id};
  }

  // ---- backward ----

  void backward(Var<T> loss) {
    check_var(loss, "backward");
    if (numel(loss.id) != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(shape(loss.id)));
    if (!nodes[static_cast<size_t>(loss.id)].requires_grad)
      throw std::invalid_argument("backward: loss does not depend on any parameter");
    touched_.assign(nodes.size(), 0);
    for (auto& n : nodes) {
      if (n.requires_grad)
        n.grad.assign(n.value.size(), T(0));
      else
        n.grad.clear();
    }
    nodes[static_cast<size_t>(loss.id)].grad[0] = T(1);
    touched_[static_cast<size_t>(loss.id)] = 1;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes[static_cast<size_t>(i)];
      if (!n.requires_grad || !touched_[static_cast<size_t>(i)] || !n.back) continue;
      n.back(*this, i);
    }
  }

 private:
  enum class Ew { Add, Sub, Mul };

  Var<T> row_broadcast(Var<T> h, Var<T> s, const char* op, bool scale) {
    check_var(h, op);
    check_var(s, op);
    const Shape& sh = shape(h.id);
    const Shape& ss = shape(s.id);
    if (sh.size() != 2) throw std::invalid_argument(std::string(op) + ": want a matrix, got " + shape_str(sh));
    int n = sh[0], d = sh[1];
    int rows = 0;
    if (ss.size() == 1 && ss[0] == d)
      rows = 1;
    else if (ss.size() == 2 && ss[1] == d && ss[0] >= 1 && n % ss[0] == 0)
      rows = ss[0];
    if (rows == 0)
      throw std::invalid_argument(std::string(op) + ": rows " + shape_str(ss) + " do not tile " + shape_str(sh));
    const int block = n / rows;
    std::vector<T> value(static_cast<size_t>(n) * d);
    const T* hv = val(h.id);
    const T* sv = val(s.id);
    for (int i = 0; i < n; ++i) {
      const T* __restrict__ hr = hv + static_cast<size_t>(i) * d;
      const T* __restrict__ sr = sv + static_cast<size_t>(i / block) * d;
      T* __restrict__ out = value.data() + static_cast<size_t>(i) * d;
      if (scale)
        for (int j = 0; j < d; ++j) out[j] = hr[j] * sr[j];
      else
        for (int j = 0; j < d; ++j) out[j] = hr[j] + sr[j];
    }
    bool rg = nodes[static_cast<size_t>(h.id)].requires_grad || nodes[static_cast<size_t>(s.id)].requires_grad;
    int id = add_node(Shape(sh), std::move(value), {h.id, s.id}, op, rg);
    finish(id, [h, s, n, d, block, scale](Graph& g, int self) {
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      const T* sv = g.val(s.id);
      const T* hv = g.val(h.id);
      if (T* gh = g.grad_dst(h.id)) {
        for (int i = 0; i < n; ++i) {
          const T* __restrict__ gr = gy + static_cast<size_t>(i) * d;
          const T* __restrict__ sr = sv + static_cast<size_t>(i / block) * d;
          T* __restrict__ dst = gh + static_cast<size_t>(i) * d;
          if (scale)
            for (int j = 0; j < d; ++j) dst[j] += gr[j] * sr[j];
          else
            for (int j = 0; j < d; ++j) dst[j] += gr[j];
        }
      }
      if (T* gs = g.grad_dst(s.id)) {
        for (int i = 0; i < n; ++i) {
          const T* __restrict__ gr = gy + static_cast<size_t>(i) * d;
          const T* __restrict__ hr = hv + static_cast<size_t>(i) * d;
          T* __restrict__ dst = gs + static_cast<size_t>(i / block) * d;
          if (scale)
            for (int j = 0; j < d; ++j) dst[j] += gr[j] * hr[j];
          else
            for (int j = 0; j < d; ++j) dst[j] += gr[j];
        }
      }
    });
    return {this, id};
  }

  std::vector<char> touched_;

  void check_var(Var<T> v, const char* op) const {
    if (v.g != this || v.id < 0 || v.id >= static_cast<int>(nodes.size()))
      throw std::invalid_argument(std::string(op) + ": variable does not belong to this graph");
  }

  int add_node(Shape s, std::vector<T> value, std::vector<int> in, const char* op, bool requires_grad) {
    Node n;
    n.shape = std::move(s);
    n.value = std::move(value);
    n.in = std::move(in);
    n.op = op;
    n.requires_grad = requires_grad;
    nodes.push_back(std::move(n));
    int id = static_cast<int>(nodes.size()) - 1;
    check_finite(id);
    return id;
  }

  void check_finite(int id) const {
    const Node& n = nodes[static_cast<size_t>(id)];
    for (T v : n.value)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::runtime_error(std::string("non-finite value produced by op '") + n.op + "' with shape " +
                                 shape_str(n.shape));
  }

  int unary_begin(Var<T> a, const char* op) {
    check_var(a, op);
    const Node& an = nodes[static_cast<size_t>(a.id)];
    Node n;
    n.shape = an.shape;
    n.value.resize(an.value.size());
    n.in = {a.id};
    n.op = op;
    n.requires_grad = an.requires_grad;
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }

  void finish(int id, std::function<void(Graph&, int)> back) {
    check_finite(id);
    nodes[static_cast<size_t>(id)].back = std::move(back);
  }

  Var<T> binary_ew(Var<T> a, Var<T> b, const char* opname, Ew op) {
    check_var(a, opname);
    check_var(b, opname);
    const Node& an = nodes[static_cast<size_t>(a.id)];
    const Node& bn = nodes[static_cast<size_t>(b.id)];
    bool a_scalar = an.value.size() == 1;
    bool b_scalar = bn.value.size() == 1;
    if (!(an.shape == bn.shape || a_scalar || b_scalar))
      throw std::invalid_argument(std::string(opname) + ": shapes " + shape_str(an.shape) + " and " +
                                  shape_str(bn.shape) + " do not match (only scalar broadcast is supported)");
    const Shape& out_shape = a_scalar && !b_scalar ? bn.shape : an.shape;
    int64_t n_out = a_scalar && !b_scalar ? static_cast<int64_t>(bn.value.size())
                                          : static_cast<int64_t>(an.value.size());
    std::vector<T> value(static_cast<size_t>(n_out));
    const T* av = an.value.data();
    const T* bv = bn.value.data();
    for (int64_t i = 0; i < n_out; ++i) {
      T x = av[a_scalar ? 0 : i];
      T y = bv[b_scalar ? 0 : i];
      value[static_cast<size_t>(i)] = op == Ew::Add ? x + y : (op == Ew::Sub ? x - y : x * y);
    }
    int id = add_node(Shape(out_shape), std::move(value), {a.id, b.id}, opname, an.requires_grad || bn.requires_grad);
    finish(id, [a, b, op, a_scalar, b_scalar](Graph& g, int self) {
      const Node& sn = g.nodes[static_cast<size_t>(self)];
      int64_t n = static_cast<int64_t>(sn.grad.size());
      const T* gy = sn.grad.data();
      if (T* ga = g.grad_dst(a.id)) {
        if (op == Ew::Mul) {
          const T* bv = g.val(b.id);
          if (a_scalar && n > 1) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(gy[i]) * bv[b_scalar ? 0 : i];
            ga[0] += static_cast<T>(acc);
          } else {
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bv[b_scalar ? 0 : i];
          }
        } else {
          if (a_scalar && n > 1) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(gy[i]);
            ga[0] += static_cast<T>(acc);
          } else {
            for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
          }
        }
      }
      if (T* gb = g.grad_dst(b.id)) {
        T sign = op == Ew::Sub ? T(-1) : T(1);
        if (op == Ew::Mul) {
          const T* av = g.val(a.id);
          if (b_scalar && n > 1) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(gy[i]) * av[a_scalar ? 0 : i];
            gb[0] += static_cast<T>(acc);
          } else {
            for (int64_t i = 0; i < n; ++i) gb[i] += gy[i] * av[a_scalar ? 0 : i];
          }
        } else {
          if (b_scalar && n > 1) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(gy[i]);
            gb[0] += sign * static_cast<T>(acc);
          } else {
            for (int64_t i = 0; i < n; ++i) gb[i] += sign * gy[i];
          }
        }
      }
    });
    return {this, id};
  }

  Var<T> conv2d_impl(Var<T> x, Var<T> w, Var<T>* bias, int stride, int pad) {
    check_var(x, "conv2d");
    check_var(w, "conv2d");
    if (bias) check_var(*bias, "conv2d");
    const Shape& sx = shape(x.id);
    const Shape& sw = shape(w.id);
    if (sx.size() != 3 || sw.size() != 4)
      throw std::invalid_argument("conv2d: want x [C,H,W], w [O,C,kh,kw], got " + shape_str(sx) + " and " +
                                  shape_str(sw));
    if (sx[0] != sw[1])
      throw std::invalid_argument("conv2d: channel mismatch, x " + shape_str(sx) + " vs w " + shape_str(sw));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
    int C = sx[0], H = sx[1], W = sx[2];
    int O = sw[0], kh = sw[2], kw = sw[3];
    int oh = kernels::conv_out_dim(H, kh, stride, pad);
    int ow = kernels::conv_out_dim(W, kw, stride, pad);
    if (oh < 1 || ow < 1)
      throw std::invalid_argument("conv2d: kernel " + shape_str(sw) + " does not fit input " + shape_str(sx));
    std::vector<T> value(static_cast<size_t>(O) * oh * ow, T(0));
    if (bias) {
      const Shape& sb = shape(bias->id);
      if (!(sb.size() == 1 && sb[0] == O))
        throw std::invalid_argument("conv2d: bias " + shape_str(sb) + " does not match " + std::to_string(O) +
                                    " output channels");
      const T* bv = val(bias->id);
      for (int o = 0; o < O; ++o)
        std::fill_n(value.data() + static_cast<size_t>(o) * oh * ow, static_cast<size_t>(oh) * ow, bv[o]);
    }
    kernels::conv2d_acc(val(x.id), val(w.id), value.data(), C, H, W, O, kh, kw, stride, pad, oh, ow);
    std::vector<int> in = {x.id, w.id};
    bool rg = nodes[static_cast<size_t>(x.id)].requires_grad || nodes[static_cast<size_t>(w.id)].requires_grad;
    int bias_id = -1;
    if (bias) {
      in.push_back(bias->id);
      bias_id = bias->id;
      rg = rg || nodes[static_cast<size_t>(bias->id)].requires_grad;
    }
    int id = add_node(Shape{O, oh, ow}, std::move(value), std::move(in), "conv2d", rg);
    finish(id, [x, w, bias_id, C, H, W, O, kh, kw, stride, pad, oh, ow](Graph& g, int self) {
      const T* gy = g.nodes[static_cast<size_t>(self)].grad.data();
      if (T* gx = g.grad_dst(x.id))
        kernels::conv2d_grad_x_acc(gy, g.val(w.id), gx, C, H, W, O, kh, kw, stride, pad, oh, ow);
      if (T* gw = g.grad_dst(w.id))
        kernels::conv2d_grad_w_acc(gy, g.val(x.id), gw, C, H, W, O, kh, kw, stride, pad, oh, ow);
      if (bias_id >= 0) {
        if (T* gb = g.grad_dst(bias_id)) {
          for (int o = 0; o < O; ++o) {
            double acc = 0.0;
            const T* go = gy + static_cast<size_t>(o) * oh * ow;
            for (int64_t i = 0, n = static_cast<int64_t>(oh) * ow; i < n; ++i) acc += static_cast<double>(go[i]);
            gb[o] += static_cast<T>(acc);
          }
        }
      }
    });
    return {this, id};
  }
};

// expression-style helpers
template <class T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return a.g->add(a, b);
}
template <class T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return a.g->sub(a, b);
}
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) {
  return a.g->mul(a, b);
}
template <class T>
Var<T> operator-(Var<T> a) {
  return a.g->neg(a);
}

}  // namespace tueforge
