#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "tueforge/tensor.hpp"

namespace tueforge::kernels {

// C[m,n] += op(A) * op(B) where op transposes when the flag is set.
// A is [m,k] (or [k,m] when ta), B is [k,n] (or [n,k] when tb).
// When B is untransposed the kernel runs a 4-row tile of GCC vector lanes:
// accumulators start from the C tile and the contraction index walks
// innermost, so each C element still collects its terms in ascending order,
// one fused multiply-add per term, and every run of the same binary is
// deterministic. Transposed-B keeps scalar dots (a vector dot would change
// the summation tree), eight independent chains at a time.
template <class T>
void gemm_acc(bool ta, bool tb, int m, int n, int k, const T* A, const T* B, T* C) {
  if (!tb) {
    typedef T vec __attribute__((vector_size(32)));
    constexpr int L = static_cast<int>(32 / sizeof(T));
    constexpr int MR = 4;
    constexpr int NR = 2 * L;
    auto bcast = [](T w) { return w - (vec){}; };
    int i = 0;
    for (; i + MR <= m; i += MR) {
      T* c0 = C + static_cast<size_t>(i) * n;
      T* c1 = c0 + n;
      T* c2 = c1 + n;
      T* c3 = c2 + n;
      const T* a0 = ta ? nullptr : A + static_cast<size_t>(i) * k;
      int j = 0;
      for (; j + NR <= n; j += NR) {
        vec q00, q01, q10, q11, q20, q21, q30, q31;
        __builtin_memcpy(&q00, c0 + j, sizeof(vec));
        __builtin_memcpy(&q01, c0 + j + L, sizeof(vec));
        __builtin_memcpy(&q10, c1 + j, sizeof(vec));
        __builtin_memcpy(&q11, c1 + j + L, sizeof(vec));
        __builtin_memcpy(&q20, c2 + j, sizeof(vec));
        __builtin_memcpy(&q21, c2 + j + L, sizeof(vec));
        __builtin_memcpy(&q30, c3 + j, sizeof(vec));
        __builtin_memcpy(&q31, c3 + j + L, sizeof(vec));
        for (int p = 0; p < k; ++p) {
          vec b0, b1;
          __builtin_memcpy(&b0, B + static_cast<size_t>(p) * n + j, sizeof(vec));
          __builtin_memcpy(&b1, B + static_cast<size_t>(p) * n + j + L, sizeof(vec));
          const T* ar = ta ? A + static_cast<size_t>(p) * m + i : nullptr;
          vec v0 = bcast(ta ? ar[0] : a0[p]);
          vec v1 = bcast(ta ? ar[1] : a0[p + k]);
          vec v2 = bcast(ta ? ar[2] : a0[p + 2 * k]);
          vec v3 = bcast(ta ? ar[3] : a0[p + 3 * k]);
          q00 += v0 * b0;
          q01 += v0 * b1;
          q10 += v1 * b0;
          q11 += v1 * b1;
          q20 += v2 * b0;
          q21 += v2 * b1;
          q30 += v3 * b0;
          q31 += v3 * b1;
        }
        __builtin_memcpy(c0 + j, &q00, sizeof(vec));
        __builtin_memcpy(c0 + j + L, &q01, sizeof(vec));
        __builtin_memcpy(c1 + j, &q10, sizeof(vec));
        __builtin_memcpy(c1 + j + L, &q11, sizeof(vec));
        __builtin_memcpy(c2 + j, &q20, sizeof(vec));
        __builtin_memcpy(c2 + j + L, &q21, sizeof(vec));
        __builtin_memcpy(c3 + j, &q30, sizeof(vec));
        __builtin_memcpy(c3 + j + L, &q31, sizeof(vec));
      }
      for (; j < n; ++j) {
        T s0 = c0[j], s1 = c1[j], s2 = c2[j], s3 = c3[j];
        for (int p = 0; p < k; ++p) {
          T bv = B[static_cast<size_t>(p) * n + j];
          if (ta) {
            const T* ar = A + static_cast<size_t>(p) * m + i;
            s0 += ar[0] * bv;
            s1 += ar[1] * bv;
            s2 += ar[2] * bv;
            s3 += ar[3] * bv;
          } else {
            s0 += a0[p] * bv;
            s1 += a0[p + k] * bv;
            s2 += a0[p + 2 * k] * bv;
            s3 += a0[p + 3 * k] * bv;
          }
        }
        c0[j] = s0;
        c1[j] = s1;
        c2[j] = s2;
        c3[j] = s3;
      }
    }
    for (; i < m; ++i) {
      T* __restrict__ c = C + static_cast<size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        T av = ta ? A[static_cast<size_t>(p) * m + i] : A[static_cast<size_t>(i) * k + p];
        const T* __restrict__ b = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta) {
    // B stored [n,k]; rows of B are contiguous, use scalar dot products,
    // eight independent chains sharing the a-row loads
    for (int i = 0; i < m; ++i) {
      const T* __restrict__ a = A + static_cast<size_t>(i) * k;
      T* __restrict__ c = C + static_cast<size_t>(i) * n;
      int j = 0;
      for (; j + 8 <= n; j += 8) {
        const T* __restrict__ b0 = B + static_cast<size_t>(j) * k;
        const T* __restrict__ b1 = b0 + k;
        const T* __restrict__ b2 = b1 + k;
        const T* __restrict__ b3 = b2 + k;
        const T* __restrict__ b4 = b3 + k;
        const T* __restrict__ b5 = b4 + k;
        const T* __restrict__ b6 = b5 + k;
        const T* __restrict__ b7 = b6 + k;
        T s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
        for (int p = 0; p < k; ++p) {
          T av = a[p];
          s0 += av * b0[p];
          s1 += av * b1[p];
          s2 += av * b2[p];
          s3 += av * b3[p];
          s4 += av * b4[p];
          s5 += av * b5[p];
          s6 += av * b6[p];
          s7 += av * b7[p];
        }
        c[j] += s0;
        c[j + 1] += s1;
        c[j + 2] += s2;
        c[j + 3] += s3;
        c[j + 4] += s4;
        c[j + 5] += s5;
        c[j + 6] += s6;
        c[j + 7] += s7;
      }
      for (; j < n; ++j) {
        const T* __restrict__ b = B + static_cast<size_t>(j) * k;
        T acc = 0;
        for (int p = 0; p < k; ++p) acc += a[p] * b[p];
        c[j] += acc;
      }
    }
  } else {
    // A [k,m], B [n,k]
    for (int i = 0; i < m; ++i) {
      T* __restrict__ c = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* __restrict__ b = B + static_cast<size_t>(j) * k;
        T acc = 0;
        for (int p = 0; p < k; ++p) acc += A[static_cast<size_t>(p) * m + i] * b[p];
        c[j] += acc;
      }
    }
  }
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
  int span = in + 2 * pad - k;
  if (span < 0) return -1;
  return span / stride + 1;
}

// x [C,H,W], w [O,C,kh,kw], out [O,oh,ow]. Accumulates into out.
template <class T>
void conv2d_acc(const T* x, const T* w, T* out, int C, int H, int W, int O, int kh, int kw,
                int stride, int pad, int oh, int ow) {
  for (int o = 0; o < O; ++o) {
    T* outp = out + static_cast<size_t>(o) * oh * ow;
    for (int c = 0; c < C; ++c) {
      const T* xc = x + static_cast<size_t>(c) * H * W;
      const T* woc = w + (static_cast<size_t>(o) * C + c) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          T wv = woc[ky * kw + kx];
          for (int oy = 0; oy < oh; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const T* xrow = xc + static_cast<size_t>(iy) * W;
            T* orow = outp + static_cast<size_t>(oy) * ow;
            if (stride == 1) {
              int x0 = kx - pad;
              int lo = x0 < 0 ? -x0 : 0;
              int hi = ow;
              if (x0 + ow > W) hi = W - x0;
              for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * xrow[x0 + ox];
            } else {
              for (int ox = 0; ox < ow; ++ox) {
                int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= W) continue;
                orow[ox] += wv * xrow[ix];
              }
            }
          }
        }
      }
    }
  }
}

// gradient w.r.t. x: scatter g through the same taps
template <class T>
void conv2d_grad_x_acc(const T* g, const T* w, T* gx, int C, int H, int W, int O, int kh, int kw,
                       int stride, int pad, int oh, int ow) {
  for (int o = 0; o < O; ++o) {
    const T* go = g + static_cast<size_t>(o) * oh * ow;
    for (int c = 0; c < C; ++c) {
      T* gxc = gx + static_cast<size_t>(c) * H * W;
      const T* woc = w + (static_cast<size_t>(o) * C + c) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          T wv = woc[ky * kw + kx];
          for (int oy = 0; oy < oh; ++oy) {
            int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const T* grow = go + static_cast<size_t>(oy) * ow;
            T* gxrow = gxc + static_cast<size_t>(iy) * W;
            for (int ox = 0; ox < ow; ++ox) {
              int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              gxrow[ix] += wv * grow[ox];
            }
          }
        }
      }
    }
  }
}

// gradient w.r.t. w as a patch-matrix product: gw[o,(c,ky,kx)] += sum over
// output positions of g[o,pos] * patch[pos,(c,ky,kx)]. Positions are walked
// in the same ascending order as the per-tap loops this replaces, and
// out-of-image taps contribute exact zeros, so the sums round identically
// for unpadded convolutions.
template <class T>
void conv2d_grad_w_acc(const T* g, const T* x, T* gw, int C, int H, int W, int O, int kh, int kw,
                       int stride, int pad, int oh, int ow) {
  const int P = oh * ow;
  const int K = C * kh * kw;
  std::vector<T> col(static_cast<size_t>(P) * K, T(0));
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* __restrict__ row = col.data() + (static_cast<size_t>(oy) * ow + ox) * K;
      for (int c = 0; c < C; ++c) {
        const T* xc = x + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          const T* __restrict__ xrow = xc + static_cast<size_t>(iy) * W;
          T* __restrict__ dst = row + (c * kh + ky) * kw;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) dst[kx] = xrow[ix];
          }
        }
      }
    }
  }
  gemm_acc(false, false, O, K, P, g, col.data(), gw);
}

// channel-wise cross-correlation: template z [C,hz,wz] slides over x [C,hx,wx],
// products summed over channels, valid positions only. out [hx-hz+1, wx-wz+1].
template <class T>
void xcorr_acc(const T* z, const T* x, T* out, int C, int hz, int wz, int hx, int wx) {
  int ho = hx - hz + 1, wo = wx - wz + 1;
  for (int c = 0; c < C; ++c) {
    const T* zc = z + static_cast<size_t>(c) * hz * wz;
    const T* xc = x + static_cast<size_t>(c) * hx * wx;
    for (int i = 0; i < hz; ++i) {
      for (int j = 0; j < wz; ++j) {
        T zv = zc[i * wz + j];
        for (int u = 0; u < ho; ++u) {
          const T* xrow = xc + static_cast<size_t>(u + i) * wx + j;
          T* orow = out + static_cast<size_t>(u) * wo;
          for (int v = 0; v < wo; ++v) orow[v] += zv * xrow[v];
        }
      }
    }
  }
}

template <class T>
void xcorr_grad_acc(const T* g, const T* z, const T* x, T* gz, T* gx, int C, int hz, int wz,
                    int hx, int wx) {
  int ho = hx - hz + 1, wo = wx - wz + 1;
  for (int c = 0; c < C; ++c) {
    const T* zc = z + static_cast<size_t>(c) * hz * wz;
    const T* xc = x + static_cast<size_t>(c) * hx * wx;
    T* gzc = gz ? gz + static_cast<size_t>(c) * hz * wz : nullptr;
    T* gxc = gx ? gx + static_cast<size_t>(c) * hx * wx : nullptr;
    for (int i = 0; i < hz; ++i) {
      for (int j = 0; j < wz; ++j) {
        T zv = zc[i * wz + j];
        T acc = 0;
        for (int u = 0; u < ho; ++u) {
          const T* xrow = xc + static_cast<size_t>(u + i) * wx + j;
          const T* grow = g + static_cast<size_t>(u) * wo;
          T* gxrow = gxc ? gxc + static_cast<size_t>(u + i) * wx + j : nullptr;
          for (int v = 0; v < wo; ++v) {
            acc += grow[v] * xrow[v];
            if (gxrow) gxrow[v] += zv * grow[v];
          }
        }
        if (gzc) gzc[i * wz + j] += acc;
      }
    }
  }
}

// Align-corners bilinear sampling grid: for each output index, the two source
// indices and their weights. Weights are computed in double regardless of T.
struct LerpTap {
  int i0, i1;
  double w0, w1;
};

inline std::vector<LerpTap> bilinear_taps(int in, int out) {
  if (in < 1 || out < 1) throw std::invalid_argument("bilinear_taps: sizes must be positive");
  std::vector<LerpTap> taps(static_cast<size_t>(out));
  for (int o = 0; o < out; ++o) {
    double pos = 0.0;
    if (out > 1 && in > 1) pos = static_cast<double>(o) * (in - 1) / (out - 1);
    int i0 = static_cast<int>(pos);
    if (i0 > in - 2) i0 = in > 1 ? in - 2 : 0;
    double frac = pos - i0;
    taps[static_cast<size_t>(o)] = {i0, in > 1 ? i0 + 1 : i0, 1.0 - frac, frac};
  }
  return taps;
}

// in [C,H,W] -> out [C,oh,ow]; interpolation arithmetic in double so results
// are exact for the cases the tests pin down, then cast once to T.
template <class T>
void resize_bilinear(const T* in, T* out, int C, int H, int W, int oh, int ow) {
  auto ty = bilinear_taps(H, oh);
  auto tx = bilinear_taps(W, ow);
  for (int c = 0; c < C; ++c) {
    const T* ic = in + static_cast<size_t>(c) * H * W;
    T* oc = out + static_cast<size_t>(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const LerpTap& a = ty[static_cast<size_t>(y)];
      const T* r0 = ic + static_cast<size_t>(a.i0) * W;
      const T* r1 = ic + static_cast<size_t>(a.i1) * W;
      T* orow = oc + static_cast<size_t>(y) * ow;
      for (int x = 0; x < ow; ++x) {
        const LerpTap& b = tx[static_cast<size_t>(x)];
        double top = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]);
        double bot = a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
        orow[x] = static_cast<T>(top + bot);
      }
    }
  }
}

// adjoint of resize_bilinear: scatter output gradients through the taps
template <class T>
void resize_bilinear_grad_acc(const T* g, T* gin, int C, int H, int W, int oh, int ow) {
  auto ty = bilinear_taps(H, oh);
  auto tx = bilinear_taps(W, ow);
  for (int c = 0; c < C; ++c) {
    T* ic = gin + static_cast<size_t>(c) * H * W;
    const T* oc = g + static_cast<size_t>(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const LerpTap& a = ty[static_cast<size_t>(y)];
      for (int x = 0; x < ow; ++x) {
        const LerpTap& b = tx[static_cast<size_t>(x)];
        T gv = oc[static_cast<size_t>(y) * ow + x];
        ic[static_cast<size_t>(a.i0) * W + b.i0] += static_cast<T>(a.w0 * b.w0) * gv;
        ic[static_cast<size_t>(a.i0) * W + b.i1] += static_cast<T>(a.w0 * b.w1) * gv;
        ic[static_cast<size_t>(a.i1) * W + b.i0] += static_cast<T>(a.w1 * b.w0) * gv;
        ic[static_cast<size_t>(a.i1) * W + b.i1] += static_cast<T>(a.w1 * b.w1) * gv;
      }
    }
  }
}

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& in, int oh, int ow) {
  if (in.rank() != 3) throw std::invalid_argument("resize_bilinear: want [C,H,W], got " + shape_str(in.shape));
  Tensor<T> out(Shape{in.dim(0), oh, ow});
  resize_bilinear(in.ptr(), out.ptr(), in.dim(0), in.dim(1), in.dim(2), oh, ow);
  return out;
}

}  // namespace tueforge::kernels
