#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cellmamba/core/gemm.hpp"
#include "cellmamba/core/parallel.hpp"
#include "cellmamba/core/tensor.hpp"

namespace cm {

namespace detail {

// Shapes must have equal rank; a dimension may differ only when one side is 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  CM_CHECK(a.size() == b.size(), op, ": rank mismatch between ", shape_str(a), " and ",
           shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CM_CHECK(a[i] == b[i] || a[i] == 1 || b[i] == 1, op, ": incompatible shapes ",
             shape_str(a), " and ", shape_str(b));
    out[i] = std::max(a[i], b[i]);
  }
  return out;
}

inline std::vector<i64> broadcast_strides(const Shape& in, const Shape& out) {
  auto st = shape_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == 1 && out[i] != 1) st[i] = 0;
  }
  return st;
}

// Visits every element of `out_dims`, calling f(offset_a, offset_b, offset_out).
template <typename F>
void bcast_visit_impl(int axis, int rank, const i64* dims, const i64* sa, const i64* sb,
                      const i64* so, i64 oa, i64 ob, i64 oo, F&& f) {
  if (axis == rank - 1) {
    const i64 n = dims[axis];
    const i64 stepa = sa[axis], stepb = sb[axis];
    if (stepa == 1 && stepb == 1) {
      for (i64 i = 0; i < n; ++i) f(oa + i, ob + i, oo + i);
    } else if (stepa == 1 && stepb == 0) {
      for (i64 i = 0; i < n; ++i) f(oa + i, ob, oo + i);
    } else if (stepa == 0 && stepb == 1) {
      for (i64 i = 0; i < n; ++i) f(oa, ob + i, oo + i);
    } else {
      for (i64 i = 0; i < n; ++i) f(oa, ob, oo + i);
    }
    return;
  }
  for (i64 i = 0; i < dims[axis]; ++i) {
    bcast_visit_impl(axis + 1, rank, dims, sa, sb, so, oa + i * sa[axis], ob + i * sb[axis],
                     oo + i * so[axis], f);
  }
}

template <typename F>
void bcast_visit(const Shape& out, const Shape& as, const Shape& bs, F&& f) {
  auto sa = broadcast_strides(as, out);
  auto sb = broadcast_strides(bs, out);
  auto so = shape_strides(out);
  bcast_visit_impl(0, static_cast<int>(out.size()), out.data(), sa.data(), sb.data(),
                   so.data(), 0, 0, 0, f);
}

struct ReduceDims {
  i64 outer, n, inner;
};

inline ReduceDims reduce_dims(const Shape& s, int axis) {
  ReduceDims d{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) d.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) d.inner *= s[i];
  return d;
}

inline int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  CM_CHECK(axis >= 0 && axis < rank, op, ": axis out of range for rank ", rank);
  return axis;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with limited numpy-style broadcasting.
// ---------------------------------------------------------------------------

template <typename S, typename FwdF, typename DaF, typename DbF>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, FwdF fwd,
                    DaF da_fn, DbF db_fn) {
  const Shape os = detail::broadcast_shape(a.shape(), b.shape(), name);
  Tensor<S> out(os);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  detail::bcast_visit(os, a.shape(), b.shape(),
                      [&](i64 ia, i64 ib, i64 io) { po[io] = fwd(pa[ia], pb[ib]); });
  if (grad_needed<S>(a, b)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record(name, [a, b, out, da_fn, db_fn] {
      if (!out.has_grad()) return;
      const S* g = out.grad();
      const S* pa2 = a.data();
      const S* pb2 = b.data();
      if (a.requires_grad()) {
        a.ensure_grad();
        S* ga = a.storage()->grad.data();
        detail::bcast_visit(out.shape(), a.shape(), b.shape(), [&](i64 ia, i64 ib, i64 io) {
          ga[ia] += da_fn(g[io], pa2[ia], pb2[ib]);
        });
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        S* gb = b.storage()->grad.data();
        detail::bcast_visit(out.shape(), a.shape(), b.shape(), [&](i64 ia, i64 ib, i64 io) {
          gb[ib] += db_fn(g[io], pa2[ia], pb2[ib]);
        });
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
      [](S g, S x, S) { return g * x; });
}

template <typename S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "divide", a, b, [](S x, S y) { return x / y; }, [](S g, S, S y) { return g / y; },
      [](S g, S x, S y) { return -g * x / (y * y); });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (i64 i = 0; i < a.numel(); ++i) po[i] = pa[i] + c;
  if (grad_needed<S>(a)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("add_scalar", [a, out] {
      if (!out.has_grad()) return;
      a.ensure_grad();
      S* ga = a.storage()->grad.data();
      const S* g = out.grad();
      for (i64 i = 0; i < a.numel(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (i64 i = 0; i < a.numel(); ++i) po[i] = pa[i] * c;
  if (grad_needed<S>(a)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("mul_scalar", [a, out, c] {
      if (!out.has_grad()) return;
      a.ensure_grad();
      S* ga = a.storage()->grad.data();
      const S* g = out.grad();
      for (i64 i = 0; i < a.numel(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

// a: [..., M, K]; b: [..., K, N] with identical leading dims, or rank-2 [K, N]
// shared across the batch.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  CM_CHECK(a.rank() >= 2 && b.rank() >= 2, "matmul: need rank >= 2, got ",
           shape_str(a.shape()), " x ", shape_str(b.shape()));
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (!shared_b) {
    CM_CHECK(a.rank() == b.rank(), "matmul: rank mismatch ", shape_str(a.shape()), " x ",
             shape_str(b.shape()));
    for (int i = 0; i < a.rank() - 2; ++i) {
      CM_CHECK(a.shape()[i] == b.shape()[i], "matmul: batch dims differ: ",
               shape_str(a.shape()), " x ", shape_str(b.shape()));
    }
  }
  const i64 m = a.dim(-2), k = a.dim(-1);
  const i64 kb = b.dim(-2), n = b.dim(-1);
  CM_CHECK(k == kb, "matmul: inner dims differ: ", shape_str(a.shape()), " x ",
           shape_str(b.shape()));
  i64 batch = a.numel() / (m * k);

  Shape os(a.shape().begin(), a.shape().end() - 2);
  os.push_back(m);
  os.push_back(n);
  Tensor<S> out(os);

  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (i64 bi = 0; bi < batch; ++bi) {
    gemm_accum(m, k, n, pa + bi * m * k, shared_b ? pb : pb + bi * k * n, po + bi * m * n);
  }

  if (grad_needed<S>(a, b)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("matmul", [a, b, out, m, k, n, batch, shared_b] {
      if (!out.has_grad()) return;
      const S* g = out.grad();
      if (a.requires_grad()) {
        a.ensure_grad();
        S* ga = a.storage()->grad.data();
        const S* pb2 = b.data();
        for (i64 bi = 0; bi < batch; ++bi) {
          gemm_nt_accum(m, n, k, g + bi * m * n, shared_b ? pb2 : pb2 + bi * k * n,
                        ga + bi * m * k);
        }
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        S* gb = b.storage()->grad.data();
        const S* pa2 = a.data();
        for (i64 bi = 0; bi < batch; ++bi) {
          gemm_tn_accum(m, k, n, pa2 + bi * m * k, g + bi * m * n,
                        shared_b ? gb : gb + bi * k * n);
        }
      }
    });
  }
  return out;
}

// x: [..., Cin] -> [..., Cout]; w: [Cin, Cout]; bias optional.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias = {}) {
  CM_CHECK(w.rank() == 2, "linear: weight must be rank 2, got ", shape_str(w.shape()));
  const i64 cin = w.dim(0), cout = w.dim(1);
  CM_CHECK(x.dim(-1) == cin, "linear: input shape ", shape_str(x.shape()),
           " does not match weight shape ", shape_str(w.shape()));
  if (bias.defined()) {
    CM_CHECK(bias.rank() == 1 && bias.dim(0) == cout, "linear: bias shape ",
             shape_str(bias.shape()), " does not match weight shape ", shape_str(w.shape()));
  }
  const i64 rows = x.numel() / cin;
  Shape os = x.shape();
  os.back() = cout;
  Tensor<S> out(os);

  gemm_accum(rows, cin, cout, x.data(), w.data(), out.data());
  if (bias.defined()) {
    S* po = out.data();
    const S* pb = bias.data();
    parallel_for(rows, 64, [=](i64 r0, i64 r1) {
      for (i64 r = r0; r < r1; ++r) {
        S* row = po + r * cout;
        for (i64 j = 0; j < cout; ++j) row[j] += pb[j];
      }
    });
  }

  if (grad_needed<S>(x, w, bias)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("linear", [x, w, bias, out, rows, cin, cout] {
      if (!out.has_grad()) return;
      const S* g = out.grad();
      if (x.requires_grad()) {
        x.ensure_grad();
        gemm_nt_accum(rows, cout, cin, g, w.data(), x.storage()->grad.data());
      }
      if (w.requires_grad()) {
        w.ensure_grad();
        gemm_tn_accum(rows, cin, cout, x.data(), g, w.storage()->grad.data());
      }
      if (bias.defined() && bias.requires_grad()) {
        bias.ensure_grad();
        S* gb = bias.storage()->grad.data();
        for (i64 r = 0; r < rows; ++r) {
          const S* grow = g + r * cout;
          for (i64 j = 0; j < cout; ++j) gb[j] += grow[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (NHWC, cross-correlation, zero padding).
// ---------------------------------------------------------------------------

// x: [B,H,W,Cin]; kernel: [kh,kw,Cin,Cout]. Output size must divide exactly:
// (H + 2*padding - kh) % stride == 0.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                 int stride, int padding) {
  CM_CHECK(x.rank() == 4, "conv2d: input must be [B,H,W,C], got ", shape_str(x.shape()));
  CM_CHECK(kernel.rank() == 4, "conv2d: kernel must be [kh,kw,Cin,Cout], got ",
           shape_str(kernel.shape()));
  CM_CHECK(stride >= 1 && padding >= 0, "conv2d: bad stride/padding ", stride, "/", padding);
  const i64 bsz = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const i64 kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  CM_CHECK(kernel.dim(2) == cin, "conv2d: input shape ", shape_str(x.shape()),
           " does not match kernel shape ", shape_str(kernel.shape()));
  CM_CHECK((h + 2 * padding - kh) % stride == 0 && (w + 2 * padding - kw) % stride == 0,
           "conv2d: non-integral output size for input ", shape_str(x.shape()), ", kernel ",
           shape_str(kernel.shape()), ", stride ", stride, ", padding ", padding);
  const i64 oh = (h + 2 * padding - kh) / stride + 1;
  const i64 ow = (w + 2 * padding - kw) / stride + 1;
  CM_CHECK(oh >= 1 && ow >= 1, "conv2d: empty output for input ", shape_str(x.shape()));
  if (bias.defined()) {
    CM_CHECK(bias.rank() == 1 && bias.dim(0) == cout, "conv2d: bias shape ",
             shape_str(bias.shape()), " does not match kernel ", shape_str(kernel.shape()));
  }

  Tensor<S> out({bsz, oh, ow, cout});
  const S* px = x.data();
  const S* pk = kernel.data();
  S* po = out.data();
  const i64 sp = stride, pd = padding;

  parallel_for(bsz * oh, 1, [=](i64 r0, i64 r1) {
    for (i64 r = r0; r < r1; ++r) {
      const i64 b = r / oh, oy = r % oh;
      for (i64 ox = 0; ox < ow; ++ox) {
        S* orow = po + ((b * oh + oy) * ow + ox) * cout;
        for (i64 ky = 0; ky < kh; ++ky) {
          const i64 iy = oy * sp - pd + ky;
          if (iy < 0 || iy >= h) continue;
          for (i64 kx = 0; kx < kw; ++kx) {
            const i64 ix = ox * sp - pd + kx;
            if (ix < 0 || ix >= w) continue;
            const S* xrow = px + ((b * h + iy) * w + ix) * cin;
            const S* krow = pk + (ky * kw + kx) * cin * cout;
            for (i64 ci = 0; ci < cin; ++ci) {
              const S xv = xrow[ci];
              const S* kk = krow + ci * cout;
              for (i64 co = 0; co < cout; ++co) orow[co] += xv * kk[co];
            }
          }
        }
        if (bias.defined()) {
          const S* pb = bias.data();
          for (i64 co = 0; co < cout; ++co) orow[co] += pb[co];
        }
      }
    }
  });

  if (grad_needed<S>(x, kernel, bias)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("conv2d", [x, kernel, bias, out, bsz, h, w, cin, kh, kw, cout,
                                         oh, ow, sp, pd] {
      if (!out.has_grad()) return;
      const S* g = out.grad();
      if (x.requires_grad()) {
        x.ensure_grad();
        S* gx = x.storage()->grad.data();
        const S* pk2 = kernel.data();
        parallel_for(bsz * h, 1, [=](i64 r0, i64 r1) {
          for (i64 r = r0; r < r1; ++r) {
            const i64 b = r / h, iy = r % h;
            for (i64 ix = 0; ix < w; ++ix) {
              S* gxrow = gx + ((b * h + iy) * w + ix) * cin;
              for (i64 ky = 0; ky < kh; ++ky) {
                const i64 ny = iy + pd - ky;
                if (ny < 0 || ny % sp != 0) continue;
                const i64 oy = ny / sp;
                if (oy >= oh) continue;
                for (i64 kx = 0; kx < kw; ++kx) {
                  const i64 nx = ix + pd - kx;
                  if (nx < 0 || nx % sp != 0) continue;
                  const i64 ox = nx / sp;
                  if (ox >= ow) continue;
                  const S* grow = g + ((b * oh + oy) * ow + ox) * cout;
                  const S* krow = pk2 + (ky * kw + kx) * cin * cout;
                  for (i64 ci = 0; ci < cin; ++ci) {
                    gxrow[ci] += dot_accum(grow, krow + ci * cout, cout);
                  }
                }
              }
            }
          }
        });
      }
      if (kernel.requires_grad()) {
        kernel.ensure_grad();
        S* gk = kernel.storage()->grad.data();
        const S* px2 = x.data();
        parallel_for(kh * kw * cin, 1, [=](i64 t0, i64 t1) {
          for (i64 t = t0; t < t1; ++t) {
            const i64 ky = t / (kw * cin);
            const i64 kx = (t / cin) % kw;
            const i64 ci = t % cin;
            S* gkrow = gk + t * cout;
            for (i64 b = 0; b < bsz; ++b) {
              for (i64 oy = 0; oy < oh; ++oy) {
                const i64 iy = oy * sp - pd + ky;
                if (iy < 0 || iy >= h) continue;
                for (i64 ox = 0; ox < ow; ++ox) {
                  const i64 ix = ox * sp - pd + kx;
                  if (ix < 0 || ix >= w) continue;
                  const S xv = px2[((b * h + iy) * w + ix) * cin + ci];
                  const S* grow = g + ((b * oh + oy) * ow + ox) * cout;
                  for (i64 co = 0; co < cout; ++co) gkrow[co] += xv * grow[co];
                }
              }
            }
          }
        });
      }
      if (bias.defined() && bias.requires_grad()) {
        bias.ensure_grad();
        S* gb = bias.storage()->grad.data();
        const i64 cells = bsz * oh * ow;
        for (i64 r = 0; r < cells; ++r) {
          const S* grow = g + r * cout;
          for (i64 co = 0; co < cout; ++co) gb[co] += grow[co];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& x, int axis, bool keepdim = false) {
  axis = detail::normalize_axis(axis, x.rank(), "reduce_sum");
  auto d = detail::reduce_dims(x.shape(), axis);
  Shape os = x.shape();
  if (keepdim) {
    os[axis] = 1;
  } else {
    os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
  }
  Tensor<S> out(os);
  const S* px = x.data();
  S* po = out.data();
  for (i64 o = 0; o < d.outer; ++o) {
    for (i64 in = 0; in < d.inner; ++in) {
      S acc = S(0);
      const S* base = px + (o * d.n) * d.inner + in;
      for (i64 j = 0; j < d.n; ++j) acc += base[j * d.inner];
      po[o * d.inner + in] = acc;
    }
  }
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("reduce_sum", [x, out, d] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      for (i64 o = 0; o < d.outer; ++o) {
        for (i64 in = 0; in < d.inner; ++in) {
          const S gv = g[o * d.inner + in];
          S* base = gx + (o * d.n) * d.inner + in;
          for (i64 j = 0; j < d.n; ++j) base[j * d.inner] += gv;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& x, int axis, bool keepdim = false) {
  axis = detail::normalize_axis(axis, x.rank(), "reduce_mean");
  const S inv = S(1) / static_cast<S>(x.shape()[axis]);
  return mul_scalar(reduce_sum(x, axis, keepdim), inv);
}

// Ties route the gradient to the lowest index.
template <typename S>
Tensor<S> reduce_max(const Tensor<S>& x, int axis, bool keepdim = false) {
  axis = detail::normalize_axis(axis, x.rank(), "reduce_max");
  auto d = detail::reduce_dims(x.shape(), axis);
  Shape os = x.shape();
  if (keepdim) {
    os[axis] = 1;
  } else {
    os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
  }
  Tensor<S> out(os);
  auto argmax = std::make_shared<std::vector<i64>>(d.outer * d.inner);
  const S* px = x.data();
  S* po = out.data();
  for (i64 o = 0; o < d.outer; ++o) {
    for (i64 in = 0; in < d.inner; ++in) {
      const S* base = px + (o * d.n) * d.inner + in;
      S best = base[0];
      i64 bi = 0;
      for (i64 j = 1; j < d.n; ++j) {
        const S v = base[j * d.inner];
        if (v > best) {
          best = v;
          bi = j;
        }
      }
      po[o * d.inner + in] = best;
      (*argmax)[o * d.inner + in] = bi;
    }
  }
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("reduce_max", [x, out, d, argmax] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      for (i64 o = 0; o < d.outer; ++o) {
        for (i64 in = 0; in < d.inner; ++in) {
          const i64 j = (*argmax)[o * d.inner + in];
          gx[(o * d.n + j) * d.inner + in] += g[o * d.inner + in];
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  Tensor<S> out({1});
  double acc = 0;  // wide accumulation keeps large sums stable for checks
  const S* px = x.data();
  for (i64 i = 0; i < x.numel(); ++i) acc += static_cast<double>(px[i]);
  out.data()[0] = static_cast<S>(acc);
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("sum_all", [x, out] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S g = out.grad()[0];
      for (i64 i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return mul_scalar(sum_all(x), S(1) / static_cast<S>(x.numel()));
}

// ---------------------------------------------------------------------------
// Activations and normalization.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const i64 n = x.numel();
  parallel_for(n, 4096, [=](i64 i0, i64 i1) {
    for (i64 i = i0; i < i1; ++i) po[i] = S(1) / (S(1) + std::exp(-px[i]));
  });
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("sigmoid", [x, out, n] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      const S* y = out.data();
      for (i64 i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) po[i] = px[i] > S(0) ? px[i] : S(0);
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("relu", [x, out, n] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      const S* px2 = x.data();
      for (i64 i = 0; i < n; ++i) gx[i] += px2[i] > S(0) ? g[i] : S(0);
    });
  }
  return out;
}

// Exact erf form.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  const i64 n = x.numel();
  const S inv_sqrt2 = S(0.7071067811865475);
  parallel_for(n, 4096, [=](i64 i0, i64 i1) {
    for (i64 i = i0; i < i1; ++i) {
      po[i] = S(0.5) * px[i] * (S(1) + std::erf(px[i] * inv_sqrt2));
    }
  });
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("gelu", [x, out, n, inv_sqrt2] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      const S* px2 = x.data();
      const S inv_sqrt2pi = S(0.3989422804014327);
      for (i64 i = 0; i < n; ++i) {
        const S v = px2[i];
        const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  axis = detail::normalize_axis(axis, x.rank(), "softmax");
  auto d = detail::reduce_dims(x.shape(), axis);
  Tensor<S> out(x.shape());
  const S* px = x.data();
  S* po = out.data();
  parallel_for(d.outer, 1, [=](i64 o0, i64 o1) {
    for (i64 o = o0; o < o1; ++o) {
      for (i64 in = 0; in < d.inner; ++in) {
        const S* base = px + (o * d.n) * d.inner + in;
        S* obase = po + (o * d.n) * d.inner + in;
        S mx = base[0];
        for (i64 j = 1; j < d.n; ++j) mx = std::max(mx, base[j * d.inner]);
        S denom = S(0);
        for (i64 j = 0; j < d.n; ++j) {
          const S e = std::exp(base[j * d.inner] - mx);
          obase[j * d.inner] = e;
          denom += e;
        }
        const S inv = S(1) / denom;
        for (i64 j = 0; j < d.n; ++j) obase[j * d.inner] *= inv;
      }
    }
  });
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("softmax", [x, out, d] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      const S* y = out.data();
      for (i64 o = 0; o < d.outer; ++o) {
        for (i64 in = 0; in < d.inner; ++in) {
          const i64 b = (o * d.n) * d.inner + in;
          S dot = S(0);
          for (i64 j = 0; j < d.n; ++j) dot += g[b + j * d.inner] * y[b + j * d.inner];
          for (i64 j = 0; j < d.n; ++j) {
            const i64 k = b + j * d.inner;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Normalizes over the last dim, then applies the affine pair.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  const i64 c = x.dim(-1);
  CM_CHECK(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
           "layer_norm: affine shapes ", shape_str(gamma.shape()), "/",
           shape_str(beta.shape()), " do not match input ", shape_str(x.shape()));
  const i64 rows = x.numel() / c;
  Tensor<S> out(x.shape());
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto rstd = std::make_shared<std::vector<S>>(rows);
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  S* ph = xhat->data();
  S* pr = rstd->data();
  parallel_for(rows, 16, [=](i64 r0, i64 r1) {
    for (i64 r = r0; r < r1; ++r) {
      const S* row = px + r * c;
      S mean = S(0);
      for (i64 j = 0; j < c; ++j) mean += row[j];
      mean /= static_cast<S>(c);
      S var = S(0);
      for (i64 j = 0; j < c; ++j) {
        const S dv = row[j] - mean;
        var += dv * dv;
      }
      var /= static_cast<S>(c);
      const S rs = S(1) / std::sqrt(var + eps);
      pr[r] = rs;
      S* hrow = ph + r * c;
      S* orow = po + r * c;
      for (i64 j = 0; j < c; ++j) {
        hrow[j] = (row[j] - mean) * rs;
        orow[j] = hrow[j] * pg[j] + pb[j];
      }
    }
  });
  if (grad_needed<S>(x, gamma, beta)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("layer_norm", [x, gamma, beta, out, xhat, rstd, rows, c] {
      if (!out.has_grad()) return;
      const S* g = out.grad();
      const S* ph2 = xhat->data();
      const S* pr2 = rstd->data();
      const S* pg2 = gamma.data();
      if (x.requires_grad()) {
        x.ensure_grad();
        S* gx = x.storage()->grad.data();
        parallel_for(rows, 16, [=](i64 r0, i64 r1) {
          for (i64 r = r0; r < r1; ++r) {
            const S* grow = g + r * c;
            const S* hrow = ph2 + r * c;
            S* gxr = gx + r * c;
            S sum_dh = S(0), sum_dhh = S(0);
            for (i64 j = 0; j < c; ++j) {
              const S dh = grow[j] * pg2[j];
              sum_dh += dh;
              sum_dhh += dh * hrow[j];
            }
            const S invc = S(1) / static_cast<S>(c);
            for (i64 j = 0; j < c; ++j) {
              const S dh = grow[j] * pg2[j];
              gxr[j] += pr2[r] * (dh - sum_dh * invc - hrow[j] * sum_dhh * invc);
            }
          }
        });
      }
      if (gamma.requires_grad()) {
        gamma.ensure_grad();
        S* gg = gamma.storage()->grad.data();
        for (i64 r = 0; r < rows; ++r) {
          const S* grow = g + r * c;
          const S* hrow = ph2 + r * c;
          for (i64 j = 0; j < c; ++j) gg[j] += grow[j] * hrow[j];
        }
      }
      if (beta.requires_grad()) {
        beta.ensure_grad();
        S* gb = beta.storage()->grad.data();
        for (i64 r = 0; r < rows; ++r) {
          const S* grow = g + r * c;
          for (i64 j = 0; j < c; ++j) gb[j] += grow[j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  CM_CHECK(shape_numel(shape) == x.numel(), "reshape: cannot view ", shape_str(x.shape()),
           " as ", shape_str(shape));
  Tensor<S> out(std::move(shape), x.values());
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("reshape", [x, out] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      for (i64 i = 0; i < x.numel(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  CM_CHECK(static_cast<int>(axes.size()) == r, "permute: need ", r, " axes, got ",
           axes.size());
  std::vector<bool> seen(r, false);
  Shape os(r);
  for (int i = 0; i < r; ++i) {
    CM_CHECK(axes[i] >= 0 && axes[i] < r && !seen[axes[i]], "permute: invalid axis list");
    seen[axes[i]] = true;
    os[i] = x.shape()[axes[i]];
  }
  Tensor<S> out(os);
  // Stride in the output for a unit step along input axis `ax`.
  auto ostrides = shape_strides(os);
  std::vector<i64> step(r);
  for (int j = 0; j < r; ++j) step[axes[j]] = ostrides[j];

  const S* px = x.data();
  S* po = out.data();
  const Shape& xs = x.shape();
  std::vector<i64> idx(r, 0);
  i64 ooff = 0;
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) {
    po[ooff] = px[i];
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ooff += step[ax];
      if (idx[ax] < xs[ax]) break;
      idx[ax] = 0;
      ooff -= xs[ax] * step[ax];
    }
  }
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("permute", [x, out, step] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      const Shape& xs2 = x.shape();
      const int r2 = x.rank();
      std::vector<i64> idx2(r2, 0);
      i64 ooff2 = 0;
      const i64 n2 = x.numel();
      for (i64 i = 0; i < n2; ++i) {
        gx[i] += g[ooff2];
        for (int ax = r2 - 1; ax >= 0; --ax) {
          ++idx2[ax];
          ooff2 += step[ax];
          if (idx2[ax] < xs2[ax]) break;
          idx2[ax] = 0;
          ooff2 -= xs2[ax] * step[ax];
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  std::vector<int> axes(x.rank());
  for (int i = 0; i < x.rank(); ++i) axes[i] = i;
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

template <typename S>
Tensor<S> concat_last(const std::vector<Tensor<S>>& parts) {
  CM_CHECK(!parts.empty(), "concat_last: no inputs");
  const Shape& s0 = parts[0].shape();
  i64 total = 0;
  for (const auto& p : parts) {
    CM_CHECK(p.rank() == parts[0].rank(), "concat_last: rank mismatch");
    for (int i = 0; i + 1 < p.rank(); ++i) {
      CM_CHECK(p.shape()[i] == s0[i], "concat_last: shape mismatch ", shape_str(p.shape()),
               " vs ", shape_str(s0));
    }
    total += p.dim(-1);
  }
  Shape os = s0;
  os.back() = total;
  Tensor<S> out(os);
  const i64 rows = out.numel() / total;
  S* po = out.data();
  i64 off = 0;
  for (const auto& p : parts) {
    const i64 c = p.dim(-1);
    const S* pp = p.data();
    for (i64 r = 0; r < rows; ++r) {
      std::copy(pp + r * c, pp + (r + 1) * c, po + r * total + off);
    }
    off += c;
  }
  bool need = false;
  for (const auto& p : parts) need = need || (Tape<S>::active() && p.requires_grad());
  if (need) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("concat_last", [parts, out, rows, total] {
      if (!out.has_grad()) return;
      const S* g = out.grad();
      i64 off2 = 0;
      for (const auto& p : parts) {
        const i64 c = p.dim(-1);
        if (p.requires_grad()) {
          p.ensure_grad();
          S* gp = p.storage()->grad.data();
          for (i64 r = 0; r < rows; ++r) {
            const S* grow = g + r * total + off2;
            S* prow = gp + r * c;
            for (i64 j = 0; j < c; ++j) prow[j] += grow[j];
          }
        }
        off2 += c;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice_last(const Tensor<S>& x, i64 start, i64 len) {
  const i64 c = x.dim(-1);
  CM_CHECK(start >= 0 && len >= 1 && start + len <= c, "slice_last: range [", start, ", ",
           start + len, ") out of bounds for last dim ", c);
  Shape os = x.shape();
  os.back() = len;
  Tensor<S> out(os);
  const i64 rows = x.numel() / c;
  const S* px = x.data();
  S* po = out.data();
  for (i64 r = 0; r < rows; ++r) {
    std::copy(px + r * c + start, px + r * c + start + len, po + r * len);
  }
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("slice_last", [x, out, start, len, rows, c] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      for (i64 r = 0; r < rows; ++r) {
        const S* grow = g + r * len;
        S* xrow = gx + r * c + start;
        for (i64 j = 0; j < len; ++j) xrow[j] += grow[j];
      }
    });
  }
  return out;
}

// [B,H,W,C] -> [B,2H,2W,C]
template <typename S>
Tensor<S> upsample_nearest_2x(const Tensor<S>& x) {
  CM_CHECK(x.rank() == 4, "upsample_nearest_2x: input must be [B,H,W,C], got ",
           shape_str(x.shape()));
  const i64 b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<S> out({b, 2 * h, 2 * w, c});
  const S* px = x.data();
  S* po = out.data();
  for (i64 bi = 0; bi < b; ++bi) {
    for (i64 y = 0; y < 2 * h; ++y) {
      for (i64 xx = 0; xx < 2 * w; ++xx) {
        const S* src = px + ((bi * h + y / 2) * w + xx / 2) * c;
        S* dst = po + ((bi * 2 * h + y) * 2 * w + xx) * c;
        std::copy(src, src + c, dst);
      }
    }
  }
  if (grad_needed<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("upsample_nearest_2x", [x, out, b, h, w, c] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      S* gx = x.storage()->grad.data();
      const S* g = out.grad();
      for (i64 bi = 0; bi < b; ++bi) {
        for (i64 y = 0; y < 2 * h; ++y) {
          for (i64 xx = 0; xx < 2 * w; ++xx) {
            const S* grow = g + ((bi * 2 * h + y) * 2 * w + xx) * c;
            S* dst = gx + ((bi * h + y / 2) * w + xx / 2) * c;
            for (i64 j = 0; j < c; ++j) dst[j] += grow[j];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace cm
