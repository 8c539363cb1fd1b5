#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "cellmamba/core/ops.hpp"
#include "cellmamba/core/rng.hpp"
#include "cellmamba/model/config.hpp"

namespace cm {

// Batched token tensor with its spatial provenance (L = h * w).
template <typename S>
struct TokenSequence {
  Tensor<S> data;  // [B, L, C]
  i64 h = 0, w = 0;

  TokenSequence() = default;
  TokenSequence(Tensor<S> d, i64 height, i64 width) : data(std::move(d)), h(height), w(width) {
    CM_CHECK(data.rank() == 3, "TokenSequence: data must be [B,L,C], got ",
             shape_str(data.shape()));
    CM_CHECK(data.dim(1) == h * w, "TokenSequence: L=", data.dim(1),
             " does not equal h*w=", h, "*", w);
  }
  i64 batch() const { return data.dim(0); }
  i64 len() const { return data.dim(1); }
  i64 channels() const { return data.dim(2); }
};

template <typename S>
using ParamVisitor = std::function<void(const std::string&, Tensor<S>&)>;

namespace init {

// Uniform Glorot-style initialization for a weight with the given fan sizes.
template <typename S>
void glorot(Tensor<S>& w, i64 fan_in, i64 fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.values()) v = static_cast<S>(rng.uniform(-bound, bound));
}

}  // namespace init

// ---------------------------------------------------------------------------
// NC-Mamba: non-causal linear-time token mixing through a shared global state.
//
//   v_i = W_in x_i         (values)
//   B_i = W_B x_i          (write keys, R^N)
//   C_t = W_C x_t          (read keys, R^N)
//   a_i = sigmoid(w_a . x_i + b_a)
//   H   = sum_i a_i (B_i outer v_i)          in R^{N x C}
//   y_t = (C_t H) / (sum_i a_i + eps)
//   out = W_out y
//
// One pass builds H, one pass reads it: O(L * N * C). No positional order is
// used anywhere, so the mixer is permutation-equivariant.
// ---------------------------------------------------------------------------

template <typename S>
struct NcMambaParams {
  Tensor<S> w_in;    // [C, C]
  Tensor<S> w_b;     // [C, N]
  Tensor<S> w_c;     // [C, N]
  Tensor<S> w_gate;  // [C, 1]
  Tensor<S> b_gate;  // [1]
  Tensor<S> w_out;   // [C, C]

  NcMambaParams() = default;
  NcMambaParams(i64 dim, i64 n_state, Rng& rng)
      : w_in({dim, dim}),
        w_b({dim, n_state}),
        w_c({dim, n_state}),
        w_gate({dim, 1}),
        b_gate({1}),
        w_out({dim, dim}) {
    CM_CHECK(n_state >= 1, "NcMambaParams: need n_state >= 1, got ", n_state);
    init::glorot(w_in, dim, dim, rng);
    init::glorot(w_b, dim, n_state, rng);
    init::glorot(w_c, dim, n_state, rng);
    init::glorot(w_gate, dim, 1, rng);
    init::glorot(w_out, dim, dim, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".w_in", w_in);
    f(prefix + ".w_b", w_b);
    f(prefix + ".w_c", w_c);
    f(prefix + ".w_gate", w_gate);
    f(prefix + ".b_gate", b_gate);
    f(prefix + ".w_out", w_out);
  }
};

inline constexpr double kNcMambaEps = 1e-6;

template <typename S>
TokenSequence<S> nc_mamba_mix(const TokenSequence<S>& x, const NcMambaParams<S>& p) {
  CM_CHECK(x.len() >= 1, "nc_mamba_mix: empty sequence");
  Tensor<S> v = matmul(x.data, p.w_in);                      // [B,L,C]
  Tensor<S> bk = matmul(x.data, p.w_b);                      // [B,L,N]
  Tensor<S> ck = matmul(x.data, p.w_c);                      // [B,L,N]
  Tensor<S> a = sigmoid(linear(x.data, p.w_gate, p.b_gate));  // [B,L,1]
  Tensor<S> av = mul(v, a);                                  // weighted values
  Tensor<S> state = matmul(transpose_last2(bk), av);         // [B,N,C]
  Tensor<S> y = matmul(ck, state);                           // [B,L,C]
  Tensor<S> denom = add_scalar(reduce_sum(a, 1, true), static_cast<S>(kNcMambaEps));
  y = divide(y, denom);  // [B,L,C] / [B,1,1]
  return {matmul(y, p.w_out), x.h, x.w};
}

// Explicit O(L^2) reference: y_t = sum_i a_i (C_t . B_i) v_i / (sum a + eps),
// with no intermediate state tensor. Forward-only; test/verification use.
template <typename S>
TokenSequence<S> nc_mamba_naive_oracle(const TokenSequence<S>& x, const NcMambaParams<S>& p) {
  CM_CHECK(x.len() >= 1, "nc_mamba_naive_oracle: empty sequence");
  const i64 bsz = x.batch(), l = x.len();
  const i64 c = p.w_in.dim(1);  // value width, from the projection itself
  const i64 n = p.w_b.dim(1);
  typename Tape<S>::Scope no_tape(nullptr);

  Tensor<S> v = matmul(x.data, p.w_in);
  Tensor<S> bk = matmul(x.data, p.w_b);
  Tensor<S> ck = matmul(x.data, p.w_c);
  Tensor<S> a = sigmoid(linear(x.data, p.w_gate, p.b_gate));

  Tensor<S> y({bsz, l, c});
  for (i64 b = 0; b < bsz; ++b) {
    S asum = S(0);
    for (i64 i = 0; i < l; ++i) asum += a.data()[b * l + i];
    const S inv = S(1) / (asum + static_cast<S>(kNcMambaEps));
    for (i64 t = 0; t < l; ++t) {
      S* yt = y.data() + (b * l + t) * c;
      const S* ct = ck.data() + (b * l + t) * n;
      for (i64 i = 0; i < l; ++i) {
        const S* bi = bk.data() + (b * l + i) * n;
        S dot = S(0);
        for (i64 j = 0; j < n; ++j) dot += ct[j] * bi[j];
        const S w = a.data()[b * l + i] * dot;
        const S* vi = v.data() + (b * l + i) * c;
        for (i64 j = 0; j < c; ++j) yt[j] += w * vi[j];
      }
      for (i64 j = 0; j < c; ++j) yt[j] *= inv;
    }
  }
  return {matmul(y, p.w_out), x.h, x.w};
}

// ---------------------------------------------------------------------------
// Multi-head self-attention.
// ---------------------------------------------------------------------------

template <typename S>
struct MsaParams {
  Tensor<S> w_q, w_k, w_v, w_o;  // [C, C]
  int heads = 4;

  MsaParams() = default;
  MsaParams(i64 dim, int n_heads, Rng& rng)
      : w_q({dim, dim}), w_k({dim, dim}), w_v({dim, dim}), w_o({dim, dim}), heads(n_heads) {
    CM_CHECK(n_heads >= 1 && dim % n_heads == 0, "MsaParams: heads (", n_heads,
             ") must divide dim (", dim, ")");
    init::glorot(w_q, dim, dim, rng);
    init::glorot(w_k, dim, dim, rng);
    init::glorot(w_v, dim, dim, rng);
    init::glorot(w_o, dim, dim, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".w_q", w_q);
    f(prefix + ".w_k", w_k);
    f(prefix + ".w_v", w_v);
    f(prefix + ".w_o", w_o);
  }
};

template <typename S>
TokenSequence<S> msa(const TokenSequence<S>& x, const MsaParams<S>& p) {
  const i64 bsz = x.batch(), l = x.len(), c = x.channels();
  CM_CHECK(c % p.heads == 0, "msa: heads (", p.heads, ") must divide channels (", c, ")");
  const i64 h = p.heads, dh = c / h;

  auto split_heads = [&](const Tensor<S>& t) {
    // [B,L,C] -> [B,h,L,dh]
    return permute(reshape(t, {bsz, l, h, dh}), {0, 2, 1, 3});
  };
  Tensor<S> q = split_heads(matmul(x.data, p.w_q));
  Tensor<S> k = split_heads(matmul(x.data, p.w_k));
  Tensor<S> v = split_heads(matmul(x.data, p.w_v));

  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<S> attn = matmul(mul_scalar(q, scale), transpose_last2(k));  // [B,h,L,L]
  Tensor<S> probs = softmax(attn, -1);
  Tensor<S> ctx = matmul(probs, v);  // [B,h,L,dh]
  Tensor<S> merged = reshape(permute(ctx, {0, 2, 1, 3}), {bsz, l, c});
  return {matmul(merged, p.w_o), x.h, x.w};
}

// ---------------------------------------------------------------------------
// Feed-forward network: linear C -> eC, gelu, linear eC -> C.
// ---------------------------------------------------------------------------

template <typename S>
struct FfnParams {
  Tensor<S> w1, b1;  // [C, eC], [eC]
  Tensor<S> w2, b2;  // [eC, C], [C]

  FfnParams() = default;
  FfnParams(i64 dim, int expansion, Rng& rng)
      : w1({dim, dim * expansion}),
        b1({dim * expansion}),
        w2({dim * expansion, dim}),
        b2({dim}) {
    CM_CHECK(expansion >= 1, "FfnParams: need expansion >= 1, got ", expansion);
    init::glorot(w1, dim, dim * expansion, rng);
    init::glorot(w2, dim * expansion, dim, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

template <typename S>
TokenSequence<S> ffn(const TokenSequence<S>& x, const FfnParams<S>& p) {
  return {linear(gelu(linear(x.data, p.w1, p.b1)), p.w2, p.b2), x.h, x.w};
}

}  // namespace cm
