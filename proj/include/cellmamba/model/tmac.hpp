#pragma once

#include <string>
#include <utility>

#include "cellmamba/core/ops.hpp"
#include "cellmamba/model/mixers.hpp"

namespace cm {

// Epoch snapshot gating the consensus pathway; immutable during a forward pass.
struct CouplingState {
  int warmup_epochs = 35;  // N
  int epoch = 0;
  bool coupled() const { return epoch >= warmup_epochs; }
};

// Triple-mapping adaptive coupling: one shared 2->1 channel convolution serves
// both idiosyncratic maps and the consensus map.
template <typename S>
struct TmacParams {
  Tensor<S> attn_kernel;  // [k, k, 2, 1]
  Tensor<S> attn_bias;    // [1]
  int pad = 3;

  TmacParams() = default;
  explicit TmacParams(Rng& rng, int k = 7)
      : attn_kernel({k, k, 2, 1}), attn_bias({1}), pad(k / 2) {
    CM_CHECK(k >= 1 && k % 2 == 1, "TmacParams: kernel size must be odd, got ", k);
    init::glorot(attn_kernel, k * k * 2, k * k, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".attn_kernel", attn_kernel);
    f(prefix + ".attn_bias", attn_bias);
  }
};

// Splits [B,L,C] into two [B,L,C/2] halves; concat_last of the results is the
// exact inverse.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> channel_split(const Tensor<S>& x) {
  const i64 c = x.dim(-1);
  CM_CHECK(c % 2 == 0, "channel_split: channel count must be even, got ", c);
  return {slice_last(x, 0, c / 2), slice_last(x, c / 2, c / 2)};
}

// A = sigmoid(conv(concat[channel-mean(f), channel-max(f)])) on a 2D feature
// map [B,H,W,Cb]; returns [B,H,W,1] with values in (0,1).
template <typename S>
Tensor<S> idiosyncratic_map(const Tensor<S>& f, const TmacParams<S>& p) {
  CM_CHECK(f.rank() == 4, "idiosyncratic_map: input must be [B,H,W,C], got ",
           shape_str(f.shape()));
  Tensor<S> mean = reduce_mean(f, -1, true);
  Tensor<S> mx = reduce_max(f, -1, true);
  Tensor<S> stats = concat_last<S>({mean, mx});  // [B,H,W,2]
  return sigmoid(conv2d(stats, p.attn_kernel, p.attn_bias, 1, p.pad));
}

// Consensus over the summed branches, with the same shared parameters.
template <typename S>
Tensor<S> consensus_map(const Tensor<S>& f1, const Tensor<S>& f2, const TmacParams<S>& p) {
  CM_CHECK(same_shape(f1.shape(), f2.shape()), "consensus_map: branch shapes differ: ",
           shape_str(f1.shape()), " vs ", shape_str(f2.shape()));
  return idiosyncratic_map(add(f1, f2), p);
}

// During warmup the consensus map acts as all-ones (multiplicative identity),
// so the inputs pass through untouched; afterwards each idiosyncratic map is
// attenuated elementwise, giving A_m <= min(a_m, a_cons) pointwise.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> adaptive_couple(const Tensor<S>& a1, const Tensor<S>& a2,
                                                const Tensor<S>& a_cons,
                                                const CouplingState& s) {
  if (!s.coupled()) return {a1, a2};
  CM_CHECK(same_shape(a1.shape(), a_cons.shape()) && same_shape(a2.shape(), a_cons.shape()),
           "adaptive_couple: map shapes differ");
  return {mul(a1, a_cons), mul(a2, a_cons)};
}

// Gates each branch by its map (broadcast across channels), flattens back to
// tokens and concatenates, restoring [B,L,C].
template <typename S>
TokenSequence<S> tmac_fuse(const Tensor<S>& f1, const Tensor<S>& f2, const Tensor<S>& a1,
                           const Tensor<S>& a2) {
  const i64 b = f1.dim(0), h = f1.dim(1), w = f1.dim(2), cb = f1.dim(3);
  Tensor<S> g1 = reshape(mul(f1, a1), {b, h * w, cb});
  Tensor<S> g2 = reshape(mul(f2, a2), {b, h * w, cb});
  return {concat_last<S>({g1, g2}), h, w};
}

template <typename S>
TokenSequence<S> tmac_forward(const TokenSequence<S>& x, const TmacParams<S>& p,
                              const CouplingState& s) {
  const i64 b = x.batch(), c = x.channels();
  CM_CHECK(c % 2 == 0, "tmac_forward: channel count must be even, got ", c);
  auto [t1, t2] = channel_split(x.data);
  Tensor<S> f1 = reshape(t1, {b, x.h, x.w, c / 2});
  Tensor<S> f2 = reshape(t2, {b, x.h, x.w, c / 2});
  Tensor<S> a1 = idiosyncratic_map(f1, p);
  Tensor<S> a2 = idiosyncratic_map(f2, p);
  if (!s.coupled()) {
    // Warmup: the consensus pathway is absent entirely (identity coupling).
    return tmac_fuse(f1, f2, a1, a2);
  }
  Tensor<S> ac = consensus_map(f1, f2, p);
  auto [g1, g2] = adaptive_couple(a1, a2, ac, s);
  return tmac_fuse(f1, f2, g1, g2);
}

}  // namespace cm
