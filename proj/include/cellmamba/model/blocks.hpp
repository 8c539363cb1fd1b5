#pragma once

#include <string>

#include "cellmamba/model/tmac.hpp"

namespace cm {

// One CellMamba block: pre-norm mixer residual, TMAC gate, pre-norm FFN
// residual. Shape-preserving on [B,L,C] with even C.
template <typename S>
struct BlockParams {
  MixerKind kind = MixerKind::kNcMamba;
  Tensor<S> ln1_gamma, ln1_beta;
  NcMambaParams<S> nc;
  MsaParams<S> msa_p;
  TmacParams<S> tmac;
  Tensor<S> ln2_gamma, ln2_beta;
  FfnParams<S> ffn_p;

  BlockParams() = default;
  BlockParams(MixerKind mixer, i64 dim, i64 n_state, int heads, int expansion, Rng& rng)
      : kind(mixer),
        ln1_gamma(Tensor<S>::full({dim}, S(1))),
        ln1_beta({dim}),
        tmac(rng),
        ln2_gamma(Tensor<S>::full({dim}, S(1))),
        ln2_beta({dim}),
        ffn_p(dim, expansion, rng) {
    if (kind == MixerKind::kNcMamba) {
      nc = NcMambaParams<S>(dim, n_state, rng);
    } else {
      msa_p = MsaParams<S>(dim, heads, rng);
    }
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".ln1.gamma", ln1_gamma);
    f(prefix + ".ln1.beta", ln1_beta);
    if (kind == MixerKind::kNcMamba) {
      nc.visit(prefix + ".nc", f);
    } else {
      msa_p.visit(prefix + ".msa", f);
    }
    tmac.visit(prefix + ".tmac", f);
    f(prefix + ".ln2.gamma", ln2_gamma);
    f(prefix + ".ln2.beta", ln2_beta);
    ffn_p.visit(prefix + ".ffn", f);
  }
};

template <typename S>
TokenSequence<S> cellmamba_block(const TokenSequence<S>& x, const BlockParams<S>& p,
                                 const CouplingState& s) {
  TokenSequence<S> normed{layer_norm(x.data, p.ln1_gamma, p.ln1_beta), x.h, x.w};
  TokenSequence<S> mixed =
      p.kind == MixerKind::kNcMamba ? nc_mamba_mix(normed, p.nc) : msa(normed, p.msa_p);
  TokenSequence<S> u{add(x.data, mixed.data), x.h, x.w};
  TokenSequence<S> gated = tmac_forward(u, p.tmac, s);
  TokenSequence<S> normed2{layer_norm(gated.data, p.ln2_gamma, p.ln2_beta), x.h, x.w};
  return {add(gated.data, ffn(normed2, p.ffn_p).data), x.h, x.w};
}

}  // namespace cm
