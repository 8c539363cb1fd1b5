#pragma once

#include <string>
#include <vector>

#include "cellmamba/model/blocks.hpp"

namespace cm {

// All downsampling uses 4x4 stride-2 pad-1 convolutions: the overlapping merge
// halves even spatial sizes exactly, which the conv contract requires.
inline constexpr int kDownKernel = 4;
inline constexpr int kDownPad = 1;

template <typename S>
struct ConvParams {
  Tensor<S> kernel;  // [k,k,Cin,Cout]
  Tensor<S> bias;    // [Cout]

  ConvParams() = default;
  ConvParams(int k, i64 cin, i64 cout, Rng& rng) : kernel({k, k, cin, cout}), bias({cout}) {
    init::glorot(kernel, k * k * cin, k * k * cout, rng);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".kernel", kernel);
    f(prefix + ".bias", bias);
  }
};

// Five-level pyramid, strides 8..128, common channel count.
template <typename S>
struct PyramidSet {
  std::vector<Tensor<S>> levels;  // P2..P6, each [B,H_i,W_i,F]
  std::vector<int> strides;       // {8,16,32,64,128}
};

template <typename S>
struct BackboneParams {
  ConvParams<S> stem1, stem2;                   // 3 -> d0 -> d0, stride 4 total
  std::vector<std::vector<BlockParams<S>>> stages;  // 4 stages
  std::vector<ConvParams<S>> transitions;       // 3 stride-2 stage transitions
  ConvParams<S> lateral2, lateral3, lateral4;   // 1x1 to fpn_channels
  ConvParams<S> smooth2, smooth3, smooth4;      // 3x3 stride-1
  ConvParams<S> down5, down6;                   // stride-2 for P5, P6

  BackboneParams() = default;
  BackboneParams(const ModelConfig& cfg, Rng& rng)
      : stem1(kDownKernel, 3, cfg.stage_dims[0], rng),
        stem2(kDownKernel, cfg.stage_dims[0], cfg.stage_dims[0], rng),
        lateral2(1, cfg.stage_dims[1], cfg.fpn_channels, rng),
        lateral3(1, cfg.stage_dims[2], cfg.fpn_channels, rng),
        lateral4(1, cfg.stage_dims[3], cfg.fpn_channels, rng),
        smooth2(3, cfg.fpn_channels, cfg.fpn_channels, rng),
        smooth3(3, cfg.fpn_channels, cfg.fpn_channels, rng),
        smooth4(3, cfg.fpn_channels, cfg.fpn_channels, rng),
        down5(kDownKernel, cfg.fpn_channels, cfg.fpn_channels, rng),
        down6(kDownKernel, cfg.fpn_channels, cfg.fpn_channels, rng) {
    stages.resize(4);
    for (int st = 0; st < 4; ++st) {
      for (int d = 0; d < cfg.stage_depths[st]; ++d) {
        stages[st].emplace_back(ModelConfig::stage_mixer(st), cfg.stage_dims[st],
                                cfg.n_state, cfg.msa_heads, cfg.ffn_expansion, rng);
      }
    }
    for (int t = 0; t < 3; ++t) {
      transitions.emplace_back(kDownKernel, cfg.stage_dims[t], cfg.stage_dims[t + 1], rng);
    }
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    stem1.visit(prefix + ".stem1", f);
    stem2.visit(prefix + ".stem2", f);
    for (std::size_t st = 0; st < stages.size(); ++st) {
      for (std::size_t d = 0; d < stages[st].size(); ++d) {
        stages[st][d].visit(prefix + ".stage" + std::to_string(st) + ".block" +
                                std::to_string(d),
                            f);
      }
    }
    for (std::size_t t = 0; t < transitions.size(); ++t) {
      transitions[t].visit(prefix + ".transition" + std::to_string(t), f);
    }
    lateral2.visit(prefix + ".fpn.lateral2", f);
    lateral3.visit(prefix + ".fpn.lateral3", f);
    lateral4.visit(prefix + ".fpn.lateral4", f);
    smooth2.visit(prefix + ".fpn.smooth2", f);
    smooth3.visit(prefix + ".fpn.smooth3", f);
    smooth4.visit(prefix + ".fpn.smooth4", f);
    down5.visit(prefix + ".fpn.down5", f);
    down6.visit(prefix + ".fpn.down6", f);
  }
};

// Overlapping conv downsampling to stride 4: two 4x4/2 convs with a gelu.
template <typename S>
TokenSequence<S> stem(const Tensor<S>& image, const BackboneParams<S>& p) {
  CM_CHECK(image.rank() == 4 && image.dim(3) == 3, "stem: image must be [B,H,W,3], got ",
           shape_str(image.shape()));
  const i64 h = image.dim(1), w = image.dim(2);
  CM_CHECK(h % 32 == 0 && w % 32 == 0, "stem: input size ", h, "x", w,
           " must be a multiple of 32");
  Tensor<S> t = gelu(conv2d(image, p.stem1.kernel, p.stem1.bias, 2, kDownPad));
  t = conv2d(t, p.stem2.kernel, p.stem2.bias, 2, kDownPad);
  const i64 b = t.dim(0), hh = t.dim(1), ww = t.dim(2), c = t.dim(3);
  return {reshape(t, {b, hh * ww, c}), hh, ww};
}

// Stride-2 conv merging: half spatial, next stage width, L' = L/4.
template <typename S>
TokenSequence<S> downsample(const TokenSequence<S>& x, const ConvParams<S>& p) {
  CM_CHECK(x.h % 2 == 0 && x.w % 2 == 0, "downsample: spatial dims must be even, got ",
           x.h, "x", x.w);
  Tensor<S> f = reshape(x.data, {x.batch(), x.h, x.w, x.channels()});
  Tensor<S> t = conv2d(f, p.kernel, p.bias, 2, kDownPad);
  const i64 b = t.dim(0), hh = t.dim(1), ww = t.dim(2), c = t.dim(3);
  return {reshape(t, {b, hh * ww, c}), hh, ww};
}

// Outputs of stages 2-4 as 2D feature maps at strides 8/16/32.
template <typename S>
struct BackboneFeatures {
  Tensor<S> l2, l3, l4;  // [B,H,W,C_stage]
};

template <typename S>
Tensor<S> to_2d(const TokenSequence<S>& t) {
  return reshape(t.data, {t.batch(), t.h, t.w, t.channels()});
}

template <typename S>
BackboneFeatures<S> backbone_forward(const Tensor<S>& image, const BackboneParams<S>& p,
                                     const CouplingState& s) {
  TokenSequence<S> t = stem(image, p);
  BackboneFeatures<S> out;
  for (int st = 0; st < 4; ++st) {
    if (st > 0) t = downsample(t, p.transitions[st - 1]);
    for (const auto& block : p.stages[st]) t = cellmamba_block(t, block, s);
    if (st == 1) out.l2 = to_2d(t);
    if (st == 2) out.l3 = to_2d(t);
    if (st == 3) out.l4 = to_2d(t);
  }
  return out;
}

// 1x1 laterals, top-down nearest-2x addition, 3x3 smoothing; P5/P6 descend
// from the stride-32 lateral.
template <typename S>
PyramidSet<S> fpn_build(const BackboneFeatures<S>& feats, const BackboneParams<S>& p) {
  Tensor<S> l2 = conv2d(feats.l2, p.lateral2.kernel, p.lateral2.bias, 1, 0);
  Tensor<S> l3 = conv2d(feats.l3, p.lateral3.kernel, p.lateral3.bias, 1, 0);
  Tensor<S> l4 = conv2d(feats.l4, p.lateral4.kernel, p.lateral4.bias, 1, 0);
  Tensor<S> t4 = l4;
  Tensor<S> t3 = add(l3, upsample_nearest_2x(t4));
  Tensor<S> t2 = add(l2, upsample_nearest_2x(t3));
  PyramidSet<S> out;
  out.levels.push_back(conv2d(t2, p.smooth2.kernel, p.smooth2.bias, 1, 1));
  out.levels.push_back(conv2d(t3, p.smooth3.kernel, p.smooth3.bias, 1, 1));
  out.levels.push_back(conv2d(t4, p.smooth4.kernel, p.smooth4.bias, 1, 1));
  Tensor<S> p5 = conv2d(l4, p.down5.kernel, p.down5.bias, 2, kDownPad);
  Tensor<S> p6 = conv2d(relu(p5), p.down6.kernel, p.down6.bias, 2, kDownPad);
  out.levels.push_back(p5);
  out.levels.push_back(p6);
  out.strides = {8, 16, 32, 64, 128};
  return out;
}

}  // namespace cm
