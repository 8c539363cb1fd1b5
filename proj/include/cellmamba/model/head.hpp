#pragma once

#include <string>
#include <vector>

#include "cellmamba/eval/boxes.hpp"
#include "cellmamba/model/backbone.hpp"

namespace cm {

inline constexpr int kPyramidLevels = 5;  // T

// Adaptive Mamba Head: per-level scale weights from dual pooling, then a
// classification branch and a box branch, each ONE CellMamba block plus a 1x1
// projection shared across all five levels.
template <typename S>
struct HeadParams {
  Tensor<S> fc_w, fc_b;           // [5,5], [5]
  BlockParams<S> cls_block, box_block;
  Tensor<S> cls_out_w, cls_out_b;  // [F, K*A]
  Tensor<S> box_out_w, box_out_b;  // [F, 4*A]

  HeadParams() = default;
  HeadParams(const ModelConfig& cfg, Rng& rng)
      : fc_w({kPyramidLevels, kPyramidLevels}),
        fc_b({kPyramidLevels}),
        cls_block(MixerKind::kNcMamba, cfg.fpn_channels, cfg.n_state, cfg.msa_heads,
                  cfg.ffn_expansion, rng),
        box_block(MixerKind::kNcMamba, cfg.fpn_channels, cfg.n_state, cfg.msa_heads,
                  cfg.ffn_expansion, rng),
        cls_out_w({cfg.fpn_channels, cfg.num_classes * cfg.anchors_per_location}),
        cls_out_b({cfg.num_classes * cfg.anchors_per_location}),
        box_out_w({cfg.fpn_channels, 4 * cfg.anchors_per_location}),
        box_out_b({4 * cfg.anchors_per_location}) {
    init::glorot(fc_w, kPyramidLevels, kPyramidLevels, rng);
    init::glorot(cls_out_w, cfg.fpn_channels, cfg.num_classes, rng);
    init::glorot(box_out_w, cfg.fpn_channels, 4, rng);
    // Prior so initial class probabilities sit near pi: keeps the focal loss
    // from exploding on the dense negatives of the first steps.
    const double pi = 0.01;
    const S prior = static_cast<S>(std::log(pi / (1.0 - pi)));
    for (auto& v : cls_out_b.values()) v = prior;
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& f) {
    f(prefix + ".fc.w", fc_w);
    f(prefix + ".fc.b", fc_b);
    cls_block.visit(prefix + ".cls_block", f);
    box_block.visit(prefix + ".box_block", f);
    f(prefix + ".cls_out.w", cls_out_w);
    f(prefix + ".cls_out.b", cls_out_b);
    f(prefix + ".box_out.w", box_out_w);
    f(prefix + ".box_out.b", box_out_b);
  }
};

template <typename S>
struct HeadOutputs {
  std::vector<Tensor<S>> cls;  // per level [B,H,W,K*A]
  std::vector<Tensor<S>> box;  // per level [B,H,W,4*A]
};

// Spatial mean per channel, then channel mean: one pooled descriptor per
// level, stacked into s in R^[B,5].
template <typename S>
Tensor<S> dual_pool(const PyramidSet<S>& pyramid) {
  CM_CHECK(static_cast<int>(pyramid.levels.size()) == kPyramidLevels,
           "dual_pool: need ", kPyramidLevels, " levels, got ", pyramid.levels.size());
  std::vector<Tensor<S>> pooled;
  for (const Tensor<S>& level : pyramid.levels) {
    const i64 b = level.dim(0), h = level.dim(1), w = level.dim(2), c = level.dim(3);
    Tensor<S> tokens = reshape(level, {b, h * w, c});
    Tensor<S> z = reduce_mean(tokens, 1);  // [B,C] spatial mean
    pooled.push_back(reduce_mean(z, 1, true));  // [B,1] channel mean
  }
  return concat_last<S>(pooled);  // [B,5]
}

template <typename S>
Tensor<S> scale_weights(const Tensor<S>& s, const Tensor<S>& fc_w, const Tensor<S>& fc_b) {
  return sigmoid(linear(s, fc_w, fc_b));  // [B,5], entries in (0,1)
}

// When freeze_alpha is set the per-level scaling is bypassed entirely
// (alpha identically 1): the control-experiment head.
template <typename S>
HeadOutputs<S> head_forward(const PyramidSet<S>& pyramid, const HeadParams<S>& p,
                            const CouplingState& s, bool freeze_alpha = false) {
  CM_CHECK(static_cast<int>(pyramid.levels.size()) == kPyramidLevels,
           "head_forward: need ", kPyramidLevels, " levels, got ", pyramid.levels.size());
  Tensor<S> alpha;
  if (!freeze_alpha) {
    alpha = scale_weights(dual_pool(pyramid), p.fc_w, p.fc_b);
  }
  HeadOutputs<S> out;
  for (int t = 0; t < kPyramidLevels; ++t) {
    const Tensor<S>& level = pyramid.levels[t];
    const i64 b = level.dim(0), h = level.dim(1), w = level.dim(2), c = level.dim(3);
    Tensor<S> tokens = reshape(level, {b, h * w, c});
    if (!freeze_alpha) {
      Tensor<S> at = reshape(slice_last(alpha, t, 1), {b, 1, 1});
      tokens = mul(tokens, at);
    }
    TokenSequence<S> seq{tokens, h, w};
    Tensor<S> cls_feat = cellmamba_block(seq, p.cls_block, s).data;
    Tensor<S> box_feat = cellmamba_block(seq, p.box_block, s).data;
    Tensor<S> cls = linear(cls_feat, p.cls_out_w, p.cls_out_b);
    Tensor<S> box = linear(box_feat, p.box_out_w, p.box_out_b);
    out.cls.push_back(reshape(cls, {b, h, w, cls.dim(-1)}));
    out.box.push_back(reshape(box, {b, h, w, box.dim(-1)}));
  }
  return out;
}

// Anchor layout per location, A=1: one square box of side 4*stride centered on
// the pixel center. A=9: 3 scales {2^0, 2^(1/3), 2^(2/3)} x 3 aspect ratios
// {0.5, 1, 2} (ratio = h/w), scales varying fastest.
inline std::vector<Anchor> level_anchors(i64 h, i64 w, int stride, int per_location) {
  CM_CHECK(per_location == 1 || per_location == 9, "level_anchors: A must be 1 or 9, got ",
           per_location);
  std::vector<Anchor> out;
  out.reserve(h * w * per_location);
  const double base = 4.0 * stride;
  for (i64 y = 0; y < h; ++y) {
    for (i64 x = 0; x < w; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      if (per_location == 1) {
        out.push_back({cx, cy, base, base});
        continue;
      }
      for (double ratio : {0.5, 1.0, 2.0}) {
        for (double scale : {1.0, std::pow(2.0, 1.0 / 3.0), std::pow(2.0, 2.0 / 3.0)}) {
          const double side = base * scale;
          const double sq = std::sqrt(ratio);
          out.push_back({cx, cy, side / sq, side * sq});
        }
      }
    }
  }
  return out;
}

// One vector per pyramid level, matching the head's per-level outputs.
template <typename S>
std::vector<std::vector<Anchor>> generate_anchors(const PyramidSet<S>& pyramid,
                                                  int per_location) {
  std::vector<std::vector<Anchor>> out;
  for (std::size_t t = 0; t < pyramid.levels.size(); ++t) {
    out.push_back(level_anchors(pyramid.levels[t].dim(1), pyramid.levels[t].dim(2),
                                pyramid.strides[t], per_location));
  }
  return out;
}

}  // namespace cm
