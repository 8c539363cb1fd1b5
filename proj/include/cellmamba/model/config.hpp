#pragma once

#include <array>

#include "cellmamba/core/check.hpp"
#include "cellmamba/core/tensor.hpp"

namespace cm {

enum class MixerKind { kNcMamba, kMsa };

// Architecture hyperparameters. Stage strides are fixed at 4/8/16/32 relative
// to the input; the pyramid adds 64 and 128 on top.
struct ModelConfig {
  std::array<int, 4> stage_depths{2, 2, 8, 4};
  std::array<i64, 4> stage_dims{64, 128, 256, 512};
  i64 fpn_channels = 256;
  i64 num_classes = 3;
  int anchors_per_location = 1;  // 1 or 9
  i64 n_state = 16;              // NC-Mamba state dimension
  int msa_heads = 4;
  int ffn_expansion = 4;

  // Stage mixers are fixed: NC-Mamba for stages 1-3, MSA for stage 4.
  static MixerKind stage_mixer(int stage) {
    return stage == 3 ? MixerKind::kMsa : MixerKind::kNcMamba;
  }

  // Small configuration for minutes-scale CPU runs.
  static ModelConfig micro() {
    ModelConfig c;
    c.stage_depths = {1, 1, 2, 1};
    c.stage_dims = {32, 64, 128, 256};
    c.fpn_channels = 64;
    c.n_state = 16;
    c.msa_heads = 4;
    c.ffn_expansion = 4;
    return c;
  }

  void validate() const {
    for (int d : stage_depths) CM_CHECK(d >= 1, "config: stage depths must be >= 1");
    for (i64 d : stage_dims) {
      CM_CHECK(d >= 2 && d % 2 == 0, "config: stage dims must be even (channel split), got ",
               d);
    }
    CM_CHECK(fpn_channels >= 2 && fpn_channels % 2 == 0,
             "config: fpn_channels must be even, got ", fpn_channels);
    CM_CHECK(num_classes >= 1, "config: need num_classes >= 1, got ", num_classes);
    CM_CHECK(anchors_per_location == 1 || anchors_per_location == 9,
             "config: anchors_per_location must be 1 or 9, got ", anchors_per_location);
    CM_CHECK(n_state >= 1, "config: need n_state >= 1, got ", n_state);
    CM_CHECK(msa_heads >= 1 && stage_dims[3] % msa_heads == 0, "config: msa_heads (",
             msa_heads, ") must divide stage 4 dim (", stage_dims[3], ")");
    CM_CHECK(ffn_expansion >= 1, "config: need ffn_expansion >= 1");
  }
};

}  // namespace cm
