#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cellmamba/core/check.hpp"
#include "cellmamba/core/tensor.hpp"

namespace cm {

// Training hyperparameters. warmup_epochs is the consensus-gating epoch N of
// the coupling schedule; warmup_steps is the linear learning-rate ramp.
struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  int epochs = 100;
  int warmup_epochs = 35;   // N; micro runs typically use 20
  int warmup_steps = 100;   // linear lr ramp, in optimizer steps
  std::vector<int> milestones;  // empty -> 70% and 90% of epochs
  double milestone_factor = 0.1;
  int batch_size = 1;
  std::uint64_t seed = 7;
  bool flip_augment = false;

  void validate() const {
    CM_CHECK(lr > 0, "train config: need lr > 0, got ", lr);
    CM_CHECK(weight_decay >= 0, "train config: need weight_decay >= 0, got ", weight_decay);
    CM_CHECK(momentum >= 0 && momentum < 1, "train config: momentum must be in [0,1), got ",
             momentum);
    CM_CHECK(epochs >= 1, "train config: need epochs >= 1, got ", epochs);
    CM_CHECK(warmup_epochs >= 0 && warmup_epochs < epochs,
             "train config: warmup_epochs must satisfy 0 <= N < epochs, got N=", warmup_epochs,
             " for ", epochs, " epochs");
    CM_CHECK(warmup_steps >= 0, "train config: need warmup_steps >= 0, got ", warmup_steps);
    CM_CHECK(milestone_factor > 0, "train config: need milestone_factor > 0, got ",
             milestone_factor);
    CM_CHECK(batch_size >= 1, "train config: need batch_size >= 1, got ", batch_size);
    for (int m : milestones) {
      CM_CHECK(m >= 0 && m < epochs, "train config: milestone ", m, " outside [0, ", epochs,
               ")");
    }
  }

  // Explicit milestones, or the 70%/90% defaults.
  std::vector<int> resolved_milestones() const {
    std::vector<int> ms = milestones;
    if (ms.empty()) {
      ms = {static_cast<int>(epochs * 0.7), static_cast<int>(epochs * 0.9)};
    }
    std::sort(ms.begin(), ms.end());
    return ms;
  }

  // Linear ramp over the first warmup_steps optimizer steps, then a factor of
  // milestone_factor from each milestone epoch onward:
  //   lr(step, epoch) = lr * min(1, (step+1)/warmup_steps)
  //                        * factor^|{m in milestones : m <= epoch}|
  double lr_at(i64 step, int epoch) const {
    double ramp = 1.0;
    if (warmup_steps > 0 && step < warmup_steps) {
      ramp = static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    int decays = 0;
    for (int m : resolved_milestones()) {
      if (m <= epoch) ++decays;
    }
    return lr * ramp * std::pow(milestone_factor, decays);
  }
};

}  // namespace cm
