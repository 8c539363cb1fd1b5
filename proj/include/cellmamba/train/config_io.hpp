#pragma once

#include <string>

#include "cellmamba/model/config.hpp"
#include "cellmamba/train/schedule.hpp"

namespace cm {

// Post-processing knobs for evaluation and inference.
struct EvalConfig {
  double score_floor = 0.05;  // minimum sigmoid score kept before NMS
  double nms_iou = 0.5;       // same-class suppression threshold
  int top_k = 1000;           // candidate cap per image

  void validate() const;
};

// One JSON config file drives every subcommand. Sections: "model" (preset +
// per-field overrides), "train", "eval"; all keys optional with the defaults
// above and in ModelConfig/TrainConfig.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  bool freeze_alpha = false;  // train with the level-scaling gate pinned to 1
};

RunConfig run_config_from_json(const std::string& text);
std::string run_config_to_json(const RunConfig& rc);
RunConfig load_run_config(const std::string& path);

}  // namespace cm
