#pragma once

#include <vector>

#include "cellmamba/eval/metrics.hpp"
#include "cellmamba/model/detector.hpp"
#include "cellmamba/train/config_io.hpp"
#include "cellmamba/train/trainer.hpp"

namespace cm {

struct EvalRun {
  EvalReport report;
  double mean_infer_ms = 0;  // forward + decode + NMS per image
};

// Grad-free detections for one already-forwarded image batch entry.
template <typename S>
std::vector<Detection> detect_image(const typename Detector<S>::Forward& fwd,
                                    const std::vector<std::vector<Anchor>>& anchors,
                                    i64 batch_index, double img_w, double img_h,
                                    const EvalConfig& ecfg) {
  std::vector<Detection> dets = decode_and_filter(fwd.outputs, anchors, batch_index, img_w,
                                                  img_h, ecfg.score_floor, ecfg.top_k);
  return nms(dets, ecfg.nms_iou);
}

// Runs the full decode -> NMS -> matching pipeline over a labelled set.
EvalRun evaluate_model(Detector<float>& model, const std::vector<TrainExample>& data,
                       const CouplingState& state, const EvalConfig& ecfg,
                       bool freeze_alpha = false);

}  // namespace cm
