#include "cellmamba/eval/pipeline.hpp"

#include <chrono>
#include <map>

namespace cm {

EvalRun evaluate_model(Detector<float>& model, const std::vector<TrainExample>& data,
                       const CouplingState& state, const EvalConfig& ecfg,
                       bool freeze_alpha) {
  CM_CHECK(!data.empty(), "evaluate_model: empty image set");
  ecfg.validate();
  Tape<float>::Scope no_tape(nullptr);

  std::map<std::pair<i64, i64>, std::vector<std::vector<Anchor>>> anchor_cache;
  std::vector<ImageEval> images;
  images.reserve(data.size());
  double total_s = 0;

  for (const TrainExample& ex : data) {
    const i64 h = ex.image.dim(1), w = ex.image.dim(2);
    const auto t0 = std::chrono::steady_clock::now();
    auto fwd = model.forward(ex.image, state, freeze_alpha);
    auto it = anchor_cache.find({h, w});
    if (it == anchor_cache.end()) {
      it = anchor_cache
               .emplace(std::make_pair(h, w),
                        generate_anchors(fwd.pyramid, model.cfg.anchors_per_location))
               .first;
    }
    ImageEval ie;
    ie.dets = detect_image<float>(fwd, it->second, 0, static_cast<double>(w),
                                  static_cast<double>(h), ecfg);
    total_s += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ie.gts = ex.gts;
    images.push_back(std::move(ie));
  }

  EvalRun run;
  run.report = evaluate(images, static_cast<int>(model.cfg.num_classes));
  run.mean_infer_ms = total_s / static_cast<double>(data.size()) * 1e3;
  return run;
}

}  // namespace cm
