#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cellmamba/data/dataset.hpp"
#include "cellmamba/train/checkpoint.hpp"
#include "cellmamba/train/config_io.hpp"
#include "cellmamba/train/sgd.hpp"

namespace cm {

// One training image with its boxes mapped to dense class indices.
struct TrainExample {
  Tensor<float> image;  // [1,H,W,3] in [0,1]
  std::vector<GtBox> gts;
};

// Reads every manifest image from disk and converts annotations via the
// manifest's category -> class-index map.
std::vector<TrainExample> load_examples(const DatasetManifest& m, const std::string& root);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0;
  double lr = 0;  // at the last step of the epoch
};

struct TrainResult {
  std::vector<EpochLog> epochs;
};

// Deterministic SGD loop: fixed-seed shuffling and optional flip augmentation
// from a dedicated stream, the consensus gate advanced per epoch, a checkpoint
// rewritten after every epoch, and a CSV row per epoch. A non-finite loss
// aborts with the offending optimizer step in the message (NumericError).
class Trainer {
 public:
  Trainer(const ModelConfig& mc, const TrainConfig& tc, bool freeze_alpha = false);

  TrainResult fit(const std::vector<TrainExample>& data, const std::string& ckpt_path = "",
                  std::ostream* csv = nullptr);

  Detector<float>& model() { return model_; }
  const CouplingState& coupling() const { return state_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  TrainConfig cfg_;
  bool freeze_alpha_;
  Detector<float> model_;
  SgdOptimizer<float> sgd_;
  CouplingState state_;
  Rng data_rng_;  // shuffle + augmentation stream, separate from init
};

// Flips image (and boxes) in place; exposed for tests.
void flip_example(TrainExample& ex, bool horizontal, bool vertical);

}  // namespace cm
