#include "cellmamba/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

namespace cm {

std::vector<TrainExample> load_examples(const DatasetManifest& m, const std::string& root) {
  const std::map<int, int> cls = m.class_index();
  std::map<int, std::vector<GtBox>> by_image;
  for (const auto& a : m.annotations) {
    by_image[a.image_id].push_back({annotation_box(a), cls.at(a.category_id)});
  }

  std::vector<TrainExample> out;
  out.reserve(m.images.size());
  for (const auto& im : m.images) {
    TrainExample ex;
    ImageU8 raw = read_png_rgb((std::filesystem::path(root) / im.file).string());
    CM_CHECK(raw.w == im.width && raw.h == im.height, "image '", im.file, "' is ", raw.w, "x",
             raw.h, " but the manifest says ", im.width, "x", im.height);
    ex.image = image_to_tensor<float>(raw);
    const auto it = by_image.find(im.id);
    if (it != by_image.end()) ex.gts = it->second;
    out.push_back(std::move(ex));
  }
  return out;
}

void flip_example(TrainExample& ex, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return;
  const i64 h = ex.image.dim(1), w = ex.image.dim(2), c = ex.image.dim(3);
  Tensor<float> flipped(ex.image.shape());
  const float* src = ex.image.data();
  float* dst = flipped.data();
  for (i64 y = 0; y < h; ++y) {
    const i64 sy = vertical ? h - 1 - y : y;
    for (i64 x = 0; x < w; ++x) {
      const i64 sx = horizontal ? w - 1 - x : x;
      for (i64 ch = 0; ch < c; ++ch) {
        dst[(y * w + x) * c + ch] = src[(sy * w + sx) * c + ch];
      }
    }
  }
  ex.image = flipped;
  for (GtBox& g : ex.gts) {
    if (horizontal) {
      const double x0 = g.box.x0, x1 = g.box.x1;
      g.box.x0 = static_cast<double>(w) - x1;
      g.box.x1 = static_cast<double>(w) - x0;
    }
    if (vertical) {
      const double y0 = g.box.y0, y1 = g.box.y1;
      g.box.y0 = static_cast<double>(h) - y1;
      g.box.y1 = static_cast<double>(h) - y0;
    }
  }
}

Trainer::Trainer(const ModelConfig& mc, const TrainConfig& tc, bool freeze_alpha)
    : cfg_(tc),
      freeze_alpha_(freeze_alpha),
      model_(mc, tc.seed),
      sgd_(tc.momentum, tc.weight_decay),
      data_rng_(tc.seed ^ 0xd1ce5badULL) {
  cfg_.validate();
  state_.warmup_epochs = tc.warmup_epochs;
  state_.epoch = 0;
  model_.set_requires_grad(true);
}

TrainResult Trainer::fit(const std::vector<TrainExample>& data, const std::string& ckpt_path,
                         std::ostream* csv) {
  CM_CHECK(!data.empty(), "trainer: empty dataset");
  const LossConfig loss_cfg;
  auto params = model_.named_params();

  // Anchor layouts depend only on the image size; cache per (H, W).
  std::map<std::pair<i64, i64>, std::vector<std::vector<Anchor>>> anchor_cache;

  if (csv) *csv << "epoch,mean_loss,lr\n";

  TrainResult result;
  std::vector<i64> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<i64>(i);

  i64 step = 0;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    state_.epoch = epoch;
    for (i64 i = static_cast<i64>(order.size()) - 1; i > 0; --i) {
      std::swap(order[i], order[data_rng_.uniform_int(0, i)]);
    }

    double loss_sum = 0;
    i64 batches = 0;
    double last_lr = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += cfg_.batch_size) {
      const std::size_t bsz =
          std::min<std::size_t>(cfg_.batch_size, order.size() - pos);

      // Assemble the batch (copy; augmentation must not touch the dataset).
      std::vector<TrainExample> batch(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        batch[b].image = data[order[pos + b]].image;
        batch[b].gts = data[order[pos + b]].gts;
        if (cfg_.flip_augment) {
          const bool hor = data_rng_.uniform() < 0.5;
          const bool ver = data_rng_.uniform() < 0.5;
          flip_example(batch[b], hor, ver);
        }
      }
      const i64 h = batch[0].image.dim(1), w = batch[0].image.dim(2);
      Tensor<float> images({static_cast<i64>(bsz), h, w, 3});
      std::vector<std::vector<GtBox>> gts(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        CM_CHECK(batch[b].image.dim(1) == h && batch[b].image.dim(2) == w,
                 "trainer: mixed image sizes in one batch (use batch_size 1)");
        std::copy_n(batch[b].image.data(), h * w * 3, images.data() + b * h * w * 3);
        gts[b] = std::move(batch[b].gts);
      }

      const double lr = cfg_.lr_at(step, epoch);
      last_lr = lr;
      try {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        auto fwd = model_.forward(images, state_, freeze_alpha_);
        auto it = anchor_cache.find({h, w});
        if (it == anchor_cache.end()) {
          it = anchor_cache
                   .emplace(std::make_pair(h, w),
                            generate_anchors(fwd.pyramid, model_.cfg.anchors_per_location))
                   .first;
        }
        DetectionLoss<float> loss = detection_loss(fwd.outputs, it->second, gts, loss_cfg);
        tape.backward(loss.total);
        loss_sum += static_cast<double>(loss.total.item());
      } catch (const NumericError& e) {
        throw NumericError(str_cat("training aborted at step ", step, ": ", e.what()));
      }
      sgd_.step(params, lr);
      model_.zero_grad();
      ++step;
      ++batches;
    }

    EpochLog log{epoch, loss_sum / static_cast<double>(batches), last_lr};
    result.epochs.push_back(log);
    if (csv) {
      *csv << log.epoch << "," << log.mean_loss << "," << log.lr << "\n";
      csv->flush();
    }
    if (!ckpt_path.empty()) {
      CheckpointMeta meta;
      meta.epoch = epoch + 1;
      meta.coupling = state_;
      meta.rng_state = data_rng_.save_state();
      save_checkpoint(ckpt_path, model_, meta);
    }
  }
  return result;
}

}  // namespace cm
