#pragma once

#include <cmath>
#include <memory>
#include <type_traits>
#include <vector>

#include "cellmamba/core/ops.hpp"
#include "cellmamba/eval/boxes.hpp"
#include "cellmamba/model/head.hpp"

namespace cm {

struct LossConfig {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double box_weight = 1.0;  // lambda
  double pos_iou = 0.5;
  double neg_iou = 0.4;

  void validate() const {
    CM_CHECK(focal_alpha > 0 && focal_alpha < 1, "loss config: need 0 < focal_alpha < 1");
    CM_CHECK(focal_gamma >= 0, "loss config: need focal_gamma >= 0");
    CM_CHECK(neg_iou <= pos_iou, "loss config: need neg_iou <= pos_iou, got ", neg_iou,
             " > ", pos_iou);
  }
};

// Per-anchor assignment outcome.
inline constexpr int kIgnore = -2;
inline constexpr int kNegative = -1;

struct Assignment {
  std::vector<int> label;     // kIgnore, kNegative, or a class id
  std::vector<int> gt_index;  // matched gt for positives, -1 otherwise
  int num_pos = 0;
};

// IoU thresholding with per-gt force matching: max IoU >= pos_iou -> positive
// (argmax gt, ties to lowest index), < neg_iou -> negative, else ignore.
// Each gt then claims its single best anchor so no gt goes unmatched; when two
// gts prefer the same anchor the lower-indexed gt keeps it.
inline Assignment assign_targets(const std::vector<Anchor>& anchors,
                                 const std::vector<GtBox>& gts, const LossConfig& cfg) {
  const std::size_t n = anchors.size();
  Assignment out;
  out.label.assign(n, kNegative);
  out.gt_index.assign(n, -1);
  if (gts.empty()) return out;

  std::vector<double> best_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> gt_best_iou(gts.size(), -1.0);
  std::vector<i64> gt_best_anchor(gts.size(), -1);

  for (std::size_t i = 0; i < n; ++i) {
    const BBox abox = anchors[i].box();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(abox, gts[g].box);
      if (v > best_iou[i]) {  // strict: ties keep the lowest gt index
        best_iou[i] = v;
        best_gt[i] = static_cast<int>(g);
      }
      if (v > gt_best_iou[g]) {  // strict: ties keep the lowest anchor index
        gt_best_iou[g] = v;
        gt_best_anchor[g] = static_cast<i64>(i);
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (best_iou[i] >= cfg.pos_iou) {
      out.label[i] = gts[best_gt[i]].class_id;
      out.gt_index[i] = best_gt[i];
    } else if (best_iou[i] >= cfg.neg_iou) {
      out.label[i] = kIgnore;
    }
  }

  std::vector<bool> claimed(n, false);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const i64 i = gt_best_anchor[g];
    if (i < 0 || claimed[i]) continue;
    out.label[i] = gts[g].class_id;
    out.gt_index[i] = static_cast<int>(g);
    claimed[i] = true;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (out.label[i] >= 0) ++out.num_pos;
  }
  return out;
}

namespace detail {

// softplus(x) = log(1 + e^x), computed without overflow.
template <typename S>
S softplus(S x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, S(0));
}

}  // namespace detail

// Unnormalized focal-loss sum over one-vs-all sigmoid logits.
//
// logits: [..., K]; labels has one entry per logit row: kIgnore rows are
// excluded, a class id marks target 1 for that class (0 for the others), and
// kNegative marks target 0 everywhere.
//
//   FL = -alpha_t (1 - p_t)^gamma log(p_t),  alpha_t = alpha when target = 1
//
// Forward and backward use softplus-based log-probabilities, so saturated
// logits stay finite.
template <typename S>
Tensor<S> focal_sum(const Tensor<S>& logits, std::shared_ptr<const std::vector<int>> labels,
                    S alpha, S gamma) {
  const i64 k = logits.dim(-1);
  const i64 rows = logits.numel() / k;
  CM_CHECK(static_cast<i64>(labels->size()) == rows, "focal_sum: ", labels->size(),
           " labels for ", rows, " logit rows");

  auto fl_and_grad = [alpha, gamma](S z, bool target, S& dloss) {
    const S p = S(1) / (S(1) + std::exp(-z));
    if (target) {
      const S logp = -detail::softplus(-z);
      const S w = alpha * std::pow(S(1) - p, gamma);
      dloss = w * (gamma * p * logp - (S(1) - p));
      return -w * logp;
    }
    const S log1mp = -detail::softplus(z);
    const S w = (S(1) - alpha) * std::pow(p, gamma);
    dloss = w * (p - gamma * (S(1) - p) * log1mp);
    return -w * log1mp;
  };

  // Per-row partial sums, combined serially: the total is independent of the
  // thread count.
  std::vector<double> row_sum(rows, 0.0);
  const S* pz = logits.data();
  const std::vector<int>& lab = *labels;
  parallel_for(rows, 256, [&](i64 r0, i64 r1) {
    for (i64 r = r0; r < r1; ++r) {
      const int l = lab[r];
      if (l == kIgnore) continue;
      double acc = 0;
      S unused;
      for (i64 j = 0; j < k; ++j) {
        acc += static_cast<double>(fl_and_grad(pz[r * k + j], l == static_cast<int>(j), unused));
      }
      row_sum[r] = acc;
    }
  });
  double total = 0;
  for (i64 r = 0; r < rows; ++r) total += row_sum[r];

  Tensor<S> out({1}, {static_cast<S>(total)});
  if (grad_needed<S>(logits)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("focal_sum", [logits, labels, out, rows, k, fl_and_grad] {
      if (!out.has_grad()) return;
      logits.ensure_grad();
      S* gz = logits.storage()->grad.data();
      const S g = out.grad()[0];
      const S* pz2 = logits.data();
      const std::vector<int>& lab2 = *labels;
      parallel_for(rows, 256, [&](i64 r0, i64 r1) {
        for (i64 r = r0; r < r1; ++r) {
          const int l = lab2[r];
          if (l == kIgnore) continue;
          for (i64 j = 0; j < k; ++j) {
            S d;
            fl_and_grad(pz2[r * k + j], l == static_cast<int>(j), d);
            gz[r * k + j] += g * d;
          }
        }
      });
    });
  }
  return out;
}

// Normalized focal loss: sum / max(1, #positive rows).
template <typename S>
Tensor<S> focal_loss(const Tensor<S>& logits,
                     std::shared_ptr<const std::vector<int>> labels,
                     const LossConfig& cfg) {
  i64 npos = 0;
  for (int l : *labels) npos += l >= 0 ? 1 : 0;
  Tensor<S> s = focal_sum(logits, std::move(labels), static_cast<S>(cfg.focal_alpha),
                          static_cast<S>(cfg.focal_gamma));
  return mul_scalar(s, S(1) / static_cast<S>(std::max<i64>(npos, 1)));
}

// Unnormalized smooth-L1 sum over the four coordinates of positive rows.
//   per coordinate: 0.5 x^2 if |x| < 1 else |x| - 0.5, x = pred - target
template <typename S>
Tensor<S> smooth_l1_sum(const Tensor<S>& pred,
                        std::shared_ptr<const std::vector<std::type_identity_t<S>>> targets,
                        std::shared_ptr<const std::vector<int>> labels) {
  const i64 cols = pred.dim(-1);
  CM_CHECK(cols == 4, "smooth_l1_sum: expected 4 coordinates per row, got ", cols);
  const i64 rows = pred.numel() / cols;
  CM_CHECK(static_cast<i64>(labels->size()) == rows, "smooth_l1_sum: ", labels->size(),
           " labels for ", rows, " box rows");
  CM_CHECK(static_cast<i64>(targets->size()) == pred.numel(), "smooth_l1_sum: ",
           targets->size(), " target values for ", pred.numel(), " predictions");

  double total = 0;
  const S* pp = pred.data();
  const std::vector<S>& tg = *targets;
  const std::vector<int>& lab = *labels;
  for (i64 r = 0; r < rows; ++r) {
    if (lab[r] < 0) continue;
    for (i64 j = 0; j < 4; ++j) {
      const S x = pp[r * 4 + j] - tg[r * 4 + j];
      const S ax = std::abs(x);
      total += static_cast<double>(ax < S(1) ? S(0.5) * x * x : ax - S(0.5));
    }
  }

  Tensor<S> out({1}, {static_cast<S>(total)});
  if (grad_needed<S>(pred)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("smooth_l1_sum", [pred, targets, labels, out, rows] {
      if (!out.has_grad()) return;
      pred.ensure_grad();
      S* gp = pred.storage()->grad.data();
      const S g = out.grad()[0];
      const S* pp2 = pred.data();
      const std::vector<S>& tg2 = *targets;
      const std::vector<int>& lab2 = *labels;
      for (i64 r = 0; r < rows; ++r) {
        if (lab2[r] < 0) continue;
        for (i64 j = 0; j < 4; ++j) {
          const S x = pp2[r * 4 + j] - tg2[r * 4 + j];
          gp[r * 4 + j] += g * (std::abs(x) < S(1) ? x : (x > S(0) ? S(1) : S(-1)));
        }
      }
    });
  }
  return out;
}

// Normalized smooth-L1: sum / max(1, #positive rows); zero positives give 0.
template <typename S>
Tensor<S> smooth_l1(const Tensor<S>& pred,
                    std::shared_ptr<const std::vector<std::type_identity_t<S>>> targets,
                    std::shared_ptr<const std::vector<int>> labels) {
  i64 npos = 0;
  for (int l : *labels) npos += l >= 0 ? 1 : 0;
  Tensor<S> s = smooth_l1_sum(pred, std::move(targets), std::move(labels));
  return mul_scalar(s, S(1) / static_cast<S>(std::max<i64>(npos, 1)));
}

// total = cls + lambda * box, with a hard NaN gate.
template <typename S>
Tensor<S> total_loss(const Tensor<S>& cls_loss, const Tensor<S>& box_loss, double lambda) {
  Tensor<S> total = add(cls_loss, mul_scalar(box_loss, static_cast<S>(lambda)));
  CM_CHECK_NUMERIC(std::isfinite(static_cast<double>(total.item())),
                   "total_loss: non-finite objective (cls=", cls_loss.item(),
                   ", box=", box_loss.item(), ")");
  return total;
}

template <typename S>
struct DetectionLoss {
  Tensor<S> total, cls, box;  // scalars, autodiff-tracked
  int num_pos = 0;
};

// Full objective over a batch: per-image assignment against the flattened
// anchor set, per-level fused losses, one global positive-count normalizer.
template <typename S>
DetectionLoss<S> detection_loss(const HeadOutputs<S>& outputs,
                                const std::vector<std::vector<Anchor>>& anchors,
                                const std::vector<std::vector<GtBox>>& gts_per_image,
                                const LossConfig& cfg) {
  cfg.validate();
  const int levels = static_cast<int>(outputs.cls.size());
  CM_CHECK(levels > 0 && outputs.box.size() == outputs.cls.size(),
           "detection_loss: malformed head outputs");
  CM_CHECK(static_cast<int>(anchors.size()) == levels, "detection_loss: ", anchors.size(),
           " anchor levels for ", levels, " output levels");
  const i64 bsz = outputs.cls[0].dim(0);
  CM_CHECK(static_cast<i64>(gts_per_image.size()) == bsz, "detection_loss: ",
           gts_per_image.size(), " gt lists for batch of ", bsz);

  // Flattened anchor list in level-major order, mirroring the row order of the
  // per-level reshaped outputs.
  std::vector<Anchor> all;
  std::vector<i64> level_offset(levels + 1, 0);
  for (int l = 0; l < levels; ++l) {
    const i64 hw_a = outputs.cls[l].dim(1) * outputs.cls[l].dim(2) *
                     (outputs.box[l].dim(3) / 4);
    CM_CHECK(static_cast<i64>(anchors[l].size()) == hw_a, "detection_loss: level ", l,
             " has ", anchors[l].size(), " anchors but ", hw_a, " output rows");
    all.insert(all.end(), anchors[l].begin(), anchors[l].end());
    level_offset[l + 1] = level_offset[l] + hw_a;
  }
  const i64 total_anchors = level_offset[levels];

  // Per-level label and target buffers across the batch.
  std::vector<std::shared_ptr<std::vector<int>>> labels(levels);
  std::vector<std::shared_ptr<std::vector<S>>> targets(levels);
  for (int l = 0; l < levels; ++l) {
    const i64 m = level_offset[l + 1] - level_offset[l];
    labels[l] = std::make_shared<std::vector<int>>(bsz * m, kNegative);
    targets[l] = std::make_shared<std::vector<S>>(bsz * m * 4, S(0));
  }

  int num_pos = 0;
  for (i64 b = 0; b < bsz; ++b) {
    Assignment asg = assign_targets(all, gts_per_image[b], cfg);
    num_pos += asg.num_pos;
    for (int l = 0; l < levels; ++l) {
      const i64 m = level_offset[l + 1] - level_offset[l];
      for (i64 i = 0; i < m; ++i) {
        const i64 global = level_offset[l] + i;
        (*labels[l])[b * m + i] = asg.label[global];
        if (asg.label[global] >= 0) {
          const auto d = encode_box(gts_per_image[b][asg.gt_index[global]].box, all[global]);
          for (int j = 0; j < 4; ++j) {
            (*targets[l])[(b * m + i) * 4 + j] = static_cast<S>(d[j]);
          }
        }
      }
    }
  }

  const S inv_pos = S(1) / static_cast<S>(std::max(num_pos, 1));
  Tensor<S> cls_total, box_total;
  for (int l = 0; l < levels; ++l) {
    const i64 m = level_offset[l + 1] - level_offset[l];
    const i64 a_per = outputs.box[l].dim(3) / 4;
    const i64 k = outputs.cls[l].dim(3) / a_per;  // channel layout is anchor-major
    Tensor<S> logits = reshape(outputs.cls[l], {bsz * m, k});
    Tensor<S> deltas = reshape(outputs.box[l], {bsz * m, 4});
    Tensor<S> c = focal_sum(logits, labels[l], static_cast<S>(cfg.focal_alpha),
                            static_cast<S>(cfg.focal_gamma));
    Tensor<S> bx = smooth_l1_sum(deltas, targets[l], labels[l]);
    cls_total = cls_total.defined() ? add(cls_total, c) : c;
    box_total = box_total.defined() ? add(box_total, bx) : bx;
  }

  DetectionLoss<S> out;
  out.cls = mul_scalar(cls_total, inv_pos);
  out.box = mul_scalar(box_total, inv_pos);
  out.total = total_loss(out.cls, out.box, cfg.box_weight);
  out.num_pos = num_pos;
  (void)total_anchors;
  return out;
}

}  // namespace cm
