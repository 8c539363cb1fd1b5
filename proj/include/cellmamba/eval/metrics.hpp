#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "cellmamba/eval/boxes.hpp"
#include "cellmamba/model/head.hpp"

namespace cm {

// One evaluated image: its surviving detections and its ground truth.
struct ImageEval {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

struct ApResult {
  double ap = 0;
  bool defined = false;  // false when a class has neither gts nor detections
};

struct MapSummary {
  double map = 0, map50 = 0, map75 = 0;
  std::vector<double> ap50_per_class;  // -1 marks classes excluded as undefined
};

struct PrF1 {
  double best_threshold = 0;
  double precision = 0, recall = 0, f1 = 0;
};

// Aggregate metrics plus the threshold search, serialized for regression
// tests. JSON keys: map, map50, map75, ap50_per_class, best_threshold,
// precision, recall, f1, num_images (undefined per-class entries are null).
struct EvalReport {
  double map = 0, map50 = 0, map75 = 0;
  std::vector<double> ap50_per_class;
  double best_threshold = 0;
  double precision = 0, recall = 0, f1 = 0;
  int num_images = 0;
};

// Greedy score-descending NMS, applied per class; kept detections are
// returned sorted by (score desc, then original index) and no kept pair of
// the same class overlaps above the threshold.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

// Class-wise AP at one IoU threshold via 101-point interpolation over all
// images; detections are ranked globally, matched greedily within their image.
ApResult average_precision(const std::vector<ImageEval>& images, int class_id,
                           double iou_threshold);

// COCO-style triple: AP averaged over IoU 0.50:0.05:0.95, plus AP@50 / AP@75.
MapSummary map_eval(const std::vector<ImageEval>& images, int num_classes);

// Sweeps confidence thresholds 0.05:0.05:0.95 and returns the macro P/R/F1 at
// the F1-maximizing threshold (ties to the lowest threshold); matching is
// greedy IoU >= iou_threshold, per class, per image.
PrF1 optimal_threshold_prf1(const std::vector<ImageEval>& images, int num_classes,
                            double iou_threshold = 0.5);

// map_eval + optimal_threshold_prf1 in one report.
EvalReport evaluate(const std::vector<ImageEval>& images, int num_classes);

std::string to_json(const EvalReport& r);
EvalReport eval_report_from_json(const std::string& text);

// Turns one image's head outputs into scored, decoded, clipped detections:
// sigmoid scores, per-level floor + top-k, box decoding against the anchors.
// Candidate order is deterministic (score desc, anchor index, class).
template <typename S>
std::vector<Detection> decode_and_filter(const HeadOutputs<S>& out,
                                         const std::vector<std::vector<Anchor>>& anchors,
                                         i64 batch_index, double img_w, double img_h,
                                         double score_floor = 0.05, int top_k = 1000) {
  CM_CHECK(score_floor >= 0 && score_floor < 1, "decode_and_filter: score_floor must be in [0,1), got ",
           score_floor);
  CM_CHECK(top_k >= 1, "decode_and_filter: top_k must be >= 1, got ", top_k);
  CM_CHECK(out.cls.size() == anchors.size(), "decode_and_filter: ", anchors.size(),
           " anchor levels for ", out.cls.size(), " output levels");

  struct Candidate {
    double score;
    i64 anchor;
    int cls;
  };

  std::vector<Detection> result;
  for (std::size_t l = 0; l < out.cls.size(); ++l) {
    const Tensor<S>& cl = out.cls[l];
    const Tensor<S>& bx = out.box[l];
    const i64 h = cl.dim(1), w = cl.dim(2);
    const i64 a_per = bx.dim(3) / 4;
    const i64 k = cl.dim(3) / a_per;
    const i64 n_anchor = h * w * a_per;
    CM_CHECK(static_cast<i64>(anchors[l].size()) == n_anchor, "decode_and_filter: level ",
             l, " has ", anchors[l].size(), " anchors for ", n_anchor, " locations");
    const S* cp = cl.data() + batch_index * n_anchor * k;
    const S* bp = bx.data() + batch_index * n_anchor * 4;

    std::vector<Candidate> cands;
    for (i64 i = 0; i < n_anchor; ++i) {
      for (i64 c = 0; c < k; ++c) {
        const double z = static_cast<double>(cp[i * k + c]);
        const double p = 1.0 / (1.0 + std::exp(-z));
        if (p >= score_floor) cands.push_back({p, i, static_cast<int>(c)});
      }
    }
    auto better = [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.anchor != b.anchor) return a.anchor < b.anchor;
      return a.cls < b.cls;
    };
    if (static_cast<i64>(cands.size()) > top_k) {
      std::partial_sort(cands.begin(), cands.begin() + top_k, cands.end(), better);
      cands.resize(top_k);
    } else {
      std::sort(cands.begin(), cands.end(), better);
    }

    for (const Candidate& c : cands) {
      const std::array<double, 4> d{
          static_cast<double>(bp[c.anchor * 4 + 0]), static_cast<double>(bp[c.anchor * 4 + 1]),
          static_cast<double>(bp[c.anchor * 4 + 2]), static_cast<double>(bp[c.anchor * 4 + 3])};
      const BBox box = decode_box(d, anchors[l][c.anchor], img_w, img_h);
      if (!box.valid()) continue;  // fully clipped away
      result.push_back({box, c.cls, c.score});
    }
  }
  return result;
}

}  // namespace cm
