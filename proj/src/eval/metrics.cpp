#include "cellmamba/eval/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cm {

namespace {

// (image, det) reference ranked globally by score for AP computation.
struct Ranked {
  double score;
  std::size_t image;
  std::size_t det;  // index into that image's class-filtered list
};

bool rank_order(const Ranked& a, const Ranked& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image != b.image) return a.image < b.image;
  return a.det < b.det;
}

// Greedy one-to-one matching of a score-sorted detection list against one
// image's gts: each detection takes the highest-IoU unmatched gt when that
// IoU clears the threshold.
struct MatchCounts {
  i64 tp = 0, fp = 0;
};

// Marks each ranked detection TP/FP in order; returns per-rank flags.
std::vector<bool> match_ranked(const std::vector<Ranked>& ranked,
                               const std::vector<std::vector<BBox>>& det_boxes,
                               const std::vector<std::vector<BBox>>& gt_boxes,
                               double iou_threshold) {
  std::vector<std::vector<bool>> taken(gt_boxes.size());
  for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
    taken[i].assign(gt_boxes[i].size(), false);
  }
  std::vector<bool> is_tp(ranked.size(), false);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const auto& rk = ranked[r];
    const BBox& db = det_boxes[rk.image][rk.det];
    double best = 0;
    int best_g = -1;
    const auto& gts = gt_boxes[rk.image];
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[rk.image][g]) continue;
      const double v = iou(db, gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best >= iou_threshold) {
      taken[rk.image][best_g] = true;
      is_tp[r] = true;
    }
  }
  return is_tp;
}

}  // namespace

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });

  std::vector<std::size_t> kept_idx;
  std::vector<bool> suppressed(dets.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept_idx.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
      if (iou(dets[j].bbox, dets[i].bbox) > iou_threshold) suppressed[j] = true;
    }
  }

  std::vector<Detection> out;
  out.reserve(kept_idx.size());
  for (std::size_t i : kept_idx) out.push_back(dets[i]);
  return out;
}

ApResult average_precision(const std::vector<ImageEval>& images, int class_id,
                           double iou_threshold) {
  std::vector<std::vector<BBox>> det_boxes(images.size()), gt_boxes(images.size());
  std::vector<Ranked> ranked;
  i64 total_gts = 0;
  for (std::size_t im = 0; im < images.size(); ++im) {
    for (const Detection& d : images[im].dets) {
      if (d.class_id != class_id) continue;
      ranked.push_back({d.score, im, det_boxes[im].size()});
      det_boxes[im].push_back(d.bbox);
    }
    for (const GtBox& g : images[im].gts) {
      if (g.class_id != class_id) continue;
      gt_boxes[im].push_back(g.box);
      ++total_gts;
    }
  }

  ApResult out;
  if (ranked.empty() && total_gts == 0) return out;  // undefined
  out.defined = true;
  if (ranked.empty() || total_gts == 0) return out;  // AP 0

  std::sort(ranked.begin(), ranked.end(), rank_order);
  const std::vector<bool> is_tp = match_ranked(ranked, det_boxes, gt_boxes, iou_threshold);

  // PR points, then the 101-point average of the precision envelope.
  const std::size_t n = ranked.size();
  std::vector<double> recall(n), precision(n);
  i64 tp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    tp += is_tp[r] ? 1 : 0;
    recall[r] = static_cast<double>(tp) / static_cast<double>(total_gts);
    precision[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  std::vector<double> envelope(n);
  double run = 0;
  for (std::size_t r = n; r-- > 0;) {
    run = std::max(run, precision[r]);
    envelope[r] = run;
  }

  double sum = 0;
  std::size_t cursor = 0;
  for (int i = 0; i <= 100; ++i) {
    const double want = i / 100.0;
    while (cursor < n && recall[cursor] < want) ++cursor;
    if (cursor < n) sum += envelope[cursor];
  }
  out.ap = sum / 101.0;
  return out;
}

MapSummary map_eval(const std::vector<ImageEval>& images, int num_classes) {
  CM_CHECK(num_classes >= 1, "map_eval: need at least one class, got ", num_classes);
  MapSummary out;
  out.ap50_per_class.assign(num_classes, -1.0);

  double acc_all = 0, sum50 = 0, sum75 = 0;
  i64 n_defined = 0;
  for (int k = 0; k < num_classes; ++k) {
    const ApResult probe = average_precision(images, k, 0.5);
    if (!probe.defined) continue;
    ++n_defined;
    out.ap50_per_class[k] = probe.ap;
    sum50 += probe.ap;
    sum75 += average_precision(images, k, 0.75).ap;
    for (int t = 0; t < 10; ++t) {
      acc_all += average_precision(images, k, 0.5 + 0.05 * t).ap;
    }
  }
  if (n_defined > 0) {
    out.map = acc_all / (10.0 * n_defined);
    out.map50 = sum50 / n_defined;
    out.map75 = sum75 / n_defined;
  }
  return out;
}

PrF1 optimal_threshold_prf1(const std::vector<ImageEval>& images, int num_classes,
                            double iou_threshold) {
  CM_CHECK(num_classes >= 1, "optimal_threshold_prf1: need at least one class, got ",
           num_classes);

  // Classes with neither gts nor detections are excluded from the macro mean.
  std::vector<bool> active(num_classes, false);
  std::vector<i64> gt_count(num_classes, 0);
  for (const ImageEval& im : images) {
    for (const Detection& d : im.dets) {
      if (d.class_id >= 0 && d.class_id < num_classes) active[d.class_id] = true;
    }
    for (const GtBox& g : im.gts) {
      if (g.class_id >= 0 && g.class_id < num_classes) {
        active[g.class_id] = true;
        ++gt_count[g.class_id];
      }
    }
  }

  PrF1 best;
  best.best_threshold = 0.05;
  bool first = true;
  for (int step = 1; step <= 19; ++step) {
    // one rounding, so e.g. the 0.30 grid point equals the literal 0.3
    const double tau = step / 20.0;
    double sp = 0, sr = 0, sf = 0;
    i64 n_active = 0;
    for (int k = 0; k < num_classes; ++k) {
      if (!active[k]) continue;
      ++n_active;

      std::vector<std::vector<BBox>> det_boxes(images.size()), gt_boxes(images.size());
      std::vector<Ranked> ranked;
      for (std::size_t im = 0; im < images.size(); ++im) {
        for (const Detection& d : images[im].dets) {
          if (d.class_id != k || d.score < tau) continue;
          ranked.push_back({d.score, im, det_boxes[im].size()});
          det_boxes[im].push_back(d.bbox);
        }
        for (const GtBox& g : images[im].gts) {
          if (g.class_id != k) continue;
          gt_boxes[im].push_back(g.box);
        }
      }
      std::sort(ranked.begin(), ranked.end(), rank_order);
      const std::vector<bool> is_tp =
          match_ranked(ranked, det_boxes, gt_boxes, iou_threshold);
      const i64 tp = std::count(is_tp.begin(), is_tp.end(), true);
      const i64 fp = static_cast<i64>(is_tp.size()) - tp;

      const double p = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
      const double r = gt_count[k] > 0 ? static_cast<double>(tp) / gt_count[k] : 0.0;
      const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
      sp += p;
      sr += r;
      sf += f;
    }
    if (n_active == 0) break;
    const double mp = sp / n_active, mr = sr / n_active, mf = sf / n_active;
    if (first || mf > best.f1) {  // strict: ties keep the lowest threshold
      best = {tau, mp, mr, mf};
      first = false;
    }
  }
  return best;
}

EvalReport evaluate(const std::vector<ImageEval>& images, int num_classes) {
  EvalReport r;
  const MapSummary m = map_eval(images, num_classes);
  r.map = m.map;
  r.map50 = m.map50;
  r.map75 = m.map75;
  r.ap50_per_class = m.ap50_per_class;
  const PrF1 p = optimal_threshold_prf1(images, num_classes);
  r.best_threshold = p.best_threshold;
  r.precision = p.precision;
  r.recall = p.recall;
  r.f1 = p.f1;
  r.num_images = static_cast<int>(images.size());
  return r;
}

std::string to_json(const EvalReport& r) {
  nlohmann::json j;
  j["map"] = r.map;
  j["map50"] = r.map50;
  j["map75"] = r.map75;
  nlohmann::json per_class = nlohmann::json::array();
  for (double ap : r.ap50_per_class) {
    if (ap < 0) {
      per_class.push_back(nullptr);
    } else {
      per_class.push_back(ap);
    }
  }
  j["ap50_per_class"] = per_class;
  j["best_threshold"] = r.best_threshold;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["num_images"] = r.num_images;
  return j.dump(2) + "\n";
}

EvalReport eval_report_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  EvalReport r;
  r.map = j.at("map").get<double>();
  r.map50 = j.at("map50").get<double>();
  r.map75 = j.at("map75").get<double>();
  for (const auto& v : j.at("ap50_per_class")) {
    r.ap50_per_class.push_back(v.is_null() ? -1.0 : v.get<double>());
  }
  r.best_threshold = j.at("best_threshold").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.num_images = j.at("num_images").get<int>();
  return r;
}

}  // namespace cm
