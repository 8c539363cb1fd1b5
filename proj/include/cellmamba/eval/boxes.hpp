#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "cellmamba/core/check.hpp"

namespace cm {

// Axis-aligned box in image pixels, corner form.
struct BBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x1 > x0 && y1 > y0; }
};

// Intersection over union; degenerate boxes contribute zero by convention.
inline double iou(const BBox& a, const BBox& b) {
  const double ix0 = std::max(a.x0, b.x0);
  const double iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1);
  const double iy1 = std::min(a.y1, b.y1);
  const double iw = ix1 - ix0, ih = iy1 - iy0;
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

// Reference box in center form.
struct Anchor {
  double cx = 0, cy = 0, w = 0, h = 0;
  BBox box() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

// deltas = ((gx-ax)/aw, (gy-ay)/ah, ln(gw/aw), ln(gh/ah))
inline std::array<double, 4> encode_box(const BBox& gt, const Anchor& a) {
  CM_CHECK(gt.valid(), "encode_box: ground-truth box has non-positive extent");
  CM_CHECK(a.w > 0 && a.h > 0, "encode_box: anchor has non-positive extent");
  const double gx = (gt.x0 + gt.x1) / 2, gy = (gt.y0 + gt.y1) / 2;
  const double gw = gt.width(), gh = gt.height();
  return {(gx - a.cx) / a.w, (gy - a.cy) / a.h, std::log(gw / a.w), std::log(gh / a.h)};
}

// Exact inverse of encode_box, with the size terms clamped (exp argument <= 4)
// and the result clipped to the image bounds.
inline BBox decode_box(const std::array<double, 4>& d, const Anchor& a, double img_w,
                       double img_h) {
  const double cx = d[0] * a.w + a.cx;
  const double cy = d[1] * a.h + a.cy;
  const double w = a.w * std::exp(std::min(d[2], 4.0));
  const double h = a.h * std::exp(std::min(d[3], 4.0));
  BBox out{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  out.x0 = std::clamp(out.x0, 0.0, img_w);
  out.x1 = std::clamp(out.x1, 0.0, img_w);
  out.y0 = std::clamp(out.y0, 0.0, img_h);
  out.y1 = std::clamp(out.y1, 0.0, img_h);
  return out;
}

struct Detection {
  BBox bbox;
  int class_id = 0;
  double score = 0;
};

struct GtBox {
  BBox box;
  int class_id = 0;
};

}  // namespace cm
