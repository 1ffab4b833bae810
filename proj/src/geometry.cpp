#include "fscd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fscd/errors.hpp"

namespace fscd {

Box::Box(double cx_, double cy_, double w_, double h_)
    : cx(cx_), cy(cy_), w(w_), h(h_) {
  if (!(std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) &&
        std::isfinite(h))) {
    throw ValueError("Box: non-finite coordinate");
  }
  if (w <= kMinSize || h <= kMinSize) {
    throw ValueError("Box: degenerate size w=" + std::to_string(w) +
                     " h=" + std::to_string(h));
  }
}

CornerBox to_corners(const Box& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0,
          b.cy + b.h / 2.0};
}

Box from_corners(const CornerBox& c) {
  return from_corners(c.x1, c.y1, c.x2, c.y2);
}

Box from_corners(double x1, double y1, double x2, double y2) {
  return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1);
}

namespace {

double intersection_area(const CornerBox& a, const CornerBox& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  return ix * iy;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const CornerBox ca = to_corners(a);
  const CornerBox cb = to_corners(b);
  const double inter = intersection_area(ca, cb);
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  const CornerBox ca = to_corners(a);
  const CornerBox cb = to_corners(b);
  const double inter = intersection_area(ca, cb);
  const double uni = a.area() + b.area() - inter;
  const double ex = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
  const double ey = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
  const double enclosing = ex * ey;
  return inter / uni - (enclosing - uni) / enclosing;
}

std::vector<std::size_t> nms_keep(const std::vector<Box>& boxes,
                                  const std::vector<double>& scores,
                                  double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return scores[i] > scores[j];
  });
  std::vector<std::size_t> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) {
        suppressed[j] = true;
      }
    }
  }
  return keep;
}

}  // namespace fscd
