#pragma once

#include <vector>

namespace fscd {

/// Axis-aligned box as (center-x, center-y, width, height) in normalized
/// image coordinates. The universal geometry carrier: exemplars, predictions,
/// pseudo ground truth, and evaluation boxes all use it.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  Box() = default;
  // Validates w, h > kMinSize; throws ValueError on degenerate input.
  Box(double cx, double cy, double w, double h);

  static constexpr double kMinSize = 1e-8;

  double area() const { return w * h; }
};

struct CornerBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
};

CornerBox to_corners(const Box& b);
Box from_corners(const CornerBox& c);
Box from_corners(double x1, double y1, double x2, double y2);

/// Intersection over union, in [0, 1]. Symmetric; 1 iff equal boxes; 0 iff
/// the interiors are disjoint.
double iou(const Box& a, const Box& b);

/// Generalized IoU in (-1, 1]:
///   giou = iou - (area(C) - area(union)) / area(C)
/// with C the smallest enclosing axis-aligned box. Equals iou when C
/// coincides with the union's bounding region; tends to -1 as the boxes
/// separate without bound.
double giou(const Box& a, const Box& b);

/// Greedy non-maximum suppression over score-sorted boxes. Returns the kept
/// indices in descending score order.
std::vector<std::size_t> nms_keep(const std::vector<Box>& boxes,
                                  const std::vector<double>& scores,
                                  double iou_threshold);

}  // namespace fscd
