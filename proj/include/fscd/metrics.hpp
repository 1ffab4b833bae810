#pragma once

#include <string>
#include <vector>

#include "fscd/geometry.hpp"

namespace fscd {

struct CountPair {
  long c_star = 0;  // ground-truth count
  long c = 0;       // predicted count
};

struct CountingErrors {
  double mae = 0.0;
  double rmse = 0.0;
  double nae = 0.0;
  double sre = 0.0;
  long excluded_zero_gt = 0;  // images dropped from NAE/SRE (c* == 0)
};

/// MAE = (1/J)Σ|c*−c|, RMSE = √((1/J)Σ(c*−c)²), NAE = (1/J)Σ|c*−c|/c*,
/// SRE = √((1/J)Σ(c*−c)²/c*). Images with c* == 0 are excluded from NAE/SRE
/// with a logged warning, never silently.
CountingErrors counting_errors(const std::vector<CountPair>& pairs);

/// One image's detections and ground truth for AP computation.
struct DetectionInstance {
  std::vector<Box> boxes;
  std::vector<double> scores;
  std::vector<Box> gt;
};

enum class ApInterpolation {
  kCoco101,    // 101-point interpolation (default)
  kExactArea,  // exact area under the monotone precision envelope
};

struct ApResult {
  double map = 0.0;   // mean AP over IoU thresholds 0.50:0.05:0.95
  double ap50 = 0.0;  // AP at IoU 0.50
};

/// Dataset-pooled average precision: per image, score-sorted predictions
/// greedily match the unmatched GT box of highest IoU ≥ threshold; TP/FP are
/// then pooled over the dataset for one precision-recall curve. With no GT
/// anywhere, AP is 1 when there are also no predictions and 0 otherwise.
ApResult average_precision(
    const std::vector<DetectionInstance>& images,
    ApInterpolation interp = ApInterpolation::kCoco101);

/// AP at a single IoU threshold (exposed for tests and ablation).
double average_precision_at(const std::vector<DetectionInstance>& images,
                            double iou_threshold,
                            ApInterpolation interp = ApInterpolation::kCoco101);

struct EvalReport {
  CountingErrors counting;
  ApResult detection;
  long num_images = 0;
  double mean_gt_count = 0.0;
};

/// Human-readable report: counting block then detection block.
std::string format_eval_report(const EvalReport& report);
std::string eval_report_to_json(const EvalReport& report);

}  // namespace fscd
