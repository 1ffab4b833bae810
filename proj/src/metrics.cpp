#include "fscd/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fscd/errors.hpp"
#include "fscd/log.hpp"

namespace fscd {

CountingErrors counting_errors(const std::vector<CountPair>& pairs) {
  if (pairs.empty()) throw ValueError("counting_errors: no count pairs");
  CountingErrors out;
  double sum_abs = 0.0, sum_sq = 0.0, sum_rel = 0.0, sum_sq_rel = 0.0;
  long j_rel = 0;
  for (const CountPair& p : pairs) {
    if (p.c_star < 0 || p.c < 0) {
      throw ValueError("counting_errors: counts must be non-negative");
    }
    const double diff = static_cast<double>(p.c_star - p.c);
    sum_abs += std::abs(diff);
    sum_sq += diff * diff;
    if (p.c_star == 0) {
      ++out.excluded_zero_gt;
      continue;
    }
    sum_rel += std::abs(diff) / static_cast<double>(p.c_star);
    sum_sq_rel += diff * diff / static_cast<double>(p.c_star);
    ++j_rel;
  }
  const double j = static_cast<double>(pairs.size());
  out.mae = sum_abs / j;
  out.rmse = std::sqrt(sum_sq / j);
  if (out.excluded_zero_gt > 0) {
    warn("counting_errors: excluded " + std::to_string(out.excluded_zero_gt) +
         " image(s) with zero GT count from NAE/SRE");
  }
  if (j_rel > 0) {
    out.nae = sum_rel / static_cast<double>(j_rel);
    out.sre = std::sqrt(sum_sq_rel / static_cast<double>(j_rel));
  }
  return out;
}

namespace {

struct PooledPrediction {
  double score;
  long image;   // index into `images`, for deterministic tie-breaking
  long index;   // prediction index within its image
  bool is_tp;
};

// Greedy per-image matching at one IoU threshold, then dataset-wide pooling.
double ap_at_threshold(const std::vector<DetectionInstance>& images,
                       double iou_threshold, ApInterpolation interp) {
  long total_gt = 0;
  long total_pred = 0;
  std::vector<PooledPrediction> pooled;
  for (std::size_t im = 0; im < images.size(); ++im) {
    const DetectionInstance& inst = images[im];
    if (inst.boxes.size() != inst.scores.size()) {
      throw DimensionError("average_precision: |boxes| != |scores|");
    }
    total_gt += static_cast<long>(inst.gt.size());
    total_pred += static_cast<long>(inst.boxes.size());

    std::vector<long> order(inst.boxes.size());
    std::iota(order.begin(), order.end(), 0L);
    std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
      return inst.scores[static_cast<std::size_t>(a)] >
             inst.scores[static_cast<std::size_t>(b)];
    });
    std::vector<bool> gt_used(inst.gt.size(), false);
    for (long pi : order) {
      const Box& pred = inst.boxes[static_cast<std::size_t>(pi)];
      double best_iou = 0.0;
      long best_gt = -1;
      for (std::size_t gi = 0; gi < inst.gt.size(); ++gi) {
        if (gt_used[gi]) continue;
        const double v = iou(pred, inst.gt[gi]);
        if (v > best_iou) {
          best_iou = v;
          best_gt = static_cast<long>(gi);
        }
      }
      const bool tp = best_gt >= 0 && best_iou >= iou_threshold;
      if (tp) gt_used[static_cast<std::size_t>(best_gt)] = true;
      pooled.push_back({inst.scores[static_cast<std::size_t>(pi)],
                        static_cast<long>(im), pi, tp});
    }
  }

  if (total_gt == 0) return total_pred == 0 ? 1.0 : 0.0;
  if (pooled.empty()) return 0.0;

  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const PooledPrediction& a, const PooledPrediction& b) {
                     if (a.score != b.score) return a.score > b.score;
                     if (a.image != b.image) return a.image < b.image;
                     return a.index < b.index;
                   });

  std::vector<double> precision, recall;
  precision.reserve(pooled.size());
  recall.reserve(pooled.size());
  long tp = 0, fp = 0;
  for (const PooledPrediction& p : pooled) {
    if (p.is_tp) ++tp; else ++fp;
    precision.push_back(static_cast<double>(tp) /
                        static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  // Monotone non-increasing precision envelope from the right.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }

  if (interp == ApInterpolation::kCoco101) {
    double sum = 0.0;
    std::size_t ptr = 0;
    for (int ri = 0; ri <= 100; ++ri) {
      const double r = static_cast<double>(ri) / 100.0;
      while (ptr < recall.size() && recall[ptr] < r - 1e-12) ++ptr;
      if (ptr < recall.size()) sum += precision[ptr];
    }
    return sum / 101.0;
  }
  // Exact area: sum precision over each recall increment.
  double area = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    area += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return area;
}

}  // namespace

double average_precision_at(const std::vector<DetectionInstance>& images,
                            double iou_threshold, ApInterpolation interp) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw ValueError("average_precision: IoU threshold must lie in (0,1)");
  }
  return ap_at_threshold(images, iou_threshold, interp);
}

ApResult average_precision(const std::vector<DetectionInstance>& images,
                           ApInterpolation interp) {
  ApResult out;
  double sum = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double thr = 0.5 + 0.05 * static_cast<double>(i);
    const double ap = ap_at_threshold(images, thr, interp);
    if (i == 0) out.ap50 = ap;
    sum += ap;
  }
  out.map = sum / 10.0;
  return out;
}

std::string format_eval_report(const EvalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "              Counting                 |     Detection\n"
                "   MAE      RMSE      NAE      SRE     |    AP     AP50\n"
                " %7.2f  %7.2f  %7.3f  %7.3f    | %6.4f  %6.4f\n"
                " images: %ld   mean GT count: %.2f\n",
                r.counting.mae, r.counting.rmse, r.counting.nae,
                r.counting.sre, r.detection.map, r.detection.ap50,
                r.num_images, r.mean_gt_count);
  return buf;
}

std::string eval_report_to_json(const EvalReport& r) {
  nlohmann::json doc;
  doc["mae"] = r.counting.mae;
  doc["rmse"] = r.counting.rmse;
  doc["nae"] = r.counting.nae;
  doc["sre"] = r.counting.sre;
  doc["map"] = r.detection.map;
  doc["ap50"] = r.detection.ap50;
  doc["num_images"] = r.num_images;
  doc["mean_gt_count"] = r.mean_gt_count;
  doc["excluded_zero_gt"] = r.counting.excluded_zero_gt;
  return doc.dump(2) + "\n";
}

}  // namespace fscd
