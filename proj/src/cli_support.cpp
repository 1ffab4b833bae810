#include "fscd/cli_support.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>

#include "fscd/errors.hpp"

namespace fscd {

namespace {

using nlohmann::json;

}  // namespace

void save_pseudo_boxes(const std::vector<PseudoLabeledImage>& items,
                       const std::string& path) {
  json doc = json::array();
  for (const auto& item : items) {
    json entry;
    entry["image_id"] = item.base.image_id;
    entry["boxes"] = json::array();
    for (const Box& b : item.pseudo_boxes) {
      entry["boxes"].push_back(json::array({b.cx, b.cy, b.w, b.h}));
    }
    doc.push_back(std::move(entry));
  }
  std::ofstream out(path);
  if (!out) throw ValueError("cannot write pseudo boxes to " + path);
  out << doc.dump(2) << "\n";
}

std::vector<PseudoLabeledImage> load_pseudo_boxes(
    const std::string& path, const std::vector<AnnotatedImage>& base) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("pseudo boxes file not found: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw SchemaViolationError("pseudo boxes " + path + ": " + e.what());
  }
  if (!doc.is_array()) {
    throw SchemaViolationError("pseudo boxes " + path +
                               ": top level must be an array");
  }

  std::map<std::string, std::vector<Box>> by_id;
  for (const auto& entry : doc) {
    std::vector<Box> boxes;
    for (const auto& b : entry.at("boxes")) {
      if (!b.is_array() || b.size() != 4) {
        throw SchemaViolationError("pseudo boxes " + path +
                                   ": each box must be [cx, cy, w, h]");
      }
      boxes.emplace_back(b[0].get<double>(), b[1].get<double>(),
                         b[2].get<double>(), b[3].get<double>());
    }
    const std::string id = entry.at("image_id").get<std::string>();
    if (!by_id.emplace(id, std::move(boxes)).second) {
      throw SchemaViolationError("pseudo boxes " + path +
                                 ": duplicate image id '" + id + "'");
    }
  }

  std::vector<PseudoLabeledImage> out;
  out.reserve(base.size());
  for (const auto& record : base) {
    const auto it = by_id.find(record.image_id);
    if (it == by_id.end()) {
      throw SchemaViolationError("pseudo boxes " + path +
                                 ": no entry for image '" + record.image_id +
                                 "'");
    }
    PseudoLabeledImage item;
    item.base = record;
    item.pseudo_boxes = it->second;
    out.push_back(std::move(item));
    by_id.erase(it);
  }
  if (!by_id.empty()) {
    throw SchemaViolationError("pseudo boxes " + path + ": entry '" +
                               by_id.begin()->first +
                               "' does not match any dataset image");
  }
  return out;
}

EvalReport evaluate_predictions(const std::vector<AnnotatedImage>& gt,
                                const std::vector<PredictionRecord>& preds) {
  if (gt.empty()) throw ValueError("evaluate: the ground-truth set is empty");
  std::map<std::string, const PredictionRecord*> by_id;
  for (const auto& rec : preds) {
    if (!by_id.emplace(rec.image_id, &rec).second) {
      throw SchemaViolationError("predictions: duplicate image id '" +
                                 rec.image_id + "'");
    }
  }

  std::vector<CountPair> pairs;
  std::vector<DetectionInstance> detections;
  double gt_total = 0.0;
  for (const auto& record : gt) {
    const auto it = by_id.find(record.image_id);
    if (it == by_id.end()) {
      throw SchemaViolationError("predictions: no record for image '" +
                                 record.image_id + "'");
    }
    if (!record.gt_boxes.has_value()) {
      throw SchemaViolationError(
          "evaluate: image '" + record.image_id +
          "' carries no ground-truth boxes; detection metrics need them");
    }
    const PredictionRecord& rec = *it->second;
    pairs.push_back({static_cast<long>(record.dots.size()), rec.count});
    gt_total += static_cast<double>(record.dots.size());
    DetectionInstance inst;
    inst.boxes = rec.boxes;
    inst.scores = rec.scores;
    inst.gt = *record.gt_boxes;
    detections.push_back(std::move(inst));
    by_id.erase(it);
  }
  if (!by_id.empty()) {
    throw SchemaViolationError("predictions: record '" +
                               by_id.begin()->first +
                               "' does not match any ground-truth image");
  }

  EvalReport report;
  report.counting = counting_errors(pairs);
  report.detection = average_precision(detections);
  report.num_images = static_cast<long>(gt.size());
  report.mean_gt_count = gt_total / static_cast<double>(gt.size());
  return report;
}

Image render_prediction(const AnnotatedImage& record,
                        const PredictionRecord& prediction) {
  Image canvas = record.image;
  const double w = static_cast<double>(canvas.width);
  const double h = static_cast<double>(canvas.height);
  auto px = [&](double cx, double cy, double bw, double bh) {
    const long x0 = static_cast<long>(std::lround((cx - bw / 2) * w));
    const long y0 = static_cast<long>(std::lround((cy - bh / 2) * h));
    const long x1 = static_cast<long>(std::lround((cx + bw / 2) * w)) - 1;
    const long y1 = static_cast<long>(std::lround((cy + bh / 2) * h)) - 1;
    return std::array<long, 4>{x0, y0, x1, y1};
  };

  const Rgb pred_color{0, 220, 0};
  const Rgb exemplar_color{40, 90, 255};
  for (const Box& b : prediction.boxes) {
    const auto r = px(b.cx, b.cy, b.w, b.h);
    draw_rect_outline(canvas, r[0], r[1], r[2], r[3], pred_color);
  }
  for (const Box& b : record.exemplars) {
    const auto r = px(b.cx, b.cy, b.w, b.h);
    draw_rect_outline(canvas, r[0], r[1], r[2], r[3], exemplar_color);
  }
  draw_text(canvas, 2, 2, "#" + std::to_string(prediction.count),
            Rgb{255, 255, 255});
  return canvas;
}

std::string resolve_data_root(const std::string& cli_value) {
  if (!cli_value.empty()) return cli_value;
  const char* env = std::getenv("FSCD_DATA_ROOT");
  if (env != nullptr && env[0] != '\0') return env;
  throw ValueError(
      "no dataset location: pass --data or set FSCD_DATA_ROOT");
}

}  // namespace fscd
