#include "fscd/datamodel.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fscd/errors.hpp"
#include "fscd/log.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fscd {

namespace {

constexpr double kDotPairingTolerancePx = 2.0;

// Corner-form pixel box [x1,y1,x2,y2] -> normalized center form.
Box box_from_pixel_corners(const json& arr, long img_w, long img_h,
                           const std::string& where) {
  if (!arr.is_array() || arr.size() != 4) {
    throw SchemaViolationError(where + ": box must be [x1,y1,x2,y2]");
  }
  const double x1 = arr[0].get<double>() / static_cast<double>(img_w);
  const double y1 = arr[1].get<double>() / static_cast<double>(img_h);
  const double x2 = arr[2].get<double>() / static_cast<double>(img_w);
  const double y2 = arr[3].get<double>() / static_cast<double>(img_h);
  try {
    return from_corners(x1, y1, x2, y2);
  } catch (const ValueError& e) {
    throw SchemaViolationError(where + ": degenerate box: " + e.what());
  }
}

json box_to_pixel_corners(const Box& b, long img_w, long img_h) {
  const CornerBox c = to_corners(b);
  return json::array({c.x1 * static_cast<double>(img_w),
                      c.y1 * static_cast<double>(img_h),
                      c.x2 * static_cast<double>(img_w),
                      c.y2 * static_cast<double>(img_h)});
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaViolationError(path + ": " + e.what());
  }
}

void write_json_file(const json& doc, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << doc.dump(2) << "\n";
  if (!out) throw Error("write failed for " + path);
}

}  // namespace

void validate_annotated_image(const AnnotatedImage& rec) {
  const std::string who = "record '" + rec.image_id + "'";
  if (rec.image.width <= 0 || rec.image.height <= 0) {
    throw SchemaViolationError(who + ": empty image");
  }
  const double w = static_cast<double>(rec.image.width);
  const double h = static_cast<double>(rec.image.height);

  for (std::size_t k = 0; k < rec.exemplars.size(); ++k) {
    const Box& ex = rec.exemplars[k];
    bool paired = false;
    for (const auto& dot : rec.dots) {
      const double dx = (ex.cx - dot[0]) * w;
      const double dy = (ex.cy - dot[1]) * h;
      if (std::sqrt(dx * dx + dy * dy) <= kDotPairingTolerancePx) {
        paired = true;
        break;
      }
    }
    if (!paired) {
      throw SchemaViolationError(
          who + ": field exemplars[" + std::to_string(k) +
          "]: center does not coincide with any dot (2 px tolerance)");
    }
  }

  if (rec.gt_boxes.has_value()) {
    if (rec.gt_boxes->size() != rec.dots.size()) {
      throw SchemaViolationError(
          who + ": field gt_boxes: size " + std::to_string(rec.gt_boxes->size()) +
          " does not match " + std::to_string(rec.dots.size()) + " dots");
    }
    for (std::size_t i = 0; i < rec.dots.size(); ++i) {
      const Box& b = (*rec.gt_boxes)[i];
      const auto& d = rec.dots[i];
      if (std::abs(d[0] - b.cx) > b.w / 2 || std::abs(d[1] - b.cy) > b.h / 2) {
        throw SchemaViolationError(who + ": field dots[" + std::to_string(i) +
                                   "]: dot lies outside its paired gt box");
      }
    }
  }
}

void validate_prediction_record(const PredictionRecord& rec) {
  const std::string who = "prediction '" + rec.image_id + "'";
  if (rec.boxes.size() != rec.scores.size()) {
    throw SchemaViolationError(who + ": field scores: size mismatch with boxes");
  }
  if (rec.count != static_cast<long>(rec.boxes.size())) {
    throw SchemaViolationError(who + ": field count: " +
                               std::to_string(rec.count) + " != |boxes| = " +
                               std::to_string(rec.boxes.size()));
  }
  for (double s : rec.scores) {
    if (!(s > 0.0 && s < 1.0)) {
      throw SchemaViolationError(who + ": field scores: value outside (0,1)");
    }
  }
}

std::vector<AnnotatedImage> load_dataset(const std::string& root,
                                         const std::string& split,
                                         long expected_k, bool strict) {
  if (split != "train" && split != "val" && split != "test") {
    throw ValueError("load_dataset: split must be train|val|test, got '" +
                     split + "'");
  }
  const fs::path rootp(root);
  const fs::path ann_path = rootp / ("annotations_" + split + ".json");
  if (!fs::exists(ann_path)) {
    throw MissingFileError("load_dataset: missing " + ann_path.string());
  }
  const json doc = load_json_file(ann_path.string());
  if (!doc.is_object()) {
    throw SchemaViolationError(ann_path.string() +
                               ": top level must map image_id -> record");
  }
  std::vector<AnnotatedImage> out;
  if (doc.empty()) {
    warn("load_dataset: " + ann_path.string() + " contains no records");
    return out;
  }
  out.reserve(doc.size());
  for (const auto& [image_id, entry] : doc.items()) {
    const std::string who = "record '" + image_id + "'";
    if (!entry.is_object() || !entry.contains("dots") ||
        !entry.contains("exemplars")) {
      throw SchemaViolationError(who + ": needs 'dots' and 'exemplars'");
    }
    AnnotatedImage rec;
    rec.image_id = image_id;
    const fs::path img_path = rootp / "images" / (image_id + ".ppm");
    rec.image = load_ppm(img_path.string());
    const double w = static_cast<double>(rec.image.width);
    const double h = static_cast<double>(rec.image.height);

    for (const auto& d : entry["dots"]) {
      if (!d.is_array() || d.size() != 2) {
        throw SchemaViolationError(who + ": field dots: point must be [x,y]");
      }
      rec.dots.push_back({d[0].get<double>() / w, d[1].get<double>() / h});
    }
    for (std::size_t k = 0; k < entry["exemplars"].size(); ++k) {
      rec.exemplars.push_back(
          box_from_pixel_corners(entry["exemplars"][k], rec.image.width,
                                 rec.image.height,
                                 who + ": field exemplars[" + std::to_string(k) + "]"));
    }
    if (entry.contains("gt_boxes")) {
      std::vector<Box> gt;
      for (std::size_t k = 0; k < entry["gt_boxes"].size(); ++k) {
        gt.push_back(box_from_pixel_corners(
            entry["gt_boxes"][k], rec.image.width, rec.image.height,
            who + ": field gt_boxes[" + std::to_string(k) + "]"));
      }
      rec.gt_boxes = std::move(gt);
    }

    const long k_found = static_cast<long>(rec.exemplars.size());
    if (strict ? (k_found != expected_k) : (k_found < 1 || k_found > expected_k)) {
      throw SchemaViolationError(
          who + ": field exemplars: expected " +
          (strict ? std::to_string(expected_k)
                  : "1.." + std::to_string(expected_k)) +
          " exemplar boxes, found " + std::to_string(k_found));
    }
    validate_annotated_image(rec);
    out.push_back(std::move(rec));
  }
  return out;
}

void save_dataset(const std::vector<AnnotatedImage>& records,
                  const std::string& root, const std::string& split) {
  const fs::path rootp(root);
  fs::create_directories(rootp / "images");
  json doc = json::object();
  for (const auto& rec : records) {
    const double w = static_cast<double>(rec.image.width);
    const double h = static_cast<double>(rec.image.height);
    json entry;
    entry["dots"] = json::array();
    for (const auto& d : rec.dots) {
      entry["dots"].push_back(json::array({d[0] * w, d[1] * h}));
    }
    entry["exemplars"] = json::array();
    for (const Box& b : rec.exemplars) {
      entry["exemplars"].push_back(
          box_to_pixel_corners(b, rec.image.width, rec.image.height));
    }
    if (rec.gt_boxes.has_value()) {
      entry["gt_boxes"] = json::array();
      for (const Box& b : *rec.gt_boxes) {
        entry["gt_boxes"].push_back(
            box_to_pixel_corners(b, rec.image.width, rec.image.height));
      }
    }
    doc[rec.image_id] = std::move(entry);
    save_ppm(rec.image, (rootp / "images" / (rec.image_id + ".ppm")).string());
  }
  write_json_file(doc, (rootp / ("annotations_" + split + ".json")).string());
}

void save_predictions(const std::vector<PredictionRecord>& records,
                      const std::string& path) {
  json doc = json::array();
  for (const auto& rec : records) {
    validate_prediction_record(rec);
    json entry;
    entry["image_id"] = rec.image_id;
    entry["count"] = rec.count;
    entry["boxes"] = json::array();
    for (const Box& b : rec.boxes) {
      entry["boxes"].push_back(json::array({b.cx, b.cy, b.w, b.h}));
    }
    entry["scores"] = rec.scores;
    doc.push_back(std::move(entry));
  }
  write_json_file(doc, path);
}

std::vector<PredictionRecord> load_predictions(const std::string& path) {
  const json doc = load_json_file(path);
  if (!doc.is_array()) {
    throw SchemaViolationError(path + ": top level must be an array");
  }
  std::vector<PredictionRecord> out;
  out.reserve(doc.size());
  for (const auto& entry : doc) {
    PredictionRecord rec;
    rec.image_id = entry.at("image_id").get<std::string>();
    rec.count = entry.at("count").get<long>();
    for (const auto& b : entry.at("boxes")) {
      if (!b.is_array() || b.size() != 4) {
        throw SchemaViolationError(path + ": box must be [cx,cy,w,h]");
      }
      rec.boxes.emplace_back(b[0].get<double>(), b[1].get<double>(),
                             b[2].get<double>(), b[3].get<double>());
    }
    rec.scores = entry.at("scores").get<std::vector<double>>();
    validate_prediction_record(rec);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace fscd
