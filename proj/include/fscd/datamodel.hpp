#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "fscd/geometry.hpp"
#include "fscd/image.hpp"

namespace fscd {

/// One dataset record. Dots and boxes are stored in normalized image
/// coordinates (x, y in [0,1]); annotation files on disk use pixels.
struct AnnotatedImage {
  std::string image_id;
  Image image;
  std::vector<std::array<double, 2>> dots;  // approximate object centers
  std::vector<Box> exemplars;               // K user-provided boxes
  std::optional<std::vector<Box>> gt_boxes; // val/test (and synthetic) only
};

struct PredictionRecord {
  std::string image_id;
  std::vector<Box> boxes;  // normalized center form
  std::vector<double> scores;
  long count = 0;
};

/// Throws SchemaViolationError naming the record and offending field when an
/// invariant is broken:
///   - every exemplar center must coincide with some dot within 2 pixels
///   - when gt_boxes is present, |gt_boxes| == |dots| and dot i lies inside
///     box i
void validate_annotated_image(const AnnotatedImage& rec);

void validate_prediction_record(const PredictionRecord& rec);

/// Reads `annotations_{split}.json` under `root` plus the images directory.
/// With strict=true every record must carry exactly expected_k exemplars;
/// permissive mode accepts 1..expected_k.
std::vector<AnnotatedImage> load_dataset(const std::string& root,
                                         const std::string& split,
                                         long expected_k = 3,
                                         bool strict = true);

/// Writes images (binary PPM) and the split's annotation JSON under `root`.
void save_dataset(const std::vector<AnnotatedImage>& records,
                  const std::string& root, const std::string& split);

void save_predictions(const std::vector<PredictionRecord>& records,
                      const std::string& path);
std::vector<PredictionRecord> load_predictions(const std::string& path);

}  // namespace fscd
