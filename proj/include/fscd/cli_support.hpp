#pragma once

#include <string>
#include <vector>

#include "fscd/datamodel.hpp"
#include "fscd/image.hpp"
#include "fscd/metrics.hpp"
#include "fscd/pipeline.hpp"

namespace fscd {

/// Writes one {image_id, boxes} entry per pseudo-labeled image.
void save_pseudo_boxes(const std::vector<PseudoLabeledImage>& items,
                       const std::string& path);

/// Re-attaches stored pseudo boxes to their base records by image id.
/// Every stored id must exist in `base` and every base record must be
/// covered; anything else is a SchemaViolationError.
std::vector<PseudoLabeledImage> load_pseudo_boxes(
    const std::string& path, const std::vector<AnnotatedImage>& base);

/// Pairs predictions with ground truth by image id (every ground-truth image
/// needs exactly one prediction record; ground-truth boxes must be present)
/// and assembles the counting + detection report.
EvalReport evaluate_predictions(const std::vector<AnnotatedImage>& gt,
                                const std::vector<PredictionRecord>& preds);

/// Copy of the image with predicted boxes, the exemplar boxes, and the
/// predicted count drawn on top.
Image render_prediction(const AnnotatedImage& record,
                        const PredictionRecord& prediction);

/// Resolves the dataset root: the explicit CLI value when nonempty, else the
/// FSCD_DATA_ROOT environment variable. ValueError when neither names a path.
std::string resolve_data_root(const std::string& cli_value);

}  // namespace fscd
