#pragma once

#include <array>
#include <string>
#include <vector>

#include "fscd/datamodel.hpp"
#include "fscd/nn/tensor.hpp"

namespace fscd {

/// Deterministic generator of crowded multi-class shape scenes. The first
/// class placed in each image is the target class: its instance centers are
/// the dots, K of its boxes become the exemplars, and all of its boxes are
/// recorded as gt_boxes. Other classes act as distractors.
struct SyntheticSceneSpec {
  long num_images = 16;
  std::array<long, 2> classes_per_image = {2, 3};    // inclusive range
  std::array<long, 2> instances_per_class = {8, 16}; // inclusive range
  std::vector<std::string> shape_vocabulary = {"rect", "ellipse", "triangle"};
  std::array<double, 2> size_jitter = {0.8, 1.25};   // relative factor range
  std::uint64_t seed = 0;
  long canvas_width = 96;
  long canvas_height = 96;
  long exemplars_k = 3;
  // Base shape diameter as a fraction of the shorter canvas side.
  double base_size_frac = 0.12;
  // Prefix for generated image ids, e.g. "train" -> "train_000007".
  std::string id_prefix = "img";
};

/// Throws ValueError when ranges are empty/invalid or the vocabulary names an
/// unknown shape kind.
void validate_spec(const SyntheticSceneSpec& spec);

/// Pure function of the spec (seed included). Throws InfeasibleSpecError when
/// instances cannot be placed without exceeding the retry budget.
std::vector<AnnotatedImage> generate_synthetic(const SyntheticSceneSpec& spec);

}  // namespace fscd
