#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fscd/detector.hpp"
#include "fscd/geometry.hpp"
#include "fscd/nn/ops.hpp"

namespace fscd {

/// Coefficients for the training objective: lambda1 scales the score term,
/// lambda2 the L1 box term, lambda3 the overlap term, lambda4 the
/// uncertainty term.
struct LossWeights {
  double lambda1 = 2.0;
  double lambda2 = 5.0;
  double lambda3 = 2.0;
  double lambda4 = 2.0;
};

void validate_weights(const LossWeights& w);

/// Assignment of targets to predictions. Every target is paired with exactly
/// one prediction; leftover predictions are listed as unmatched.
struct MatchResult {
  std::vector<std::pair<long, long>> pairs;  // (prediction, target)
  std::vector<long> unmatched_predictions;
  double total_cost = 0.0;
};

/// Ground-truth (or pseudo ground-truth) boxes for one image. All boxes
/// belong to the single foreground class, so per-query labels are implied by
/// the assignment.
struct TargetSet {
  std::vector<Box> boxes;
};

/// Minimum-cost injective assignment of the T columns (targets) to the N
/// rows (predictions), N >= T. O(n^3) shortest-augmenting-path scheme.
MatchResult hungarian_match(const nn::Tensor& cost);

/// cost[m, t] = lambda1 * cls_cost(s_m) + lambda2 * |decoded_m - box_t|_1
///            + lambda3 * (1 - giou(decoded_m, box_t)).
/// cls_cost is -s_m by default; `focal_shaped_cls` switches to the
/// focal-weighted positive-minus-negative form.
nn::Tensor matching_cost(const DetectorOutput& out, const QueryPoints& queries,
                         const TargetSet& targets, const LossWeights& weights,
                         bool focal_shaped_cls = false);

/// Mean over queries of -alpha_t * (1 - p_t)^gamma * log(p_t), where
/// p_t = s on positive targets and 1 - s on negatives. `s_star` holds the
/// 0/1 target per query.
nn::Var focal_loss(const nn::Var& scores, const nn::Tensor& s_star,
                   double alpha = 0.25, double gamma = 2.0);

/// Mean over rows of the 4-coordinate absolute difference sum.
nn::Var l1_box_loss(const nn::Var& boxes, const nn::Tensor& target_boxes);

/// Generalized overlap per row (differentiable twin of geometry giou).
/// Rows are (cx, cy, w, h); returns [P, 1].
nn::Var giou_rows(const nn::Var& boxes, const nn::Tensor& target_boxes);

/// Mean over rows of (1 - giou).
nn::Var giou_box_loss(const nn::Var& boxes, const nn::Tensor& target_boxes);

/// Mean over rows of (1/2) * sum_o ( |mu_o - mu_tilde_o| / sigma_o
/// + log sigma_o ). Requires sigma > 0 elementwise.
nn::Var laplace_uncertainty_loss(const nn::Var& mu, const nn::Tensor& mu_tilde,
                                 const nn::Var& sigma);

/// Mean over rows of (1/2) * sum_o ( (mu_o - mu_tilde_o)^2 / sigma_o^2
/// + log sigma_o^2 ). Requires sigma > 0 elementwise.
nn::Var gaussian_uncertainty_loss(const nn::Var& mu,
                                  const nn::Tensor& mu_tilde,
                                  const nn::Var& sigma);

enum class LossMode { kStage1, kStage2 };

/// Scalar objective plus a per-term breakdown (plain doubles) and the
/// assignment that produced it.
struct LossReport {
  nn::Var total;
  double total_value = 0.0;
  double focal = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double uncertainty = 0.0;
  MatchResult match;
};

/// Stage 1 pairs query k with target box k directly (no assignment step) and
/// omits the uncertainty term. Stage 2 matches via hungarian_match on
/// matching_cost, supervises matched queries with box + uncertainty terms,
/// and treats unmatched queries as background (score target 0).
/// `uncertainty_kind` is "laplace", "gaussian", or "none".
LossReport combined_loss(const DetectorOutput& out, const QueryPoints& queries,
                         const TargetSet& targets, const LossWeights& weights,
                         LossMode mode,
                         const std::string& uncertainty_kind = "laplace");

}  // namespace fscd
