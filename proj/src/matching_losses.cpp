#include "fscd/matching_losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fscd/errors.hpp"

namespace fscd {

namespace {

using nn::Tensor;
using nn::Var;

constexpr double kInf = std::numeric_limits<double>::infinity();

Var vmax(const Var& a, const Var& b) {
  return nn::mul_scalar(nn::add(nn::add(a, b), nn::abs_op(nn::sub(a, b))),
                        0.5);
}

Var vmin(const Var& a, const Var& b) {
  return nn::mul_scalar(nn::sub(nn::add(a, b), nn::abs_op(nn::sub(a, b))),
                        0.5);
}

Var zero_scalar() { return Var::constant(Tensor::scalar(0.0)); }

/// Targets for the matched rows as a [P, 4] constant.
Tensor gather_target_rows(const TargetSet& targets,
                          const std::vector<std::pair<long, long>>& pairs) {
  Tensor rows({static_cast<long>(pairs.size()), 4});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Box& b = targets.boxes[static_cast<std::size_t>(pairs[i].second)];
    rows[static_cast<long>(i) * 4 + 0] = b.cx;
    rows[static_cast<long>(i) * 4 + 1] = b.cy;
    rows[static_cast<long>(i) * 4 + 2] = b.w;
    rows[static_cast<long>(i) * 4 + 3] = b.h;
  }
  return rows;
}

void check_sigma_positive(const Var& sigma, const char* who) {
  for (long i = 0; i < sigma.numel(); ++i) {
    if (!(sigma.value()[i] > 0.0)) {
      throw ValueError(std::string(who) +
                       ": sigma must be positive componentwise");
    }
  }
}

void check_rows4(const Var& boxes, const Tensor& target, const char* who) {
  if (boxes.shape().size() != 2 || boxes.shape()[1] != 4) {
    throw DimensionError(std::string(who) + ": boxes must be [P, 4]");
  }
  if (target.shape() != boxes.shape()) {
    throw DimensionError(std::string(who) +
                         ": box and target shapes must agree");
  }
}

}  // namespace

void validate_weights(const LossWeights& w) {
  const double vals[] = {w.lambda1, w.lambda2, w.lambda3, w.lambda4};
  for (double v : vals) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ValueError("loss weights must be finite and non-negative");
    }
  }
}

MatchResult hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2) {
    throw DimensionError("hungarian_match: cost must be a 2-D matrix");
  }
  const long n = cost.dim(0);  // predictions (columns of the internal view)
  const long t = cost.dim(1);  // targets (rows of the internal view)
  for (long i = 0; i < cost.numel(); ++i) {
    if (!std::isfinite(cost[i])) {
      throw ValueError("hungarian_match: cost matrix has non-finite entries");
    }
  }
  if (n < t) {
    throw DimensionError(
        "hungarian_match: need at least as many predictions (" +
        std::to_string(n) + ") as targets (" + std::to_string(t) + ")");
  }
  MatchResult res;
  if (t == 0) {
    for (long j = 0; j < n; ++j) res.unmatched_predictions.push_back(j);
    return res;
  }

  // Shortest augmenting path with dual potentials, rows = targets (1-based).
  const long rows = t, cols = n;
  auto entry = [&](long i, long j) { return cost[(j - 1) * t + (i - 1)]; };
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<long> assigned(cols + 1, 0), way(cols + 1, 0);
  for (long i = 1; i <= rows; ++i) {
    assigned[0] = i;
    long j0 = 0;
    std::vector<double> min_reduced(cols + 1, kInf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const long i0 = assigned[j0];
      long j1 = 0;
      double delta = kInf;
      for (long j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = entry(i0, j) - u[i0] - v[j];
        if (cur < min_reduced[j]) {
          min_reduced[j] = cur;
          way[j] = j0;
        }
        if (min_reduced[j] < delta) {
          delta = min_reduced[j];
          j1 = j;
        }
      }
      for (long j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[assigned[j]] += delta;
          v[j] -= delta;
        } else {
          min_reduced[j] -= delta;
        }
      }
      j0 = j1;
    } while (assigned[j0] != 0);
    do {
      const long j1 = way[j0];
      assigned[j0] = assigned[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  for (long j = 1; j <= cols; ++j) {
    if (assigned[j] != 0) {
      res.pairs.emplace_back(j - 1, assigned[j] - 1);
      res.total_cost += entry(assigned[j], j);
    } else {
      res.unmatched_predictions.push_back(j - 1);
    }
  }
  return res;
}

Tensor matching_cost(const DetectorOutput& out, const QueryPoints& queries,
                     const TargetSet& targets, const LossWeights& weights,
                     bool focal_shaped_cls) {
  validate_weights(weights);
  const long m = out.m();
  const long t = static_cast<long>(targets.boxes.size());
  const std::vector<Box> decoded = decode_boxes(out, queries);
  Tensor cost({m, t});
  constexpr double alpha = 0.25, gamma = 2.0;
  for (long i = 0; i < m; ++i) {
    const double s = out.scores.value()[i];
    double cls;
    if (focal_shaped_cls) {
      const double pos = alpha * std::pow(1.0 - s, gamma) * (-std::log(s));
      const double neg = (1.0 - alpha) * std::pow(s, gamma) *
                         (-std::log(1.0 - s));
      cls = pos - neg;
    } else {
      cls = -s;
    }
    for (long j = 0; j < t; ++j) {
      const Box& g = targets.boxes[static_cast<std::size_t>(j)];
      const double l1 = std::abs(decoded[i].cx - g.cx) +
                        std::abs(decoded[i].cy - g.cy) +
                        std::abs(decoded[i].w - g.w) +
                        std::abs(decoded[i].h - g.h);
      cost[i * t + j] = weights.lambda1 * cls + weights.lambda2 * l1 +
                        weights.lambda3 * (1.0 - giou(decoded[i], g));
    }
  }
  return cost;
}

Var focal_loss(const Var& scores, const Tensor& s_star, double alpha,
               double gamma) {
  if (scores.shape() != s_star.shape()) {
    throw DimensionError("focal_loss: score and target shapes must agree");
  }
  const long m = scores.numel();
  if (m == 0) return zero_scalar();
  Tensor mask = s_star;
  Tensor inv_mask(s_star.shape());
  Tensor alpha_t(s_star.shape());
  for (long i = 0; i < m; ++i) {
    const double t = s_star[i];
    if (t != 0.0 && t != 1.0) {
      throw ValueError("focal_loss: targets must be 0 or 1");
    }
    const double s = scores.value()[i];
    if (!(s > 0.0 && s < 1.0)) {
      throw ValueError("focal_loss: scores must lie strictly in (0, 1)");
    }
    inv_mask[i] = 1.0 - t;
    alpha_t[i] = t * alpha + (1.0 - t) * (1.0 - alpha);
  }
  // p_t = s on positives, 1 - s on negatives.
  const Var ones = Var::constant(Tensor::full(scores.shape(), 1.0));
  Var p_t = nn::add(nn::mul(scores, Var::constant(mask)),
                    nn::mul(nn::sub(ones, scores), Var::constant(inv_mask)));
  Var weight = nn::pow_scalar(nn::sub(ones, p_t), gamma);
  Var terms = nn::mul(nn::mul(Var::constant(alpha_t), weight), nn::log_op(p_t));
  return nn::mul_scalar(nn::mean_all(terms), -1.0);
}

Var l1_box_loss(const Var& boxes, const Tensor& target_boxes) {
  check_rows4(boxes, target_boxes, "l1_box_loss");
  if (boxes.shape()[0] == 0) return zero_scalar();
  const Var diff = nn::abs_op(nn::sub(boxes, Var::constant(target_boxes)));
  return nn::mean_all(nn::sum_lastdim(diff));
}

Var giou_rows(const Var& boxes, const Tensor& target_boxes) {
  check_rows4(boxes, target_boxes, "giou_rows");
  const long p = boxes.shape()[0];
  const Var cx = nn::slice_cols(boxes, 0, 1);
  const Var cy = nn::slice_cols(boxes, 1, 2);
  const Var w = nn::slice_cols(boxes, 2, 3);
  const Var h = nn::slice_cols(boxes, 3, 4);
  const Var x1 = nn::sub(cx, nn::mul_scalar(w, 0.5));
  const Var x2 = nn::add(cx, nn::mul_scalar(w, 0.5));
  const Var y1 = nn::sub(cy, nn::mul_scalar(h, 0.5));
  const Var y2 = nn::add(cy, nn::mul_scalar(h, 0.5));

  Tensor tx1({p, 1}), tx2({p, 1}), ty1({p, 1}), ty2({p, 1}), tarea({p, 1});
  for (long i = 0; i < p; ++i) {
    const double gcx = target_boxes[i * 4 + 0];
    const double gcy = target_boxes[i * 4 + 1];
    const double gw = target_boxes[i * 4 + 2];
    const double gh = target_boxes[i * 4 + 3];
    if (gw < 0.0 || gh < 0.0) {
      throw ValueError("giou_rows: target boxes need non-negative sizes");
    }
    tx1[i] = gcx - gw / 2;
    tx2[i] = gcx + gw / 2;
    ty1[i] = gcy - gh / 2;
    ty2[i] = gcy + gh / 2;
    tarea[i] = gw * gh;
  }
  const Var gx1 = Var::constant(tx1), gx2 = Var::constant(tx2);
  const Var gy1 = Var::constant(ty1), gy2 = Var::constant(ty2);

  const Var iw = nn::relu(nn::sub(vmin(x2, gx2), vmax(x1, gx1)));
  const Var ih = nn::relu(nn::sub(vmin(y2, gy2), vmax(y1, gy1)));
  const Var inter = nn::mul(iw, ih);
  const Var uni = nn::sub(nn::add(nn::mul(w, h), Var::constant(tarea)), inter);
  const Var iou = nn::div(inter, uni);

  const Var hw = nn::sub(vmax(x2, gx2), vmin(x1, gx1));
  const Var hh = nn::sub(vmax(y2, gy2), vmin(y1, gy1));
  const Var hull = nn::mul(hw, hh);
  return nn::sub(iou, nn::div(nn::sub(hull, uni), hull));
}

Var giou_box_loss(const Var& boxes, const Tensor& target_boxes) {
  check_rows4(boxes, target_boxes, "giou_box_loss");
  if (boxes.shape()[0] == 0) return zero_scalar();
  const Var g = giou_rows(boxes, target_boxes);
  return nn::add_scalar(nn::mul_scalar(nn::mean_all(g), -1.0), 1.0);
}

Var laplace_uncertainty_loss(const Var& mu, const Tensor& mu_tilde,
                             const Var& sigma) {
  check_rows4(mu, mu_tilde, "laplace_uncertainty_loss");
  if (sigma.shape() != mu.shape()) {
    throw DimensionError("laplace_uncertainty_loss: sigma shape mismatch");
  }
  if (mu.shape()[0] == 0) return zero_scalar();
  check_sigma_positive(sigma, "laplace_uncertainty_loss");
  const Var resid = nn::abs_op(nn::sub(mu, Var::constant(mu_tilde)));
  const Var terms = nn::add(nn::div(resid, sigma), nn::log_op(sigma));
  return nn::mul_scalar(nn::mean_all(nn::sum_lastdim(terms)), 0.5);
}

Var gaussian_uncertainty_loss(const Var& mu, const Tensor& mu_tilde,
                              const Var& sigma) {
  check_rows4(mu, mu_tilde, "gaussian_uncertainty_loss");
  if (sigma.shape() != mu.shape()) {
    throw DimensionError("gaussian_uncertainty_loss: sigma shape mismatch");
  }
  if (mu.shape()[0] == 0) return zero_scalar();
  check_sigma_positive(sigma, "gaussian_uncertainty_loss");
  const Var var = nn::square(sigma);
  const Var resid2 = nn::square(nn::sub(mu, Var::constant(mu_tilde)));
  const Var terms = nn::add(nn::div(resid2, var), nn::log_op(var));
  return nn::mul_scalar(nn::mean_all(nn::sum_lastdim(terms)), 0.5);
}

LossReport combined_loss(const DetectorOutput& out, const QueryPoints& queries,
                         const TargetSet& targets, const LossWeights& weights,
                         LossMode mode, const std::string& uncertainty_kind) {
  validate_weights(weights);
  if (uncertainty_kind != "laplace" && uncertainty_kind != "gaussian" &&
      uncertainty_kind != "none") {
    throw ValueError(
        "combined_loss: uncertainty_kind must be laplace|gaussian|none");
  }
  const long m = out.m();
  const long t = static_cast<long>(targets.boxes.size());

  LossReport report;
  if (mode == LossMode::kStage1) {
    if (m != t) {
      throw DimensionError(
          "combined_loss(stage1): query count (" + std::to_string(m) +
          ") must equal target count (" + std::to_string(t) +
          ") for the fixed one-to-one pairing");
    }
    for (long k = 0; k < m; ++k) report.match.pairs.emplace_back(k, k);
  } else {
    if (t > m) {
      throw DimensionError("combined_loss(stage2): more targets (" +
                           std::to_string(t) + ") than queries (" +
                           std::to_string(m) +
                           "); increase the query count");
    }
    if (t > 0) {
      report.match =
          hungarian_match(matching_cost(out, queries, targets, weights));
    } else {
      for (long j = 0; j < m; ++j) {
        report.match.unmatched_predictions.push_back(j);
      }
    }
  }
  const auto& pairs = report.match.pairs;

  // Score targets: 1 at matched queries, 0 elsewhere.
  Tensor s_star = Tensor::zeros({m, 1});
  for (const auto& pr : pairs) s_star[pr.first] = 1.0;
  Var focal = m > 0 ? focal_loss(out.scores, s_star) : zero_scalar();

  Var l1 = zero_scalar();
  Var giou_term = zero_scalar();
  Var uncertainty = zero_scalar();
  if (!pairs.empty()) {
    const Var decoded = decode_boxes_var(out, queries);
    std::vector<long> pred_idx;
    pred_idx.reserve(pairs.size());
    for (const auto& pr : pairs) pred_idx.push_back(pr.first);
    const Var matched = nn::gather_rows(decoded, pred_idx);
    const Tensor target_rows = gather_target_rows(targets, pairs);
    l1 = l1_box_loss(matched, target_rows);
    giou_term = giou_box_loss(matched, target_rows);
    if (mode == LossMode::kStage2 && uncertainty_kind != "none" &&
        weights.lambda4 > 0.0) {
      const Var sigma = nn::exp_op(nn::gather_rows(out.log_sigma, pred_idx));
      uncertainty = uncertainty_kind == "laplace"
                        ? laplace_uncertainty_loss(matched, target_rows, sigma)
                        : gaussian_uncertainty_loss(matched, target_rows,
                                                    sigma);
    }
  }

  Var total = nn::add(
      nn::add(nn::mul_scalar(focal, weights.lambda1),
              nn::mul_scalar(l1, weights.lambda2)),
      nn::mul_scalar(giou_term, weights.lambda3));
  if (mode == LossMode::kStage2 && uncertainty_kind != "none") {
    total = nn::add(total, nn::mul_scalar(uncertainty, weights.lambda4));
  }

  report.total = total;
  report.total_value = total.value()[0];
  report.focal = focal.value()[0];
  report.l1 = l1.value()[0];
  report.giou = giou_term.value()[0];
  report.uncertainty = uncertainty.value()[0];
  return report;
}

}  // namespace fscd
