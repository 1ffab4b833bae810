#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "fscd/errors.hpp"
#include "fscd/matching_losses.hpp"
#include "support/gradcheck.hpp"
#include "support/test_util.hpp"

using namespace fscd;
using nn::Tensor;
using nn::Var;

namespace {

/// Exhaustive minimum over all injective target->prediction assignments.
double brute_force_total(const Tensor& cost) {
  const long n = cost.dim(0), t = cost.dim(1);
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(long, double)> rec = [&](long j, double acc) {
    if (j == t) {
      best = std::min(best, acc);
      return;
    }
    for (long i = 0; i < n; ++i) {
      if (used[static_cast<std::size_t>(i)]) continue;
      used[static_cast<std::size_t>(i)] = 1;
      rec(j + 1, acc + cost[i * t + j]);
      used[static_cast<std::size_t>(i)] = 0;
    }
  };
  rec(0, 0.0);
  return best;
}

DetectorOutput make_output(const std::vector<double>& scores,
                           const std::vector<double>& box_params,
                           const std::vector<double>& log_sigma = {}) {
  const long m = static_cast<long>(scores.size());
  DetectorOutput out;
  Tensor s({m, 1});
  for (long i = 0; i < m; ++i) s[i] = scores[static_cast<std::size_t>(i)];
  out.scores = Var::constant(s);
  out.box_params = Var::constant(Tensor({m, 4}, box_params));
  out.log_sigma = Var::constant(
      log_sigma.empty() ? Tensor::zeros({m, 4}) : Tensor({m, 4}, log_sigma));
  return out;
}

}  // namespace

TEST_CASE("assignment: spec'd small matrices") {
  const auto one = hungarian_match(Tensor({1, 1}, {7.0}));
  REQUIRE(one.pairs.size() == 1);
  CHECK(one.pairs[0] == std::pair<long, long>{0, 0});
  CHECK(one.total_cost == doctest::Approx(7.0));
  CHECK(one.unmatched_predictions.empty());

  const auto two = hungarian_match(Tensor({2, 2}, {1, 2, 3, 1}));
  CHECK(two.total_cost == doctest::Approx(2.0));
  REQUIRE(two.pairs.size() == 2);
  CHECK(two.pairs[0] == std::pair<long, long>{0, 0});
  CHECK(two.pairs[1] == std::pair<long, long>{1, 1});

  const auto three =
      hungarian_match(Tensor({3, 3}, {4, 1, 3, 2, 0, 5, 3, 2, 2}));
  CHECK(three.total_cost == doctest::Approx(5.0));
  REQUIRE(three.pairs.size() == 3);
  CHECK(three.pairs[0] == std::pair<long, long>{0, 1});
  CHECK(three.pairs[1] == std::pair<long, long>{1, 0});
  CHECK(three.pairs[2] == std::pair<long, long>{2, 2});
}

TEST_CASE("assignment: rectangular instances leave predictions unmatched") {
  // 4 predictions, 2 targets; optimum picks rows 1 and 3.
  const Tensor cost({4, 2}, {9, 9,   //
                             0, 9,   //
                             9, 9,   //
                             9, 0});
  const auto res = hungarian_match(cost);
  REQUIRE(res.pairs.size() == 2);
  CHECK(res.pairs[0] == std::pair<long, long>{1, 0});
  CHECK(res.pairs[1] == std::pair<long, long>{3, 1});
  CHECK(res.total_cost == doctest::Approx(0.0));
  CHECK(res.unmatched_predictions == std::vector<long>{0, 2});
}

TEST_CASE("assignment: zero targets, errors") {
  const auto empty = hungarian_match(Tensor({3, 0}));
  CHECK(empty.pairs.empty());
  CHECK(empty.unmatched_predictions == std::vector<long>{0, 1, 2});

  CHECK_THROWS_AS(hungarian_match(Tensor({1, 2}, {1.0, 2.0})),
                  DimensionError);  // more targets than predictions
  Tensor bad({2, 2}, {1.0, std::numeric_limits<double>::quiet_NaN(), 0.0, 1.0});
  CHECK_THROWS_AS(hungarian_match(bad), ValueError);
  Tensor inf_cost({1, 1}, {std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(hungarian_match(inf_cost), ValueError);
}

TEST_CASE("assignment equals exhaustive search on random instances") {
  auto rng = testutil::make_rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const long t = 1 + static_cast<long>(rng() % 6);
    const long n = t + static_cast<long>(rng() % (11 - t));
    Tensor cost({n, t});
    for (long i = 0; i < cost.numel(); ++i) {
      cost[i] = testutil::urand(rng, -5.0, 5.0);
    }
    const auto res = hungarian_match(cost);
    REQUIRE(res.pairs.size() == static_cast<std::size_t>(t));
    // Valid injection with a self-consistent total.
    std::vector<char> pred_used(static_cast<std::size_t>(n), 0);
    std::vector<char> tgt_used(static_cast<std::size_t>(t), 0);
    double sum = 0.0;
    for (const auto& [pi, ti] : res.pairs) {
      REQUIRE(pi >= 0);
      REQUIRE(pi < n);
      REQUIRE(ti >= 0);
      REQUIRE(ti < t);
      CHECK(!pred_used[static_cast<std::size_t>(pi)]);
      CHECK(!tgt_used[static_cast<std::size_t>(ti)]);
      pred_used[static_cast<std::size_t>(pi)] = 1;
      tgt_used[static_cast<std::size_t>(ti)] = 1;
      sum += cost[pi * t + ti];
    }
    CHECK(sum == doctest::Approx(res.total_cost).epsilon(1e-9));
    CHECK(res.total_cost ==
          doctest::Approx(brute_force_total(cost)).epsilon(1e-9));
    CHECK(res.pairs.size() + res.unmatched_predictions.size() ==
          static_cast<std::size_t>(n));
  }
}

TEST_CASE("matching cost: exact prediction with s=1 costs -lambda1") {
  const QueryPoints q = make_query_points({{0.5, 0.5}}, "fixed-grid");
  const auto out = make_output({1.0}, {0.0, 0.0, 0.2, 0.3});
  TargetSet targets{{Box(0.5, 0.5, 0.2, 0.3)}};
  LossWeights w;
  const Tensor cost = matching_cost(out, q, targets, w);
  CHECK(cost.dim(0) == 1);
  CHECK(cost.dim(1) == 1);
  CHECK(cost[0] == doctest::Approx(-w.lambda1).epsilon(1e-12));
}

TEST_CASE("matching cost: hand-substituted value 2") {
  // s = 0.5; L1 distance 0.4; overlap 0.5; weights (2, 5, 2).
  const QueryPoints q = make_query_points({{0.5, 0.5}}, "fixed-grid");
  const auto out = make_output({0.5}, {0.0, 0.0, 1.2, 1.2});
  TargetSet targets{{Box(0.9, 0.5, 1.2, 1.2)}};
  const Tensor cost = matching_cost(out, q, targets, LossWeights{});
  CHECK(cost[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("matching cost: identical predictions give identical rows") {
  const QueryPoints q =
      make_query_points({{0.4, 0.4}, {0.4, 0.4}, {0.8, 0.2}}, "fixed-grid");
  const auto out = make_output(
      {0.7, 0.7, 0.2},
      {0.05, 0.0, 0.3, 0.3, 0.05, 0.0, 0.3, 0.3, 0.0, 0.0, 0.1, 0.1});
  TargetSet targets{{Box(0.45, 0.4, 0.3, 0.3), Box(0.8, 0.2, 0.1, 0.1)}};
  const Tensor cost = matching_cost(out, q, targets, LossWeights{});
  CHECK(cost[0 * 2 + 0] == doctest::Approx(cost[1 * 2 + 0]).epsilon(1e-15));
  CHECK(cost[0 * 2 + 1] == doctest::Approx(cost[1 * 2 + 1]).epsilon(1e-15));
  // The focal-shaped variant also stays row-consistent.
  const Tensor fcost = matching_cost(out, q, targets, LossWeights{}, true);
  CHECK(fcost[0 * 2 + 0] == doctest::Approx(fcost[1 * 2 + 0]).epsilon(1e-15));
}

TEST_CASE("focal loss: hand values and limits") {
  // Perfect positive prediction: loss tends to zero.
  Var near_one = Var::constant(Tensor({1, 1}, {0.999999}));
  const double tiny =
      focal_loss(near_one, Tensor({1, 1}, {1.0})).value()[0];
  CHECK(tiny >= 0.0);
  CHECK(tiny < 1e-12);

  // s = 0.5 positive, alpha 0.25, gamma 2: 0.25 * 0.25 * ln 2.
  Var half = Var::constant(Tensor({1, 1}, {0.5}));
  CHECK(focal_loss(half, Tensor({1, 1}, {1.0})).value()[0] ==
        doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));

  // Mean over queries: one positive, one negative, both s = 0.5.
  Var pair = Var::constant(Tensor({2, 1}, {0.5, 0.5}));
  const double expected_pos = 0.25 * 0.25 * std::log(2.0);
  const double expected_neg = 0.75 * 0.25 * std::log(2.0);
  CHECK(focal_loss(pair, Tensor({2, 1}, {1.0, 0.0})).value()[0] ==
        doctest::Approx(0.5 * (expected_pos + expected_neg)).epsilon(1e-12));
}

TEST_CASE("focal loss: gamma=0, alpha=0.5 halves the cross-entropy") {
  auto rng = testutil::make_rng(5);
  for (int i = 0; i < 20; ++i) {
    const double s = testutil::urand(rng, 0.05, 0.95);
    const double t = (rng() % 2 == 0) ? 1.0 : 0.0;
    Var sv = Var::constant(Tensor({1, 1}, {s}));
    const double loss =
        focal_loss(sv, Tensor({1, 1}, {t}), 0.5, 0.0).value()[0];
    const double bce = -(t * std::log(s) + (1.0 - t) * std::log(1.0 - s));
    CHECK(loss == doctest::Approx(0.5 * bce).epsilon(1e-12));
  }
}

TEST_CASE("focal loss: monotone decreasing in score on positive targets") {
  double prev = std::numeric_limits<double>::infinity();
  for (double s = 0.05; s < 1.0; s += 0.05) {
    Var sv = Var::constant(Tensor({1, 1}, {s}));
    const double cur = focal_loss(sv, Tensor({1, 1}, {1.0})).value()[0];
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("focal loss: validation") {
  Var ok = Var::constant(Tensor({1, 1}, {0.5}));
  CHECK_THROWS_AS(focal_loss(ok, Tensor({1, 1}, {0.5})), ValueError);
  CHECK_THROWS_AS(focal_loss(ok, Tensor({2, 1}, {1.0, 0.0})), DimensionError);
  Var at_one = Var::constant(Tensor({1, 1}, {1.0}));
  CHECK_THROWS_AS(focal_loss(at_one, Tensor({1, 1}, {1.0})), ValueError);
}

TEST_CASE("focal loss gradient matches finite differences") {
  auto rng = testutil::make_rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const long m = 1 + static_cast<long>(rng() % 6);
    Tensor s({m, 1}), t({m, 1});
    for (long i = 0; i < m; ++i) {
      s[i] = testutil::urand(rng, 0.1, 0.9);
      t[i] = (rng() % 2 == 0) ? 1.0 : 0.0;
    }
    Var scores = Var::leaf(s, true);
    const double err = fscd::testutil::max_gradcheck_error(
        [&] { return focal_loss(scores, t); }, {scores});
    CHECK(err < 1e-3);
  }
}

TEST_CASE("L1 box loss: hand value and gradient") {
  Var boxes = Var::constant(Tensor({2, 4}, {0.1, 0.2, 0.3, 0.4,  //
                                            0.5, 0.5, 0.2, 0.2}));
  const Tensor targets({2, 4}, {0.2, 0.2, 0.3, 0.4,  //
                                0.5, 0.4, 0.2, 0.5});
  // Row sums: 0.1 and 0.1 + 0.3 -> mean 0.25.
  CHECK(l1_box_loss(boxes, targets).value()[0] ==
        doctest::Approx(0.25).epsilon(1e-12));

  auto rng = testutil::make_rng(8);
  Var leaf = Var::leaf(Tensor::uniform({3, 4}, rng, 0.1, 0.9), true);
  Tensor far = Tensor::uniform({3, 4}, rng, -2.0, -1.0);  // residuals >> step
  const double err = fscd::testutil::max_gradcheck_error(
      [&] { return l1_box_loss(leaf, far); }, {leaf});
  CHECK(err < 1e-3);
}

TEST_CASE("differentiable overlap agrees with the scalar version") {
  auto rng = testutil::make_rng(77);
  const long p = 200;
  Tensor rows({p, 4});
  Tensor tgts({p, 4});
  std::vector<Box> pred_boxes, tgt_boxes;
  for (long i = 0; i < p; ++i) {
    const Box a = testutil::random_box(rng);
    const Box b = testutil::random_box(rng);
    rows[i * 4 + 0] = a.cx;
    rows[i * 4 + 1] = a.cy;
    rows[i * 4 + 2] = a.w;
    rows[i * 4 + 3] = a.h;
    tgts[i * 4 + 0] = b.cx;
    tgts[i * 4 + 1] = b.cy;
    tgts[i * 4 + 2] = b.w;
    tgts[i * 4 + 3] = b.h;
    pred_boxes.push_back(a);
    tgt_boxes.push_back(b);
  }
  const Var g = giou_rows(Var::constant(rows), tgts);
  for (long i = 0; i < p; ++i) {
    CHECK(g.value()[i] ==
          doctest::Approx(giou(pred_boxes[static_cast<std::size_t>(i)],
                               tgt_boxes[static_cast<std::size_t>(i)]))
              .epsilon(1e-12));
  }
}

TEST_CASE("overlap loss: disjoint hand case -1/3 and perfect match 0") {
  // Corners (0,0,1,1) vs (2,0,3,1): overlap -1/3, loss 4/3.
  const Box a = from_corners(0, 0, 1, 1);
  Var boxes = Var::constant(Tensor({1, 4}, {a.cx, a.cy, a.w, a.h}));
  const Box b = from_corners(2, 0, 3, 1);
  const Tensor tgt({1, 4}, {b.cx, b.cy, b.w, b.h});
  CHECK(giou_rows(boxes, tgt).value()[0] ==
        doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
  CHECK(giou_box_loss(boxes, tgt).value()[0] ==
        doctest::Approx(4.0 / 3.0).epsilon(1e-12));

  const Tensor same({1, 4}, {a.cx, a.cy, a.w, a.h});
  CHECK(giou_box_loss(boxes, same).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("overlap loss gradient matches finite differences") {
  auto rng = testutil::make_rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor rows({2, 4});
    Tensor tgts({2, 4});
    for (long i = 0; i < 2; ++i) {
      const Box a = testutil::random_box(rng);
      const Box b = testutil::random_box(rng);
      rows[i * 4 + 0] = a.cx;
      rows[i * 4 + 1] = a.cy;
      rows[i * 4 + 2] = a.w;
      rows[i * 4 + 3] = a.h;
      tgts[i * 4 + 0] = b.cx;
      tgts[i * 4 + 1] = b.cy;
      tgts[i * 4 + 2] = b.w;
      tgts[i * 4 + 3] = b.h;
    }
    Var leaf = Var::leaf(rows, true);
    const double err = fscd::testutil::max_gradcheck_error(
        [&] { return giou_box_loss(leaf, tgts); }, {leaf});
    CHECK(err < 1e-3);
  }
}

TEST_CASE("laplace uncertainty: hand values") {
  const Tensor mu_tilde({1, 4}, {0.5, 0.5, 0.2, 0.2});
  Var mu = Var::constant(Tensor({1, 4}, {0.5, 0.5, 0.2, 0.2}));
  Var unit = Var::constant(Tensor::full({1, 4}, 1.0));
  CHECK(laplace_uncertainty_loss(mu, mu_tilde, unit).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-12));

  Var off = Var::constant(Tensor({1, 4}, {1.5, 1.5, 1.2, 1.2}));
  CHECK(laplace_uncertainty_loss(off, mu_tilde, unit).value()[0] ==
        doctest::Approx(2.0).epsilon(1e-12));

  // Two rows average: second row contributes zero.
  const Tensor two_t({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1});
  Var two_mu =
      Var::constant(Tensor({2, 4}, {1.5, 1.5, 1.2, 1.2, 0.1, 0.1, 0.1, 0.1}));
  Var two_sigma = Var::constant(Tensor::full({2, 4}, 1.0));
  CHECK(laplace_uncertainty_loss(two_mu, two_t, two_sigma).value()[0] ==
        doctest::Approx(1.0).epsilon(1e-12));

  Var bad_sigma = Var::constant(Tensor({1, 4}, {1.0, -1.0, 1.0, 1.0}));
  CHECK_THROWS_AS(laplace_uncertainty_loss(mu, mu_tilde, bad_sigma),
                  ValueError);
  Var zero_sigma = Var::constant(Tensor::zeros({1, 4}));
  CHECK_THROWS_AS(laplace_uncertainty_loss(mu, mu_tilde, zero_sigma),
                  ValueError);
}

TEST_CASE("laplace uncertainty: per-coordinate optimum sits at |residual|") {
  for (const double delta : {0.01, 0.1, 1.0}) {
    // f(sigma) = |delta|/sigma + log sigma over a fine grid.
    double best_sigma = 0.0;
    double best_val = std::numeric_limits<double>::infinity();
    for (double s = delta / 20.0; s <= delta * 20.0; s += delta / 500.0) {
      const double v = delta / s + std::log(s);
      if (v < best_val) {
        best_val = v;
        best_sigma = s;
      }
    }
    CHECK(std::abs(best_sigma - delta) / delta < 0.01);
    CHECK(best_val == doctest::Approx(1.0 + std::log(delta)).epsilon(1e-4));

    // The loss itself reproduces the analytic optimum value (times 1/2,
    // with the other three coordinates exact).
    const Tensor mu_tilde({1, 4}, {0.5, 0.5, 0.2, 0.2});
    Var mu = Var::constant(
        Tensor({1, 4}, {0.5 + delta, 0.5, 0.2, 0.2}));
    Var sigma =
        Var::constant(Tensor({1, 4}, {delta, 1.0, 1.0, 1.0}));
    CHECK(laplace_uncertainty_loss(mu, mu_tilde, sigma).value()[0] ==
          doctest::Approx(0.5 * (1.0 + std::log(delta))).epsilon(1e-12));
  }
}

TEST_CASE("gaussian uncertainty: hand values and optimum") {
  const Tensor mu_tilde({1, 4}, {0.5, 0.5, 0.2, 0.2});
  Var unit = Var::constant(Tensor::full({1, 4}, 1.0));
  Var off = Var::constant(Tensor({1, 4}, {1.5, 1.5, 1.2, 1.2}));
  CHECK(gaussian_uncertainty_loss(off, mu_tilde, unit).value()[0] ==
        doctest::Approx(2.0).epsilon(1e-12));
  Var mu = Var::constant(Tensor({1, 4}, {0.5, 0.5, 0.2, 0.2}));
  CHECK(gaussian_uncertainty_loss(mu, mu_tilde, unit).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-12));

  // Minimum of delta^2/s^2 + 2 log s sits at s = |delta|.
  const double delta = 0.3;
  double best_sigma = 0.0;
  double best_val = std::numeric_limits<double>::infinity();
  for (double s = 0.01; s <= 3.0; s += 0.0005) {
    const double v = delta * delta / (s * s) + 2.0 * std::log(s);
    if (v < best_val) {
      best_val = v;
      best_sigma = s;
    }
  }
  CHECK(std::abs(best_sigma - delta) / delta < 0.01);

  Var bad_sigma = Var::constant(Tensor({1, 4}, {0.0, 1.0, 1.0, 1.0}));
  CHECK_THROWS_AS(gaussian_uncertainty_loss(mu, mu_tilde, bad_sigma),
                  ValueError);
}

TEST_CASE("uncertainty losses are convex in log sigma") {
  // Second differences of f(u) = loss with sigma = e^u stay positive.
  const Tensor mu_tilde({1, 4}, {0.5, 0.5, 0.2, 0.2});
  Var mu = Var::constant(Tensor({1, 4}, {0.8, 0.5, 0.2, 0.2}));
  const double du = 0.05;
  for (const bool laplace : {true, false}) {
    for (double u = -3.0; u <= 3.0; u += 0.1) {
      auto eval = [&](double uu) {
        Tensor s = Tensor::full({1, 4}, 1.0);
        s[0] = std::exp(uu);
        Var sv = Var::constant(s);
        return laplace
                   ? laplace_uncertainty_loss(mu, mu_tilde, sv).value()[0]
                   : gaussian_uncertainty_loss(mu, mu_tilde, sv).value()[0];
      };
      const double second = eval(u + du) - 2.0 * eval(u) + eval(u - du);
      CHECK(second > 0.0);
    }
  }
}

TEST_CASE("uncertainty gradients (mu and log sigma) match finite differences") {
  auto rng = testutil::make_rng(17);
  for (const bool laplace : {true, false}) {
    for (int trial = 0; trial < 10; ++trial) {
      const long p = 1 + static_cast<long>(rng() % 3);
      Tensor mu_tilde = Tensor::uniform({p, 4}, rng, 0.1, 0.9);
      Tensor mu0 = Tensor::uniform({p, 4}, rng, 1.2, 2.0);  // residual >> step
      Tensor ls0 = Tensor::uniform({p, 4}, rng, -1.0, 1.0);
      Var mu = Var::leaf(mu0, true);
      Var log_sigma = Var::leaf(ls0, true);
      const double err = fscd::testutil::max_gradcheck_error(
          [&] {
            Var sigma = nn::exp_op(log_sigma);
            return laplace
                       ? laplace_uncertainty_loss(mu, mu_tilde, sigma)
                       : gaussian_uncertainty_loss(mu, mu_tilde, sigma);
          },
          {mu, log_sigma});
      CHECK(err < 1e-3);
    }
  }
}

TEST_CASE("combined loss stage 1: fixed pairing, perfect predictions") {
  const QueryPoints q =
      make_query_points({{0.3, 0.3}, {0.7, 0.7}}, "fixed-grid");
  // Offsets zero, sizes equal to the targets.
  const auto out = make_output({0.999, 0.999},
                               {0.0, 0.0, 0.2, 0.2, 0.0, 0.0, 0.3, 0.3});
  TargetSet targets{{Box(0.3, 0.3, 0.2, 0.2), Box(0.7, 0.7, 0.3, 0.3)}};
  const LossReport rep =
      combined_loss(out, q, targets, LossWeights{}, LossMode::kStage1);
  REQUIRE(rep.match.pairs.size() == 2);
  CHECK(rep.match.pairs[0] == std::pair<long, long>{0, 0});
  CHECK(rep.match.pairs[1] == std::pair<long, long>{1, 1});
  CHECK(rep.l1 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rep.giou == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rep.uncertainty == 0.0);
  // Only the (tiny) score term remains.
  CHECK(rep.total_value == doctest::Approx(2.0 * rep.focal).epsilon(1e-12));
  CHECK(rep.total_value < 1e-6);

  // The fixed pairing requires one query per target.
  TargetSet extra{{Box(0.3, 0.3, 0.2, 0.2)}};
  CHECK_THROWS_AS(
      combined_loss(out, q, extra, LossWeights{}, LossMode::kStage1),
      DimensionError);
}

TEST_CASE("combined loss stage 1 ignores the pairing order cost") {
  // Query 0 sits on target 1 and vice versa; stage 1 must NOT re-match.
  const QueryPoints q =
      make_query_points({{0.3, 0.3}, {0.7, 0.7}}, "fixed-grid");
  const auto out = make_output({0.9, 0.9},
                               {0.0, 0.0, 0.2, 0.2, 0.0, 0.0, 0.2, 0.2});
  TargetSet swapped{{Box(0.7, 0.7, 0.2, 0.2), Box(0.3, 0.3, 0.2, 0.2)}};
  const LossReport rep =
      combined_loss(out, q, swapped, LossWeights{}, LossMode::kStage1);
  CHECK(rep.match.pairs[0] == std::pair<long, long>{0, 0});
  CHECK(rep.l1 > 0.5);  // both boxes are far from their paired targets
}

TEST_CASE("combined loss stage 2: worked default-weight example") {
  const QueryPoints q =
      make_query_points({{0.25, 0.25}, {0.75, 0.75}}, "fixed-grid");
  // Decoded: (0.32, 0.30, 0.2, 0.2) and (0.70, 0.70, 0.21, 0.2).
  const auto out = make_output({0.8, 0.3},
                               {0.07, 0.05, 0.2, 0.2, -0.05, -0.05, 0.21, 0.2});
  TargetSet targets{{Box(0.3, 0.3, 0.2, 0.2)}};
  const LossReport rep = combined_loss(out, q, targets, LossWeights{},
                                       LossMode::kStage2, "laplace");
  REQUIRE(rep.match.pairs.size() == 1);
  CHECK(rep.match.pairs[0] == std::pair<long, long>{0, 0});
  CHECK(rep.match.unmatched_predictions == std::vector<long>{1});

  const double focal_pos = -0.25 * 0.04 * std::log(0.8);
  const double focal_neg = -0.75 * 0.09 * std::log(0.7);
  const double expect_focal = 0.5 * (focal_pos + focal_neg);
  const double expect_l1 = 0.02;
  const double expect_giou = 1.0 - 9.0 / 11.0;
  const double expect_unc = 0.5 * 0.02;  // sigma = 1: |residual| terms only
  CHECK(rep.focal == doctest::Approx(expect_focal).epsilon(1e-12));
  CHECK(rep.l1 == doctest::Approx(expect_l1).epsilon(1e-12));
  CHECK(rep.giou == doctest::Approx(expect_giou).epsilon(1e-9));
  CHECK(rep.uncertainty == doctest::Approx(expect_unc).epsilon(1e-12));
  const double expect_total = 2.0 * expect_focal + 5.0 * expect_l1 +
                              2.0 * expect_giou + 2.0 * expect_unc;
  CHECK(rep.total_value == doctest::Approx(expect_total).epsilon(1e-9));
}

TEST_CASE("combined loss stage 2: lambda4=0 equals the no-uncertainty total") {
  const QueryPoints q =
      make_query_points({{0.25, 0.25}, {0.75, 0.75}}, "fixed-grid");
  const auto out = make_output({0.8, 0.3},
                               {0.07, 0.05, 0.2, 0.2, -0.05, -0.05, 0.21, 0.2},
                               {0.5, -0.5, 0.2, 0.0, 0.1, 0.1, 0.1, 0.1});
  TargetSet targets{{Box(0.3, 0.3, 0.2, 0.2)}};
  LossWeights no4;
  no4.lambda4 = 0.0;
  const auto a =
      combined_loss(out, q, targets, no4, LossMode::kStage2, "laplace");
  const auto b =
      combined_loss(out, q, targets, no4, LossMode::kStage2, "none");
  CHECK(a.total_value == doctest::Approx(b.total_value).epsilon(1e-12));

  // Gaussian and Laplace genuinely differ once lambda4 > 0.
  const auto lap = combined_loss(out, q, targets, LossWeights{},
                                 LossMode::kStage2, "laplace");
  const auto gau = combined_loss(out, q, targets, LossWeights{},
                                 LossMode::kStage2, "gaussian");
  CHECK(lap.total_value != doctest::Approx(gau.total_value));
  CHECK_THROWS_AS(combined_loss(out, q, targets, LossWeights{},
                                LossMode::kStage2, "cauchy"),
                  ValueError);
}

TEST_CASE("combined loss stage 2: permuting targets changes nothing") {
  auto rng = testutil::make_rng(55);
  std::vector<std::array<double, 2>> pts;
  std::vector<double> scores, params;
  for (int i = 0; i < 6; ++i) {
    pts.push_back({testutil::urand(rng, 0.1, 0.9),
                   testutil::urand(rng, 0.1, 0.9)});
    scores.push_back(testutil::urand(rng, 0.2, 0.8));
    params.push_back(testutil::urand(rng, -0.05, 0.05));
    params.push_back(testutil::urand(rng, -0.05, 0.05));
    params.push_back(testutil::urand(rng, 0.1, 0.3));
    params.push_back(testutil::urand(rng, 0.1, 0.3));
  }
  const QueryPoints q = make_query_points(pts, "fixed-grid");
  const auto out = make_output(scores, params);
  TargetSet targets{{testutil::random_box(rng), testutil::random_box(rng),
                     testutil::random_box(rng)}};
  TargetSet permuted{{targets.boxes[2], targets.boxes[0], targets.boxes[1]}};
  const auto a = combined_loss(out, q, targets, LossWeights{},
                               LossMode::kStage2, "laplace");
  const auto b = combined_loss(out, q, permuted, LossWeights{},
                               LossMode::kStage2, "laplace");
  CHECK(a.total_value == doctest::Approx(b.total_value).epsilon(1e-12));
  // Same prediction set gets matched either way.
  std::vector<long> preds_a, preds_b;
  for (const auto& pr : a.match.pairs) preds_a.push_back(pr.first);
  for (const auto& pr : b.match.pairs) preds_b.push_back(pr.first);
  std::sort(preds_a.begin(), preds_a.end());
  std::sort(preds_b.begin(), preds_b.end());
  CHECK(preds_a == preds_b);
}

TEST_CASE("combined loss stage 2: empty targets and too many targets") {
  const QueryPoints q =
      make_query_points({{0.3, 0.3}, {0.7, 0.7}}, "fixed-grid");
  const auto out = make_output({0.4, 0.6},
                               {0.0, 0.0, 0.2, 0.2, 0.0, 0.0, 0.2, 0.2});
  TargetSet none{};
  const auto rep =
      combined_loss(out, q, none, LossWeights{}, LossMode::kStage2);
  CHECK(rep.match.pairs.empty());
  CHECK(rep.match.unmatched_predictions == std::vector<long>{0, 1});
  CHECK(rep.l1 == 0.0);
  CHECK(rep.giou == 0.0);
  CHECK(rep.uncertainty == 0.0);
  // Background-only focal: -0.75 * s^2 * log(1-s) averaged.
  const double f0 = -0.75 * 0.16 * std::log(0.6);
  const double f1 = -0.75 * 0.36 * std::log(0.4);
  CHECK(rep.focal == doctest::Approx(0.5 * (f0 + f1)).epsilon(1e-12));
  CHECK(rep.total_value == doctest::Approx(2.0 * rep.focal).epsilon(1e-12));

  TargetSet three{{Box(0.3, 0.3, 0.1, 0.1), Box(0.5, 0.5, 0.1, 0.1),
                   Box(0.7, 0.7, 0.1, 0.1)}};
  CHECK_THROWS_AS(
      combined_loss(out, q, three, LossWeights{}, LossMode::kStage2),
      DimensionError);
}

TEST_CASE("combined stage-2 gradient matches finite differences") {
  // Well-separated instance so the assignment is stable under perturbation,
  // with every box coordinate generically off-target (an exact residual of
  // zero puts the L1/overlap terms on a subgradient kink where central
  // differences disagree by curvature).
  const QueryPoints q =
      make_query_points({{0.25, 0.25}, {0.75, 0.75}}, "fixed-grid");
  Var scores = Var::leaf(Tensor({2, 1}, {0.8, 0.3}), true);
  Var box_params = Var::leaf(
      Tensor({2, 4}, {0.07, 0.06, 0.19, 0.23, -0.05, -0.04, 0.21, 0.18}), true);
  Var log_sigma = Var::leaf(
      Tensor({2, 4}, {0.3, -0.3, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0}), true);
  TargetSet targets{{Box(0.3, 0.3, 0.2, 0.2)}};
  for (const char* kind : {"laplace", "gaussian"}) {
    const double err = fscd::testutil::max_gradcheck_error(
        [&] {
          DetectorOutput out;
          out.scores = scores;
          out.box_params = box_params;
          out.log_sigma = log_sigma;
          return combined_loss(out, q, targets, LossWeights{},
                               LossMode::kStage2, kind)
              .total;
        },
        {scores, box_params, log_sigma});
    CHECK(err < 1e-3);
  }
}

TEST_CASE("weight validation") {
  LossWeights w;
  w.lambda2 = -1.0;
  CHECK_THROWS_AS(validate_weights(w), ValueError);
  w.lambda2 = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(validate_weights(w), ValueError);
}
