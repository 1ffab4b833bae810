#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fscd/checkpoint.hpp"
#include "fscd/detector.hpp"
#include "fscd/errors.hpp"
#include "support/gradcheck.hpp"
#include "support/test_util.hpp"

using namespace fscd;
using nn::Tensor;
using nn::Var;

namespace {

DetectorConfig small_cfg(long m = 5) {
  DetectorConfig cfg;
  cfg.num_encoder_layers = 1;
  cfg.num_decoder_layers = 1;
  cfg.feature_dim = 32;
  cfg.num_heads = 4;
  cfg.ffn_dim = 64;
  cfg.m = m;
  return cfg;
}

AggregatedMap random_map(long h, long w, long d, unsigned long seed) {
  auto rng = testutil::make_rng(seed);
  return AggregatedMap{Var::constant(Tensor::randn({h, w, d}, rng)), 8};
}

DetectorOutput wrap_params(const Tensor& box_params) {
  const long m = box_params.dim(0);
  DetectorOutput out;
  out.scores = Var::constant(Tensor::full({m, 1}, 0.5));
  out.box_params = Var::constant(box_params);
  out.log_sigma = Var::constant(Tensor::zeros({m, 4}));
  return out;
}

}  // namespace

TEST_CASE("anchor lattice: M=4 gives the 2x2 cell centers in row-major order") {
  const QueryPoints q = make_anchor_points(4, "fixed-grid");
  REQUIRE(q.m() == 4);
  const std::vector<std::array<double, 2>> expect = {
      {0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
  const Tensor pts = q.coords();
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(pts[i * 2 + 0] == doctest::Approx(expect[i][0]));
    CHECK(pts[i * 2 + 1] == doctest::Approx(expect[i][1]));
  }
}

TEST_CASE("anchor lattice: M=600 forms a 24x25 grid") {
  const QueryPoints q = make_anchor_points(600, "fixed-grid");
  REQUIRE(q.m() == 600);
  const Tensor pts = q.coords();
  // Row-major: 25 columns per row, 24 rows.
  CHECK(pts[0 * 2 + 0] == doctest::Approx(0.5 / 25.0));
  CHECK(pts[0 * 2 + 1] == doctest::Approx(0.5 / 24.0));
  CHECK(pts[24 * 2 + 0] == doctest::Approx(24.5 / 25.0));  // last col of first row
  CHECK(pts[24 * 2 + 1] == doctest::Approx(0.5 / 24.0));
  CHECK(pts[25 * 2 + 0] == doctest::Approx(0.5 / 25.0));   // first col of 2nd row
  CHECK(pts[25 * 2 + 1] == doctest::Approx(1.5 / 24.0));
  CHECK(pts[599 * 2 + 0] == doctest::Approx(24.5 / 25.0));
  CHECK(pts[599 * 2 + 1] == doctest::Approx(23.5 / 24.0));
  double min_x = 1, max_x = 0, min_y = 1, max_y = 0;
  for (long i = 0; i < 600; ++i) {
    min_x = std::min(min_x, pts[i * 2 + 0]);
    max_x = std::max(max_x, pts[i * 2 + 0]);
    min_y = std::min(min_y, pts[i * 2 + 1]);
    max_y = std::max(max_y, pts[i * 2 + 1]);
  }
  CHECK(min_x == doctest::Approx(0.5 / 25.0));
  CHECK(max_x == doctest::Approx(24.5 / 25.0));
  CHECK(min_y == doctest::Approx(0.5 / 24.0));
  CHECK(max_y == doctest::Approx(23.5 / 24.0));
}

TEST_CASE("anchor lattice: M=1 centers and prime M degenerates to one row") {
  const auto one = make_anchor_points(1, "fixed-grid");
  CHECK(one.coords()[0 * 2 + 0] == doctest::Approx(0.5));
  CHECK(one.coords()[0 * 2 + 1] == doctest::Approx(0.5));

  const auto five = make_anchor_points(5, "fixed-grid");
  REQUIRE(five.m() == 5);
  for (long i = 0; i < 5; ++i) {
    CHECK(five.coords()[i * 2 + 0] == doctest::Approx((i + 0.5) / 5.0));
    CHECK(five.coords()[i * 2 + 1] == doctest::Approx(0.5));
  }
  CHECK_THROWS_AS(make_anchor_points(-1, "fixed-grid"), ValueError);
}

TEST_CASE("explicit query points validate their range") {
  const QueryPoints q =
      make_query_points({{0.1, 0.2}, {0.9, 0.8}}, "fixed-grid");
  CHECK(q.m() == 2);
  CHECK(q.coords()[1 * 2 + 0] == doctest::Approx(0.9));
  CHECK_THROWS_AS(make_query_points({{1.5, 0.2}}, "fixed-grid"),
                  ValueError);
}

TEST_CASE("detector forward: shapes, determinism, score range") {
  Detector det(small_cfg(5), 21);
  const AggregatedMap fm = random_map(4, 4, 32, 3);
  const QueryPoints q = make_anchor_points(5, "fixed-grid");
  const DetectorOutput out = det.forward(fm, q);
  CHECK(out.scores.shape() == std::vector<long>{5, 1});
  CHECK(out.box_params.shape() == std::vector<long>{5, 4});
  CHECK(out.log_sigma.shape() == std::vector<long>{5, 4});
  CHECK(out.m() == 5);
  for (long i = 0; i < 5; ++i) {
    const double s = out.scores.value()[i];
    CHECK(s > 0.0);
    CHECK(s < 1.0);
    // Sizes squashed to (0,1); log-sigma clamped to [-5, 5].
    CHECK(out.box_params.value()[i * 4 + 2] > 0.0);
    CHECK(out.box_params.value()[i * 4 + 2] < 1.0);
    CHECK(out.box_params.value()[i * 4 + 3] > 0.0);
    CHECK(out.box_params.value()[i * 4 + 3] < 1.0);
    for (long o = 0; o < 4; ++o) {
      CHECK(out.log_sigma.value()[i * 4 + o] >= -5.0);
      CHECK(out.log_sigma.value()[i * 4 + o] <= 5.0);
    }
  }
  const DetectorOutput again = det.forward(fm, q);
  CHECK(out.scores.value().vec() == again.scores.value().vec());
  CHECK(out.box_params.value().vec() == again.box_params.value().vec());
}

TEST_CASE("duplicated query points produce identical output rows") {
  Detector det(small_cfg(3), 4);
  const AggregatedMap fm = random_map(3, 5, 32, 9);
  const QueryPoints q = make_query_points({{0.3, 0.6}, {0.3, 0.6}, {0.7, 0.1}},
                                          "fixed-grid");
  const DetectorOutput out = det.forward(fm, q);
  for (long col = 0; col < 4; ++col) {
    CHECK(out.box_params.value()[0 * 4 + col] ==
          doctest::Approx(out.box_params.value()[1 * 4 + col]).epsilon(1e-12));
  }
  CHECK(out.scores.value()[0] == doctest::Approx(out.scores.value()[1]));
}

TEST_CASE("zero queries yield empty outputs") {
  Detector det(small_cfg(0), 4);
  const AggregatedMap fm = random_map(2, 2, 32, 9);
  const QueryPoints q = make_query_points({}, "fixed-grid");
  CHECK_THROWS_AS(make_anchor_points(0, "fixed-grid"), ValueError);
  const DetectorOutput out = det.forward(fm, q);
  CHECK(out.m() == 0);
  CHECK(out.scores.shape() == std::vector<long>{0, 1});
  CHECK(out.box_params.shape() == std::vector<long>{0, 4});
}

TEST_CASE("box decode: offsets shift query centers, sizes pass through") {
  const QueryPoints q =
      make_query_points({{0.5, 0.5}, {0.2, 0.8}}, "fixed-grid");
  const Tensor bp({2, 4}, {0.1, -0.2, 0.3, 0.4,   // q0
                           0.0, 0.0, 0.5, 0.25});  // q1
  const auto boxes = decode_boxes(wrap_params(bp), q);
  REQUIRE(boxes.size() == 2);
  CHECK(boxes[0].cx == doctest::Approx(0.6));
  CHECK(boxes[0].cy == doctest::Approx(0.3));
  CHECK(boxes[0].w == doctest::Approx(0.3));
  CHECK(boxes[0].h == doctest::Approx(0.4));
  CHECK(boxes[1].cx == doctest::Approx(0.2));
  CHECK(boxes[1].cy == doctest::Approx(0.8));

  // Centers clamp into the unit square.
  const Tensor wild({2, 4}, {5.0, -5.0, 0.3, 0.4, 0.0, 0.0, 0.5, 0.25});
  const auto clamped = decode_boxes(wrap_params(wild), q);
  CHECK(clamped[0].cx == doctest::Approx(1.0));
  CHECK(clamped[0].cy == doctest::Approx(0.0));
}

TEST_CASE("target encoding inverts box decoding") {
  auto rng = testutil::make_rng(77);
  std::vector<std::array<double, 2>> pts;
  std::vector<Box> targets;
  for (int i = 0; i < 20; ++i) {
    pts.push_back({testutil::urand(rng, 0.0, 1.0), testutil::urand(rng, 0.0, 1.0)});
    targets.push_back(testutil::random_box(rng));
  }
  const QueryPoints q = make_query_points(pts, "fixed-grid");
  const Tensor enc = encode_targets(targets, q);
  const auto decoded = decode_boxes(wrap_params(enc), q);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    CHECK(decoded[i].cx == doctest::Approx(targets[i].cx).epsilon(1e-12));
    CHECK(decoded[i].cy == doctest::Approx(targets[i].cy).epsilon(1e-12));
    CHECK(decoded[i].w == doctest::Approx(targets[i].w).epsilon(1e-12));
    CHECK(decoded[i].h == doctest::Approx(targets[i].h).epsilon(1e-12));
  }
}

TEST_CASE("differentiable decode matches scalar decode for in-range params") {
  auto rng = testutil::make_rng(15);
  const QueryPoints q = make_anchor_points(6, "fixed-grid");
  // Offsets small enough that no decoded center hits the [0,1] clamp.
  Tensor bp = Tensor::uniform({6, 4}, rng, 0.05, 0.1);
  const auto scalar_boxes = decode_boxes(wrap_params(bp), q);
  const Var var_boxes = decode_boxes_var(wrap_params(bp), q);
  for (long i = 0; i < 6; ++i) {
    CHECK(var_boxes.value()[i * 4 + 0] == doctest::Approx(scalar_boxes[i].cx));
    CHECK(var_boxes.value()[i * 4 + 1] == doctest::Approx(scalar_boxes[i].cy));
    CHECK(var_boxes.value()[i * 4 + 2] == doctest::Approx(scalar_boxes[i].w));
    CHECK(var_boxes.value()[i * 4 + 3] == doctest::Approx(scalar_boxes[i].h));
  }
}

TEST_CASE("config validation rejects bad dims") {
  DetectorConfig cfg = small_cfg();
  cfg.feature_dim = 30;  // divisible by heads=6 but not by 4
  cfg.num_heads = 6;
  CHECK_THROWS_AS(Detector(cfg, 1), ValueError);
  cfg = small_cfg();
  cfg.num_heads = 5;  // 32 % 5 != 0
  CHECK_THROWS_AS(Detector(cfg, 1), ValueError);
  cfg = small_cfg();
  cfg.num_encoder_layers = 0;
  CHECK_THROWS_AS(Detector(cfg, 1), ValueError);
}

TEST_CASE("whole-detector gradients match finite differences") {
  DetectorConfig cfg;
  cfg.num_encoder_layers = 1;
  cfg.num_decoder_layers = 1;
  cfg.feature_dim = 8;
  cfg.num_heads = 2;
  cfg.ffn_dim = 16;
  cfg.m = 2;
  Detector det(cfg, 33);
  auto rng = testutil::make_rng(42);
  Var fmap = Var::leaf(Tensor::randn({2, 2, 8}, rng, 0.5), true);
  const QueryPoints q = make_anchor_points(2, "fixed-grid");

  // Check the map input plus a few representative parameters.
  std::vector<Var> leaves = {fmap};
  int picked = 0;
  for (auto& p : det.params()) {
    if (p.name.find("ffn") != std::string::npos && picked < 2) {
      leaves.push_back(p.var);
      ++picked;
    }
  }
  REQUIRE(leaves.size() >= 2);

  Var w_scores = Var::constant(Tensor::uniform({2, 1}, rng, -1.0, 1.0));
  Var w_boxes = Var::constant(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
  Var w_sigma = Var::constant(Tensor::uniform({2, 4}, rng, -1.0, 1.0));
  const double err = fscd::testutil::max_gradcheck_error(
      [&] {
        const auto out = det.forward(AggregatedMap{fmap, 8}, q);
        return nn::add(nn::add(nn::sum_all(nn::mul(out.scores, w_scores)),
                               nn::sum_all(nn::mul(out.box_params, w_boxes))),
                       nn::sum_all(nn::mul(out.log_sigma, w_sigma)));
      },
      leaves);
  CHECK(err < 2e-3);
}

TEST_CASE("checkpoint round-trip preserves parameters and metadata") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "fscd_ckpt_test";
  fs::create_directories(dir);
  const fs::path path = dir / "model.ckpt";

  Detector a(small_cfg(3), 5);
  Detector b(small_cfg(3), 999);  // different init
  const AggregatedMap fm = random_map(2, 3, 32, 2);
  const QueryPoints q = make_anchor_points(3, "fixed-grid");
  const auto out_a = a.forward(fm, q);
  const auto out_b_before = b.forward(fm, q);
  // Different seeds genuinely differ.
  CHECK(out_a.scores.value().vec() != out_b_before.scores.value().vec());

  nlohmann::json meta;
  meta["stage"] = 1;
  meta["epoch"] = 7;
  save_checkpoint(path.string(), a.params(), meta);

  const auto peeked = peek_checkpoint_meta(path.string());
  CHECK(peeked.at("stage").get<int>() == 1);
  CHECK(peeked.at("epoch").get<int>() == 7);

  load_checkpoint(path.string(), b.params());
  const auto out_b = b.forward(fm, q);
  CHECK(out_a.scores.value().vec() == out_b.scores.value().vec());
  CHECK(out_a.box_params.value().vec() == out_b.box_params.value().vec());

  // Mismatched architecture must be rejected.
  DetectorConfig wide_cfg = small_cfg(3);
  wide_cfg.ffn_dim = 48;  // different weight shapes
  Detector wider(wide_cfg, 5);
  CHECK_THROWS_AS(load_checkpoint(path.string(), wider.params()),
                  SchemaViolationError);
  DetectorConfig deep_cfg = small_cfg(3);
  deep_cfg.num_decoder_layers = 2;  // extra parameters missing from the file
  Detector deeper(deep_cfg, 5);
  CHECK_THROWS_AS(load_checkpoint(path.string(), deeper.params()),
                  SchemaViolationError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string(), b.params()),
                  MissingFileError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint rejects corrupted files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "fscd_ckpt_corrupt";
  fs::create_directories(dir);
  const fs::path path = dir / "bad.ckpt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT garbage";
  }
  Detector d(small_cfg(2), 1);
  CHECK_THROWS_AS(load_checkpoint(path.string(), d.params()), SchemaViolationError);
  CHECK_THROWS_AS(peek_checkpoint_meta(path.string()), SchemaViolationError);
  fs::remove_all(dir);
}
