#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "fscd/checkpoint.hpp"
#include "fscd/errors.hpp"
#include "fscd/geometry.hpp"
#include "fscd/pipeline.hpp"
#include "fscd/synth.hpp"
#include "support/test_util.hpp"

using namespace fscd;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config(long m = 16) {
  ModelConfig cfg;
  cfg.backbone.kind = "tiny";
  cfg.backbone.stride = 8;
  cfg.backbone.feature_dim = 32;
  cfg.detector.num_encoder_layers = 1;
  cfg.detector.num_decoder_layers = 1;
  cfg.detector.feature_dim = 32;
  cfg.detector.num_heads = 4;
  cfg.detector.m = m;
  cfg.detector.ffn_dim = 64;
  return cfg;
}

TrainConfig small_train_config(long m = 16) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 1;
  cfg.lr_backbone = 1e-4;
  cfg.lr_transformer = 1e-3;
  cfg.grad_clip = 1.0;
  cfg.k = 3;
  cfg.m = m;
  cfg.seed = 11;
  cfg.max_image_side = 64;
  cfg.model = tiny_model_config(m);
  return cfg;
}

std::vector<AnnotatedImage> small_dataset(long n, std::uint64_t seed) {
  SyntheticSceneSpec spec;
  spec.num_images = n;
  spec.classes_per_image = {2, 2};
  spec.instances_per_class = {3, 6};
  spec.canvas_width = 64;
  spec.canvas_height = 64;
  spec.exemplars_k = 3;
  spec.seed = seed;
  spec.id_prefix = "pipe";
  return generate_synthetic(spec);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("model config survives a json round trip") {
  ModelConfig cfg = tiny_model_config(25);
  cfg.backbone.kind = "resnet50";
  cfg.backbone.stride = 8;
  cfg.backbone.feature_dim = 64;
  cfg.detector.feature_dim = 64;
  cfg.detector.anchor_kind = "fixed-grid";

  const nlohmann::json j = model_config_to_json(cfg);
  const ModelConfig back = model_config_from_json(j);
  CHECK(back.backbone.kind == cfg.backbone.kind);
  CHECK(back.backbone.stride == cfg.backbone.stride);
  CHECK(back.backbone.feature_dim == cfg.backbone.feature_dim);
  CHECK(back.detector.num_encoder_layers == cfg.detector.num_encoder_layers);
  CHECK(back.detector.num_decoder_layers == cfg.detector.num_decoder_layers);
  CHECK(back.detector.feature_dim == cfg.detector.feature_dim);
  CHECK(back.detector.num_heads == cfg.detector.num_heads);
  CHECK(back.detector.m == cfg.detector.m);
  CHECK(back.detector.anchor_kind == cfg.detector.anchor_kind);
  CHECK(back.detector.ffn_dim == cfg.detector.ffn_dim);
}

TEST_CASE("model config with mismatched feature widths is rejected") {
  ModelConfig cfg = tiny_model_config();
  cfg.detector.feature_dim = 64;  // backbone still 32
  cfg.detector.num_heads = 8;
  CHECK_THROWS_AS(validate_model_config(cfg), ValueError);
  CHECK_THROWS_AS(Model(cfg, 0), ValueError);
}

TEST_CASE("run_model produces one score, box, and spread row per query") {
  const auto data = small_dataset(1, 5);
  const Model model(tiny_model_config(), 7);
  const QueryPoints anchors = make_anchor_points(4, "fixed-grid");

  const DetectorOutput out =
      run_model(model, data[0].image, data[0].exemplars, anchors, 64);
  CHECK(out.scores.shape() == std::vector<long>{4, 1});
  CHECK(out.box_params.shape() == std::vector<long>{4, 4});
  CHECK(out.log_sigma.shape() == std::vector<long>{4, 4});
  for (long i = 0; i < 4; ++i) {
    CHECK(out.scores.value()[i] > 0.0);
    CHECK(out.scores.value()[i] < 1.0);
  }

  // Identical inputs give bitwise-identical outputs.
  const DetectorOutput again =
      run_model(model, data[0].image, data[0].exemplars, anchors, 64);
  for (long i = 0; i < 4; ++i) {
    CHECK(again.scores.value()[i] == out.scores.value()[i]);
  }
  for (long i = 0; i < 16; ++i) {
    CHECK(again.box_params.value()[i] == out.box_params.value()[i]);
  }

  // A smaller long-side cap resizes the input before the backbone.
  const DetectorOutput shrunk =
      run_model(model, data[0].image, data[0].exemplars, anchors, 32);
  CHECK(shrunk.scores.shape() == std::vector<long>{4, 1});
}

TEST_CASE("train config validation rejects out-of-range fields") {
  const TrainConfig good = small_train_config();
  CHECK_NOTHROW(validate_train_config(good));

  auto expect_bad = [&](auto&& mutate) {
    TrainConfig bad = good;
    mutate(bad);
    CHECK_THROWS_AS(validate_train_config(bad), ValueError);
  };
  expect_bad([](TrainConfig& c) { c.epochs = 0; });
  expect_bad([](TrainConfig& c) { c.batch_size = 0; });
  expect_bad([](TrainConfig& c) { c.lr_backbone = 0.0; });
  expect_bad([](TrainConfig& c) { c.lr_transformer = -1e-4; });
  expect_bad([](TrainConfig& c) { c.weight_decay = -0.1; });
  expect_bad([](TrainConfig& c) { c.grad_clip = 0.0; });
  expect_bad([](TrainConfig& c) { c.k = 0; });
  expect_bad([](TrainConfig& c) { c.m = 0; });
  expect_bad([](TrainConfig& c) { c.score_threshold = 1.0; });
  expect_bad([](TrainConfig& c) { c.score_threshold = 0.0; });
  expect_bad([](TrainConfig& c) { c.uncertainty_kind = "cauchy"; });
  expect_bad([](TrainConfig& c) { c.max_image_side = 8; });
  expect_bad([](TrainConfig& c) { c.weights.lambda1 = -2.0; });
  expect_bad([](TrainConfig& c) { c.model.detector.feature_dim = 64; });
}

TEST_CASE("first-stage training writes per-epoch checkpoints plus best") {
  const auto train = small_dataset(2, 21);
  TrainConfig cfg = small_train_config();
  cfg.epochs = 3;

  SUBCASE("without a validation split the final epoch is the best") {
    const fs::path dir = fresh_dir("fscd_s1_files");
    const TrainResult res = train_stage1(train, {}, cfg, dir.string());

    CHECK(res.epoch_losses.size() == 3);
    for (double l : res.epoch_losses) CHECK(std::isfinite(l));
    CHECK(res.val_mae.empty());
    CHECK(res.best_epoch == 2);
    CHECK(fs::exists(dir / "epoch_001.ckpt"));
    CHECK(fs::exists(dir / "epoch_002.ckpt"));
    CHECK(fs::exists(dir / "epoch_003.ckpt"));
    CHECK(fs::exists(dir / "best.ckpt"));
    CHECK(res.best_checkpoint == (dir / "best.ckpt").string());
    CHECK(res.last_checkpoint == (dir / "epoch_003.ckpt").string());

    const nlohmann::json meta = peek_checkpoint_meta(res.best_checkpoint);
    CHECK(meta.at("stage").get<int>() == 1);
    CHECK(meta.at("k").get<long>() == 3);
    CHECK(meta.at("epoch").get<long>() == 3);
    CHECK(meta.contains("model"));

    // Without a validation split best.ckpt mirrors the final epoch.
    nlohmann::json last_meta = peek_checkpoint_meta(res.last_checkpoint);
    CHECK(last_meta.at("epoch") == meta.at("epoch"));
  }

  SUBCASE("with a validation split the lowest count error wins") {
    const auto val = small_dataset(1, 77);
    const fs::path dir = fresh_dir("fscd_s1_val");
    const TrainResult res = train_stage1(train, val, cfg, dir.string());

    REQUIRE(res.val_mae.size() == 3);
    const long argmin = static_cast<long>(std::distance(
        res.val_mae.begin(),
        std::min_element(res.val_mae.begin(), res.val_mae.end())));
    CHECK(res.best_epoch == argmin);
    const nlohmann::json meta = peek_checkpoint_meta(res.best_checkpoint);
    CHECK(meta.at("epoch").get<long>() == res.best_epoch + 1);
  }
}

TEST_CASE("first-stage training is deterministic for a fixed seed") {
  const auto train = small_dataset(2, 33);
  const TrainConfig cfg = small_train_config();

  const fs::path dir_a = fresh_dir("fscd_s1_det_a");
  const fs::path dir_b = fresh_dir("fscd_s1_det_b");
  const TrainResult a = train_stage1(train, {}, cfg, dir_a.string());
  const TrainResult b = train_stage1(train, {}, cfg, dir_b.string());

  REQUIRE(a.epoch_losses.size() == b.epoch_losses.size());
  for (std::size_t i = 0; i < a.epoch_losses.size(); ++i) {
    CHECK(a.epoch_losses[i] == b.epoch_losses[i]);
  }

  // The trained weights agree too: identical predictions from both runs.
  const Model ma = load_model(a.best_checkpoint);
  const Model mb = load_model(b.best_checkpoint);
  const QueryPoints anchors = make_anchor_points(9, "fixed-grid");
  const DetectorOutput oa =
      run_model(ma, train[0].image, train[0].exemplars, anchors, 64);
  const DetectorOutput ob =
      run_model(mb, train[0].image, train[0].exemplars, anchors, 64);
  for (long i = 0; i < 9; ++i) {
    CHECK(oa.scores.value()[i] == ob.scores.value()[i]);
  }
}

TEST_CASE("first-stage training rejects malformed datasets") {
  TrainConfig cfg = small_train_config();
  const fs::path dir = fresh_dir("fscd_s1_bad");

  CHECK_THROWS_AS(train_stage1({}, {}, cfg, dir.string()), ValueError);

  auto train = small_dataset(1, 2);
  cfg.k = 2;  // records carry 3 exemplars
  CHECK_THROWS_AS(train_stage1(train, {}, cfg, dir.string()),
                  SchemaViolationError);
}

TEST_CASE("first-stage training memorizes a single image") {
  const auto train = small_dataset(1, 91);
  TrainConfig cfg = small_train_config();
  cfg.epochs = 150;
  cfg.lr_transformer = 3e-3;
  cfg.lr_backbone = 3e-4;
  cfg.grad_clip = 1.0;

  const fs::path dir = fresh_dir("fscd_s1_overfit");
  const TrainResult res = train_stage1(train, {}, cfg, dir.string());

  // The objective collapses far below its initial value.
  CHECK(res.epoch_losses.back() < 0.25 * res.epoch_losses.front());

  // Boxes predicted at the exemplar centers land on the exemplar boxes.
  const Model model = load_model(res.best_checkpoint);
  std::vector<std::array<double, 2>> centers;
  for (const Box& b : train[0].exemplars) centers.push_back({b.cx, b.cy});
  const QueryPoints queries = make_query_points(centers, "exemplar-centers");
  const DetectorOutput out =
      run_model(model, train[0].image, train[0].exemplars, queries, 64);
  const std::vector<Box> decoded = decode_boxes(out, queries);
  double mean_iou = 0.0;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    mean_iou += iou(decoded[i], train[0].exemplars[i]);
  }
  mean_iou /= static_cast<double>(decoded.size());
  CHECK(mean_iou >= 0.5);
}

TEST_CASE("pseudo boxes stay paired with and close to their dots") {
  const auto data = small_dataset(3, 55);
  const Model model(tiny_model_config(), 3);

  const auto pseudo = generate_pseudo_boxes(model, data, 64);
  REQUIRE(pseudo.size() == data.size());
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    const auto& item = pseudo[i];
    CHECK(item.base.image_id == data[i].image_id);
    REQUIRE(item.pseudo_boxes.size() == data[i].dots.size());
    for (std::size_t d = 0; d < item.pseudo_boxes.size(); ++d) {
      const Box& b = item.pseudo_boxes[d];
      const double dist = std::hypot(b.cx - data[i].dots[d][0],
                                     b.cy - data[i].dots[d][1]);
      CHECK(dist <= 0.05 + 1e-12);
      CHECK(b.w > 0.0);
      CHECK(b.h > 0.0);
      CHECK(b.cx >= 0.0);
      CHECK(b.cx <= 1.0);
    }
  }
}

TEST_CASE("pseudo boxes follow their dots under reordering") {
  auto data = small_dataset(1, 14);
  REQUIRE(data[0].dots.size() >= 3);
  const auto forward = generate_pseudo_boxes({Model(tiny_model_config(), 3)},
                                             data, 64);

  AnnotatedImage reversed = data[0];
  std::reverse(reversed.dots.begin(), reversed.dots.end());
  if (reversed.gt_boxes.has_value()) {
    std::reverse(reversed.gt_boxes->begin(), reversed.gt_boxes->end());
  }
  const Model model(tiny_model_config(), 3);
  const auto back = generate_pseudo_boxes(model, {reversed}, 64);

  const auto& orig = forward[0].pseudo_boxes;
  const auto& rev = back[0].pseudo_boxes;
  REQUIRE(rev.size() == orig.size());
  const std::size_t n = orig.size();
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(rev[i].cx == doctest::Approx(orig[n - 1 - i].cx).epsilon(1e-9));
    CHECK(rev[i].cy == doctest::Approx(orig[n - 1 - i].cy).epsilon(1e-9));
    CHECK(rev[i].w == doctest::Approx(orig[n - 1 - i].w).epsilon(1e-9));
    CHECK(rev[i].h == doctest::Approx(orig[n - 1 - i].h).epsilon(1e-9));
  }
}

TEST_CASE("pseudo generation requires dot annotations") {
  auto data = small_dataset(1, 8);
  data[0].dots.clear();
  data[0].exemplars.clear();
  data[0].gt_boxes.reset();
  const Model model(tiny_model_config(), 3);
  CHECK_THROWS_AS(generate_pseudo_boxes(model, data, 64),
                  SchemaViolationError);
}

TEST_CASE("second-stage training resumes from a first-stage checkpoint") {
  const auto train = small_dataset(2, 40);
  TrainConfig cfg = small_train_config(16);
  cfg.epochs = 1;

  const fs::path s1_dir = fresh_dir("fscd_s2_seed1");
  const TrainResult s1 = train_stage1(train, {}, cfg, s1_dir.string());
  const Model m1 = load_model(s1.best_checkpoint);
  const auto pseudo = generate_pseudo_boxes(m1, train, 64);

  SUBCASE("losses are finite and the checkpoint records the second stage") {
    TrainConfig cfg2 = cfg;
    cfg2.epochs = 2;
    const fs::path dir = fresh_dir("fscd_s2_run");
    const TrainResult res =
        train_stage2(pseudo, train, s1.best_checkpoint, cfg2, dir.string());

    CHECK(res.epoch_losses.size() == 2);
    for (double l : res.epoch_losses) CHECK(std::isfinite(l));
    REQUIRE(res.val_mae.size() == 2);
    CHECK(fs::exists(dir / "epoch_002.ckpt"));
    const nlohmann::json meta = peek_checkpoint_meta(res.best_checkpoint);
    CHECK(meta.at("stage").get<int>() == 2);
    CHECK(meta.at("m").get<long>() == 16);
    CHECK(meta.at("uncertainty_kind").get<std::string>() == "laplace");

    // Resuming with the anchor count the checkpoint records is fine; any
    // other count is refused.
    TrainConfig resume = cfg2;
    resume.epochs = 1;
    const fs::path dir2 = fresh_dir("fscd_s2_resume");
    CHECK_NOTHROW(train_stage2(pseudo, {}, res.best_checkpoint, resume,
                               dir2.string()));
    TrainConfig wrong_m = resume;
    wrong_m.m = 25;
    wrong_m.model.detector.m = 25;
    CHECK_THROWS_AS(train_stage2(pseudo, {}, res.best_checkpoint, wrong_m,
                                 dir2.string()),
                    ValueError);
  }

  SUBCASE("spread-free objectives also train") {
    for (const std::string kind : {"gaussian", "none"}) {
      TrainConfig cfg2 = cfg;
      cfg2.uncertainty_kind = kind;
      const fs::path dir = fresh_dir("fscd_s2_kind_" + kind);
      const TrainResult res =
          train_stage2(pseudo, {}, s1.best_checkpoint, cfg2, dir.string());
      CHECK(std::isfinite(res.epoch_losses.back()));
      const nlohmann::json meta = peek_checkpoint_meta(res.best_checkpoint);
      CHECK(meta.at("uncertainty_kind").get<std::string>() == kind);
    }
  }

  SUBCASE("images with more objects than anchors are refused") {
    TrainConfig tight = cfg;
    tight.m = 2;
    tight.model.detector.m = 2;
    const fs::path dir = fresh_dir("fscd_s2_tight");
    CHECK_THROWS_AS(
        train_stage2(pseudo, {}, s1.best_checkpoint, tight, dir.string()),
        ValueError);
  }

  SUBCASE("pseudo datasets must be complete and consistent") {
    const fs::path dir = fresh_dir("fscd_s2_badpseudo");
    CHECK_THROWS_AS(
        train_stage2({}, {}, s1.best_checkpoint, cfg, dir.string()),
        ValueError);

    auto empty_boxes = pseudo;
    empty_boxes[0].pseudo_boxes.clear();
    empty_boxes[0].base.dots.clear();
    CHECK_THROWS_AS(train_stage2(empty_boxes, {}, s1.best_checkpoint, cfg,
                                 dir.string()),
                    SchemaViolationError);

    auto short_boxes = pseudo;
    short_boxes[0].pseudo_boxes.pop_back();
    CHECK_THROWS_AS(train_stage2(short_boxes, {}, s1.best_checkpoint, cfg,
                                 dir.string()),
                    SchemaViolationError);
  }
}

TEST_CASE("predict keeps exactly the detections above the threshold") {
  const auto data = small_dataset(1, 62);
  const Model model(tiny_model_config(), 19);
  const QueryPoints anchors = make_anchor_points(9, "fixed-grid");

  const DetectorOutput raw =
      run_model(model, data[0].image, data[0].exemplars, anchors, 64);
  std::vector<double> scores(9);
  for (long i = 0; i < 9; ++i) scores[i] = raw.scores.value()[i];
  const double hi = *std::max_element(scores.begin(), scores.end());
  const double lo = *std::min_element(scores.begin(), scores.end());

  // Threshold at the maximum: nothing survives the strict comparison.
  const PredictionRecord none = predict(model, data[0].image,
                                        data[0].exemplars, anchors, hi,
                                        false, 0.5, 64);
  CHECK(none.count == 0);
  CHECK(none.boxes.empty());
  CHECK(none.scores.empty());

  // Threshold just below the minimum: every anchor survives.
  const PredictionRecord all = predict(model, data[0].image,
                                       data[0].exemplars, anchors,
                                       lo - 1e-9, false, 0.5, 64);
  CHECK(all.count == 9);
  CHECK(all.boxes.size() == 9);
  CHECK(all.scores.size() == 9);

  // An interior threshold keeps exactly the strictly-greater scores, and the
  // reported count always equals the number of surviving boxes.
  const double mid = 0.5 * (hi + lo);
  const PredictionRecord some = predict(model, data[0].image,
                                        data[0].exemplars, anchors, mid,
                                        false, 0.5, 64);
  long expected = 0;
  for (double s : scores) {
    if (s > mid) ++expected;
  }
  CHECK(some.count == expected);
  CHECK(static_cast<long>(some.boxes.size()) == some.count);
  for (double s : some.scores) CHECK(s > mid);
}

TEST_CASE("predict can suppress overlapping detections") {
  const auto data = small_dataset(1, 70);
  const Model model(tiny_model_config(), 5);
  const QueryPoints anchors = make_anchor_points(16, "fixed-grid");

  const PredictionRecord plain = predict(model, data[0].image,
                                         data[0].exemplars, anchors, 0.01,
                                         false, 0.5, 64);
  const PredictionRecord pruned = predict(model, data[0].image,
                                          data[0].exemplars, anchors, 0.01,
                                          true, 0.5, 64);
  CHECK(pruned.count <= plain.count);
  CHECK(pruned.count >= 1);
  // Survivors arrive ordered by score and pairwise below the overlap cap.
  for (std::size_t i = 1; i < pruned.scores.size(); ++i) {
    CHECK(pruned.scores[i] <= pruned.scores[i - 1]);
  }
  for (std::size_t i = 0; i < pruned.boxes.size(); ++i) {
    for (std::size_t j = i + 1; j < pruned.boxes.size(); ++j) {
      CHECK(iou(pruned.boxes[i], pruned.boxes[j]) <= 0.5 + 1e-12);
    }
  }
}

TEST_CASE("a reconstructed model reproduces the saved model's outputs") {
  const auto data = small_dataset(1, 29);
  const Model original(tiny_model_config(), 123);

  const fs::path dir = fresh_dir("fscd_load_model");
  fs::create_directories(dir);
  const std::string path = (dir / "manual.ckpt").string();
  nlohmann::json meta;
  meta["stage"] = 1;
  meta["model"] = model_config_to_json(original.cfg);
  meta["k"] = 3;
  save_checkpoint(path, original.params, meta);

  nlohmann::json loaded_meta;
  const Model loaded = load_model(path, &loaded_meta);
  CHECK(loaded_meta.at("stage").get<int>() == 1);
  CHECK(loaded_meta.at("k").get<long>() == 3);

  const QueryPoints anchors = make_anchor_points(9, "fixed-grid");
  const DetectorOutput a =
      run_model(original, data[0].image, data[0].exemplars, anchors, 64);
  const DetectorOutput b =
      run_model(loaded, data[0].image, data[0].exemplars, anchors, 64);
  for (long i = 0; i < 9; ++i) {
    CHECK(a.scores.value()[i] == b.scores.value()[i]);
  }
  for (long i = 0; i < 36; ++i) {
    CHECK(a.box_params.value()[i] == b.box_params.value()[i]);
    CHECK(a.log_sigma.value()[i] == b.log_sigma.value()[i]);
  }
}

TEST_CASE("load_model rejects unusable checkpoints") {
  CHECK_THROWS_AS(load_model("/nonexistent/model.ckpt"), MissingFileError);

  // A checkpoint without a recorded architecture cannot be reconstructed.
  const fs::path dir = fresh_dir("fscd_load_nometa");
  fs::create_directories(dir);
  const std::string path = (dir / "bare.ckpt").string();
  const Model model(tiny_model_config(), 1);
  save_checkpoint(path, model.params, nlohmann::json::object());
  CHECK_THROWS_AS(load_model(path), SchemaViolationError);
}

TEST_CASE("the full two-stage pipeline is reproducible end to end") {
  const auto train = small_dataset(3, 101);
  const auto probe = small_dataset(1, 202);

  auto run_once = [&](const std::string& tag) {
    TrainConfig cfg = small_train_config(16);
    cfg.epochs = 2;
    const fs::path s1 = fresh_dir("fscd_e2e_s1_" + tag);
    const fs::path s2 = fresh_dir("fscd_e2e_s2_" + tag);
    const TrainResult r1 = train_stage1(train, {}, cfg, s1.string());
    const Model m1 = load_model(r1.best_checkpoint);
    const auto pseudo = generate_pseudo_boxes(m1, train, cfg.max_image_side);
    const TrainResult r2 =
        train_stage2(pseudo, {}, r1.best_checkpoint, cfg, s2.string());
    const Model m2 = load_model(r2.best_checkpoint);
    const QueryPoints anchors = make_anchor_points(cfg.m, "fixed-grid");
    return predict(m2, probe[0].image, probe[0].exemplars, anchors, 0.4,
                   false, 0.5, cfg.max_image_side);
  };

  const PredictionRecord a = run_once("a");
  const PredictionRecord b = run_once("b");
  CHECK(a.count == b.count);
  REQUIRE(a.boxes.size() == b.boxes.size());
  for (std::size_t i = 0; i < a.boxes.size(); ++i) {
    CHECK(a.boxes[i].cx == b.boxes[i].cx);
    CHECK(a.boxes[i].cy == b.boxes[i].cy);
    CHECK(a.boxes[i].w == b.boxes[i].w);
    CHECK(a.boxes[i].h == b.boxes[i].h);
    CHECK(a.scores[i] == b.scores[i]);
  }
}
