#include "fscd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "fscd/checkpoint.hpp"
#include "fscd/errors.hpp"
#include "fscd/log.hpp"

namespace fscd {

namespace {

using nn::Tensor;
using nn::Var;

std::string epoch_filename(long epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03ld.ckpt", epoch + 1);
  return buf;
}

/// He-style init for the aggregation projection, named like a model layer.
Var make_w_proj(long d, std::uint64_t seed) {
  nn::Rng rng(seed);
  const double scale = std::sqrt(2.0 / static_cast<double>(2 * d));
  return Var::leaf(Tensor::randn({2 * d, d}, rng, scale), true);
}

QueryPoints exemplar_center_queries(const AnnotatedImage& img) {
  std::vector<std::array<double, 2>> pts;
  pts.reserve(img.exemplars.size());
  for (const Box& b : img.exemplars) pts.push_back({b.cx, b.cy});
  return make_query_points(pts, "exemplar-centers");
}

QueryPoints dot_queries(const AnnotatedImage& img) {
  std::vector<std::array<double, 2>> pts;
  pts.reserve(img.dots.size());
  for (const auto& d : img.dots) pts.push_back({d[0], d[1]});
  return make_query_points(pts, "dot-annotations");
}

/// Two-group optimizer: backbone parameters at lr_backbone, everything else
/// (projection, detector) at lr_transformer.
nn::AdamW make_optimizer(Model& model, const TrainConfig& cfg) {
  nn::ParamList backbone_group, transformer_group;
  for (const auto& p : model.params) {
    if (p.name.rfind("tiny.", 0) == 0 || p.name.rfind("resnet.", 0) == 0 ||
        p.name.rfind("fpn.", 0) == 0) {
      backbone_group.push_back(p);
    } else {
      transformer_group.push_back(p);
    }
  }
  return nn::AdamW({{std::move(backbone_group), cfg.lr_backbone,
                     cfg.weight_decay},
                    {std::move(transformer_group), cfg.lr_transformer,
                     cfg.weight_decay}});
}

double validation_mae(const Model& model, const std::vector<AnnotatedImage>& val,
                      const QueryPoints& anchors, const TrainConfig& cfg) {
  double total = 0.0;
  for (const auto& img : val) {
    const PredictionRecord rec =
        predict(model, img.image, img.exemplars, anchors,
                cfg.score_threshold, cfg.use_nms, cfg.nms_iou,
                cfg.max_image_side);
    total += std::abs(static_cast<double>(rec.count) -
                      static_cast<double>(img.dots.size()));
  }
  return total / static_cast<double>(val.size());
}

struct EpochCheckpointer {
  std::filesystem::path dir;
  double best_metric = std::numeric_limits<double>::infinity();
  long best_epoch = -1;
  std::string best_path;
  std::string last_path;

  explicit EpochCheckpointer(const std::string& out_dir) : dir(out_dir) {
    std::filesystem::create_directories(dir);
  }

  /// Writes the per-epoch checkpoint; tracks the best metric (lower wins)
  /// and mirrors its weights into best.ckpt.
  void save(const Model& model, nlohmann::json meta, long epoch,
            double metric, bool metric_valid) {
    meta["epoch"] = epoch + 1;
    const std::string path = (dir / epoch_filename(epoch)).string();
    save_checkpoint(path, model.params, meta);
    last_path = path;
    const bool better = metric_valid ? metric < best_metric : true;
    if (better) {
      best_metric = metric_valid ? metric : best_metric;
      best_epoch = epoch;
      best_path = (dir / "best.ckpt").string();
      meta["best_metric"] =
          metric_valid ? nlohmann::json(metric) : nlohmann::json();
      save_checkpoint(best_path, model.params, meta);
    }
  }
};

void check_stage1_dataset(const std::vector<AnnotatedImage>& train,
                          const TrainConfig& cfg) {
  if (train.empty()) {
    throw ValueError("train_stage1: the training dataset is empty");
  }
  for (const auto& img : train) {
    validate_annotated_image(img);
    if (static_cast<long>(img.exemplars.size()) != cfg.k) {
      throw SchemaViolationError(
          "train_stage1: image '" + img.image_id + "' has " +
          std::to_string(img.exemplars.size()) + " exemplars, config needs " +
          std::to_string(cfg.k));
    }
  }
}

TargetSet exemplar_targets(const AnnotatedImage& img) {
  TargetSet t;
  t.boxes = img.exemplars;
  return t;
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["backbone"] = {{"kind", cfg.backbone.kind},
                   {"stride", cfg.backbone.stride},
                   {"feature_dim", cfg.backbone.feature_dim}};
  j["detector"] = {{"num_encoder_layers", cfg.detector.num_encoder_layers},
                   {"num_decoder_layers", cfg.detector.num_decoder_layers},
                   {"feature_dim", cfg.detector.feature_dim},
                   {"num_heads", cfg.detector.num_heads},
                   {"m", cfg.detector.m},
                   {"anchor_kind", cfg.detector.anchor_kind},
                   {"ffn_dim", cfg.detector.ffn_dim}};
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  const auto& b = j.at("backbone");
  cfg.backbone.kind = b.at("kind").get<std::string>();
  cfg.backbone.stride = b.at("stride").get<long>();
  cfg.backbone.feature_dim = b.at("feature_dim").get<long>();
  const auto& d = j.at("detector");
  cfg.detector.num_encoder_layers = d.at("num_encoder_layers").get<long>();
  cfg.detector.num_decoder_layers = d.at("num_decoder_layers").get<long>();
  cfg.detector.feature_dim = d.at("feature_dim").get<long>();
  cfg.detector.num_heads = d.at("num_heads").get<long>();
  cfg.detector.m = d.at("m").get<long>();
  cfg.detector.anchor_kind = d.at("anchor_kind").get<std::string>();
  cfg.detector.ffn_dim = d.at("ffn_dim").get<long>();
  return cfg;
}

void validate_model_config(const ModelConfig& cfg) {
  if (cfg.backbone.feature_dim != cfg.detector.feature_dim) {
    throw ValueError(
        "model config: backbone feature_dim (" +
        std::to_string(cfg.backbone.feature_dim) +
        ") must equal detector feature_dim (" +
        std::to_string(cfg.detector.feature_dim) + ")");
  }
}

Model::Model(ModelConfig config, std::uint64_t seed)
    : cfg(std::move(config)),
      backbone(cfg.backbone, seed),
      w_proj(make_w_proj(cfg.backbone.feature_dim, seed ^ 0x9e3779b97f4a7c15ULL)),
      detector(cfg.detector, seed + 1) {
  validate_model_config(cfg);
  params = backbone.params();
  params.push_back({"aggregate.w_proj", w_proj});
  for (const auto& p : detector.params()) params.push_back(p);
}

DetectorOutput run_model(const Model& model, const Image& image,
                         const std::vector<Box>& exemplars,
                         const QueryPoints& queries, long max_image_side) {
  const Image resized = resize_longest_side(image, max_image_side);
  const BackboneMaps maps = model.backbone.forward(image_to_tensor(resized));
  const ExemplarFeature fb =
      extract_exemplar_feature(maps.exemplar_source, exemplars);
  const AggregatedMap fa = aggregate(maps.features, fb, model.w_proj);
  return model.detector.forward(fa, queries);
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ValueError("train config: epochs must be >= 1");
  if (cfg.batch_size < 1) {
    throw ValueError("train config: batch_size must be >= 1");
  }
  if (!(cfg.lr_backbone > 0.0) || !(cfg.lr_transformer > 0.0)) {
    throw ValueError("train config: learning rates must be positive");
  }
  if (cfg.weight_decay < 0.0 || cfg.grad_clip <= 0.0) {
    throw ValueError(
        "train config: weight_decay must be >= 0 and grad_clip > 0");
  }
  validate_weights(cfg.weights);
  if (cfg.k < 1) throw ValueError("train config: k must be >= 1");
  if (cfg.m < 1) throw ValueError("train config: m must be >= 1");
  if (!(cfg.score_threshold > 0.0 && cfg.score_threshold < 1.0)) {
    throw ValueError("train config: score_threshold must lie in (0, 1)");
  }
  if (cfg.uncertainty_kind != "laplace" && cfg.uncertainty_kind != "gaussian" &&
      cfg.uncertainty_kind != "none") {
    throw ValueError(
        "train config: uncertainty_kind must be laplace|gaussian|none");
  }
  if (cfg.max_image_side < 16) {
    throw ValueError("train config: max_image_side must be >= 16");
  }
  validate_model_config(cfg.model);
}

TrainResult train_stage1(const std::vector<AnnotatedImage>& train,
                         const std::vector<AnnotatedImage>& val,
                         const TrainConfig& cfg, const std::string& out_dir) {
  validate_train_config(cfg);
  check_stage1_dataset(train, cfg);

  Model model(cfg.model, cfg.seed);
  nn::AdamW opt = make_optimizer(model, cfg);
  nn::Rng shuffle_rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
  const QueryPoints anchors = make_anchor_points(cfg.m, "fixed-grid");
  EpochCheckpointer ckpt(out_dir);

  nlohmann::json meta;
  meta["stage"] = 1;
  meta["model"] = model_config_to_json(cfg.model);
  meta["k"] = cfg.k;
  meta["seed"] = cfg.seed;

  TrainResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    long since_step = 0;
    opt.zero_grad();
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const AnnotatedImage& img = train[order[rank]];
      const QueryPoints queries = exemplar_center_queries(img);
      const DetectorOutput out = run_model(model, img.image, img.exemplars,
                                           queries, cfg.max_image_side);
      const LossReport rep =
          combined_loss(out, queries, exemplar_targets(img), cfg.weights,
                        LossMode::kStage1);
      epoch_loss += rep.total_value;
      nn::backward(nn::mul_scalar(
          rep.total, 1.0 / static_cast<double>(cfg.batch_size)));
      if (++since_step == cfg.batch_size || rank + 1 == order.size()) {
        nn::clip_global_grad_norm(model.params, cfg.grad_clip);
        opt.step();
        opt.zero_grad();
        since_step = 0;
      }
    }
    result.epoch_losses.push_back(epoch_loss /
                                  static_cast<double>(train.size()));

    double metric = 0.0;
    bool metric_valid = false;
    if (!val.empty()) {
      metric = validation_mae(model, val, anchors, cfg);
      result.val_mae.push_back(metric);
      metric_valid = true;
    }
    ckpt.save(model, meta, epoch, metric, metric_valid);
  }
  result.best_epoch = ckpt.best_epoch;
  result.best_checkpoint = ckpt.best_path;
  result.last_checkpoint = ckpt.last_path;
  return result;
}

std::vector<PseudoLabeledImage> generate_pseudo_boxes(
    const Model& model, const std::vector<AnnotatedImage>& dataset,
    long max_image_side) {
  std::vector<PseudoLabeledImage> out;
  out.reserve(dataset.size());
  for (const auto& img : dataset) {
    if (img.dots.empty()) {
      throw SchemaViolationError("generate_pseudo_boxes: image '" +
                                 img.image_id + "' has no dot annotations");
    }
    const QueryPoints queries = dot_queries(img);
    const DetectorOutput pred = run_model(model, img.image, img.exemplars,
                                          queries, max_image_side);
    PseudoLabeledImage item;
    item.base = img;
    item.pseudo_boxes.reserve(img.dots.size());
    for (std::size_t i = 0; i < img.dots.size(); ++i) {
      const long row = static_cast<long>(i);
      double dx = pred.box_params.value()[row * 4 + 0];
      double dy = pred.box_params.value()[row * 4 + 1];
      // Pull the center to within 0.05 normalized units of the dot.
      const double norm = std::hypot(dx, dy);
      if (norm > 0.05) {
        dx *= 0.05 / norm;
        dy *= 0.05 / norm;
      }
      const double cx = std::clamp(img.dots[i][0] + dx, 0.0, 1.0);
      const double cy = std::clamp(img.dots[i][1] + dy, 0.0, 1.0);
      const double w =
          std::max(pred.box_params.value()[row * 4 + 2], 1e-4);
      const double h =
          std::max(pred.box_params.value()[row * 4 + 3], 1e-4);
      item.pseudo_boxes.emplace_back(cx, cy, w, h);
    }
    out.push_back(std::move(item));
  }
  return out;
}

TrainResult train_stage2(const std::vector<PseudoLabeledImage>& pseudo,
                         const std::vector<AnnotatedImage>& val,
                         const std::string& stage1_checkpoint,
                         const TrainConfig& cfg, const std::string& out_dir) {
  validate_train_config(cfg);
  if (pseudo.empty()) {
    throw ValueError("train_stage2: the pseudo-labeled dataset is empty");
  }
  for (const auto& item : pseudo) {
    if (item.pseudo_boxes.empty()) {
      throw SchemaViolationError("train_stage2: image '" +
                                 item.base.image_id +
                                 "' has no pseudo boxes");
    }
    if (item.pseudo_boxes.size() != item.base.dots.size()) {
      throw SchemaViolationError(
          "train_stage2: image '" + item.base.image_id + "' has " +
          std::to_string(item.pseudo_boxes.size()) + " pseudo boxes for " +
          std::to_string(item.base.dots.size()) + " dots");
    }
    if (static_cast<long>(item.pseudo_boxes.size()) > cfg.m) {
      throw ValueError("train_stage2: image '" + item.base.image_id +
                       "' has " + std::to_string(item.pseudo_boxes.size()) +
                       " objects but only " + std::to_string(cfg.m) +
                       " anchor queries; increase m");
    }
  }

  nlohmann::json init_meta;
  Model model = load_model(stage1_checkpoint, &init_meta);
  if (init_meta.contains("m") &&
      init_meta.at("m").get<long>() != cfg.m) {
    throw ValueError(
        "train_stage2: checkpoint was trained with m=" +
        std::to_string(init_meta.at("m").get<long>()) +
        " anchor queries but the config asks for m=" + std::to_string(cfg.m));
  }

  nn::AdamW opt = make_optimizer(model, cfg);
  nn::Rng shuffle_rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
  const QueryPoints anchors = make_anchor_points(cfg.m, "fixed-grid");
  EpochCheckpointer ckpt(out_dir);

  nlohmann::json meta;
  meta["stage"] = 2;
  meta["model"] = model_config_to_json(model.cfg);
  meta["k"] = cfg.k;
  meta["m"] = cfg.m;
  meta["uncertainty_kind"] = cfg.uncertainty_kind;
  meta["seed"] = cfg.seed;

  TrainResult result;
  std::vector<std::size_t> order(pseudo.size());
  std::iota(order.begin(), order.end(), 0);
  for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    long since_step = 0;
    opt.zero_grad();
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
      const PseudoLabeledImage& item = pseudo[order[rank]];
      const DetectorOutput out =
          run_model(model, item.base.image, item.base.exemplars, anchors,
                    cfg.max_image_side);
      TargetSet targets;
      targets.boxes = item.pseudo_boxes;
      const LossReport rep =
          combined_loss(out, anchors, targets, cfg.weights, LossMode::kStage2,
                        cfg.uncertainty_kind);
      epoch_loss += rep.total_value;
      nn::backward(nn::mul_scalar(
          rep.total, 1.0 / static_cast<double>(cfg.batch_size)));
      if (++since_step == cfg.batch_size || rank + 1 == order.size()) {
        nn::clip_global_grad_norm(model.params, cfg.grad_clip);
        opt.step();
        opt.zero_grad();
        since_step = 0;
      }
    }
    result.epoch_losses.push_back(epoch_loss /
                                  static_cast<double>(pseudo.size()));

    double metric = 0.0;
    bool metric_valid = false;
    if (!val.empty()) {
      metric = validation_mae(model, val, anchors, cfg);
      result.val_mae.push_back(metric);
      metric_valid = true;
    }
    ckpt.save(model, meta, epoch, metric, metric_valid);
  }
  result.best_epoch = ckpt.best_epoch;
  result.best_checkpoint = ckpt.best_path;
  result.last_checkpoint = ckpt.last_path;
  return result;
}

PredictionRecord predict(const Model& model, const Image& image,
                         const std::vector<Box>& exemplars,
                         const QueryPoints& anchors, double score_threshold,
                         bool use_nms, double nms_iou, long max_image_side) {
  const DetectorOutput out =
      run_model(model, image, exemplars, anchors, max_image_side);
  const std::vector<Box> decoded = decode_boxes(out, anchors);
  PredictionRecord rec;
  std::vector<Box> kept;
  std::vector<double> kept_scores;
  for (long i = 0; i < out.m(); ++i) {
    const double s = out.scores.value()[i];
    if (s > score_threshold) {
      kept.push_back(decoded[static_cast<std::size_t>(i)]);
      kept_scores.push_back(s);
    }
  }
  if (use_nms && !kept.empty()) {
    const auto keep_idx = nms_keep(kept, kept_scores, nms_iou);
    std::vector<Box> final_boxes;
    std::vector<double> final_scores;
    for (std::size_t idx : keep_idx) {
      final_boxes.push_back(kept[idx]);
      final_scores.push_back(kept_scores[idx]);
    }
    kept = std::move(final_boxes);
    kept_scores = std::move(final_scores);
  }
  rec.boxes = std::move(kept);
  rec.scores = std::move(kept_scores);
  rec.count = static_cast<long>(rec.boxes.size());
  return rec;
}

Model load_model(const std::string& path, nlohmann::json* meta_out) {
  const nlohmann::json meta = peek_checkpoint_meta(path);
  if (!meta.contains("model")) {
    throw SchemaViolationError("checkpoint " + path +
                               " does not record a model configuration");
  }
  Model model(model_config_from_json(meta.at("model")), /*seed=*/0);
  load_checkpoint(path, model.params);
  if (meta_out != nullptr) *meta_out = meta;
  return model;
}

}  // namespace fscd
