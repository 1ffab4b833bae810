#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "fscd/datamodel.hpp"
#include "fscd/detector.hpp"
#include "fscd/features.hpp"
#include "fscd/matching_losses.hpp"
#include "fscd/nn/optim.hpp"

namespace fscd {

/// Architecture of one complete model: backbone, exemplar-conditioned
/// projection, and the query-point detector. The detector's feature_dim must
/// equal the backbone's.
struct ModelConfig {
  BackboneConfig backbone;
  DetectorConfig detector;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
void validate_model_config(const ModelConfig& cfg);

/// Backbone + projection + detector with one flat named-parameter list
/// (backbone.*, aggregate.w_proj, detector.*).
struct Model {
  ModelConfig cfg;
  Backbone backbone;
  nn::Var w_proj;  // [2D, D]
  Detector detector;
  nn::ParamList params;

  Model(ModelConfig config, std::uint64_t seed);
};

/// Full forward pass for one image: backbone, exemplar pooling, aggregation,
/// detector over the given query points.
DetectorOutput run_model(const Model& model, const Image& image,
                         const std::vector<Box>& exemplars,
                         const QueryPoints& queries,
                         long max_image_side = 1024);

struct TrainConfig {
  long epochs = 30;
  long batch_size = 1;
  double lr_backbone = 1e-5;
  double lr_transformer = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;
  LossWeights weights;
  long k = 3;    // exemplars per image
  long m = 600;  // anchor queries for stage 2 / inference
  std::uint64_t seed = 0;
  double score_threshold = 0.5;
  std::string uncertainty_kind = "laplace";  // laplace | gaussian | none
  bool use_nms = false;
  double nms_iou = 0.5;
  long max_image_side = 1024;
  ModelConfig model;
};

void validate_train_config(const TrainConfig& cfg);

/// Scores-ignored box predictions at the annotated dots.
struct PseudoLabeledImage {
  AnnotatedImage base;
  std::vector<Box> pseudo_boxes;  // one per dot, center within 0.05 of it
};

struct TrainResult {
  std::vector<double> epoch_losses;  // mean loss per epoch
  std::vector<double> val_mae;       // per epoch; empty without a val split
  long best_epoch = -1;              // 0-based; epoch of best.ckpt
  std::string best_checkpoint;
  std::string last_checkpoint;
};

/// Stage 1: queries are the exemplar centers, paired one-to-one with the
/// exemplar boxes; no assignment step and no uncertainty term. Writes
/// epoch_NNN.ckpt per epoch plus best.ckpt (lowest validation MAE, or the
/// final epoch when `val` is empty) into out_dir.
TrainResult train_stage1(const std::vector<AnnotatedImage>& train,
                         const std::vector<AnnotatedImage>& val,
                         const TrainConfig& cfg, const std::string& out_dir);

/// One box per dot, predicted with the dots as queries; classification
/// scores are ignored. Box centers are pulled to within 0.05 normalized
/// units of their dot.
std::vector<PseudoLabeledImage> generate_pseudo_boxes(
    const Model& model, const std::vector<AnnotatedImage>& dataset,
    long max_image_side = 1024);

/// Stage 2: fixed-lattice anchor queries, Hungarian matching against the
/// pseudo boxes, score+box+uncertainty objective, initialized from the
/// stage-1 checkpoint. A checkpoint that records an anchor count different
/// from cfg.m is rejected.
TrainResult train_stage2(const std::vector<PseudoLabeledImage>& pseudo,
                         const std::vector<AnnotatedImage>& val,
                         const std::string& stage1_checkpoint,
                         const TrainConfig& cfg, const std::string& out_dir);

/// Thresholded detections plus the detection-based count (count = number of
/// kept boxes). Optional greedy NMS.
PredictionRecord predict(const Model& model, const Image& image,
                         const std::vector<Box>& exemplars,
                         const QueryPoints& anchors, double score_threshold,
                         bool use_nms = false, double nms_iou = 0.5,
                         long max_image_side = 1024);

/// Reconstructs the model recorded in a checkpoint, loads its weights, and
/// optionally hands back the checkpoint metadata.
Model load_model(const std::string& path, nlohmann::json* meta_out = nullptr);

}  // namespace fscd
