#include "fscd/config.hpp"

#include <fstream>
#include <set>

#include "fscd/errors.hpp"

namespace fscd {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (known.find(it.key()) == known.end()) {
      throw SchemaViolationError("config: unknown key '" + where + it.key() +
                                 "'");
    }
  }
}

template <typename T>
void pull(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("config file not found: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw SchemaViolationError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) {
    throw SchemaViolationError("config file " + path +
                               ": top level must be a JSON object");
  }
  return j;
}

}  // namespace

json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr_backbone"] = cfg.lr_backbone;
  j["lr_transformer"] = cfg.lr_transformer;
  j["weight_decay"] = cfg.weight_decay;
  j["grad_clip"] = cfg.grad_clip;
  j["weights"] = {{"lambda1", cfg.weights.lambda1},
                  {"lambda2", cfg.weights.lambda2},
                  {"lambda3", cfg.weights.lambda3},
                  {"lambda4", cfg.weights.lambda4}};
  j["k"] = cfg.k;
  j["m"] = cfg.m;
  j["seed"] = cfg.seed;
  j["score_threshold"] = cfg.score_threshold;
  j["uncertainty_kind"] = cfg.uncertainty_kind;
  j["use_nms"] = cfg.use_nms;
  j["nms_iou"] = cfg.nms_iou;
  j["max_image_side"] = cfg.max_image_side;
  j["model"] = model_config_to_json(cfg.model);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) {
    throw SchemaViolationError("config: top level must be a JSON object");
  }
  reject_unknown_keys(
      j,
      {"epochs", "batch_size", "lr_backbone", "lr_transformer",
       "weight_decay", "grad_clip", "weights", "k", "m", "seed",
       "score_threshold", "uncertainty_kind", "use_nms", "nms_iou",
       "max_image_side", "model"},
      "");

  TrainConfig cfg;
  pull(j, "epochs", cfg.epochs);
  pull(j, "batch_size", cfg.batch_size);
  pull(j, "lr_backbone", cfg.lr_backbone);
  pull(j, "lr_transformer", cfg.lr_transformer);
  pull(j, "weight_decay", cfg.weight_decay);
  pull(j, "grad_clip", cfg.grad_clip);
  if (j.contains("weights")) {
    const json& w = j.at("weights");
    reject_unknown_keys(w, {"lambda1", "lambda2", "lambda3", "lambda4"},
                        "weights.");
    pull(w, "lambda1", cfg.weights.lambda1);
    pull(w, "lambda2", cfg.weights.lambda2);
    pull(w, "lambda3", cfg.weights.lambda3);
    pull(w, "lambda4", cfg.weights.lambda4);
  }
  pull(j, "k", cfg.k);
  pull(j, "m", cfg.m);
  pull(j, "seed", cfg.seed);
  pull(j, "score_threshold", cfg.score_threshold);
  pull(j, "uncertainty_kind", cfg.uncertainty_kind);
  pull(j, "use_nms", cfg.use_nms);
  pull(j, "nms_iou", cfg.nms_iou);
  pull(j, "max_image_side", cfg.max_image_side);
  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown_keys(m, {"backbone", "detector"}, "model.");
    if (m.contains("backbone")) {
      const json& b = m.at("backbone");
      reject_unknown_keys(b, {"kind", "stride", "feature_dim"},
                          "model.backbone.");
      pull(b, "kind", cfg.model.backbone.kind);
      pull(b, "stride", cfg.model.backbone.stride);
      pull(b, "feature_dim", cfg.model.backbone.feature_dim);
    }
    if (m.contains("detector")) {
      const json& d = m.at("detector");
      reject_unknown_keys(d,
                          {"num_encoder_layers", "num_decoder_layers",
                           "feature_dim", "num_heads", "m", "anchor_kind",
                           "ffn_dim"},
                          "model.detector.");
      pull(d, "num_encoder_layers", cfg.model.detector.num_encoder_layers);
      pull(d, "num_decoder_layers", cfg.model.detector.num_decoder_layers);
      pull(d, "feature_dim", cfg.model.detector.feature_dim);
      pull(d, "num_heads", cfg.model.detector.num_heads);
      pull(d, "m", cfg.model.detector.m);
      pull(d, "anchor_kind", cfg.model.detector.anchor_kind);
      pull(d, "ffn_dim", cfg.model.detector.ffn_dim);
    }
  }
  // The anchor lattice used at train/predict time and the one recorded in
  // the detector architecture stay in lockstep unless the file pins both.
  if (j.contains("m") &&
      !(j.contains("model") && j.at("model").contains("detector") &&
        j.at("model").at("detector").contains("m"))) {
    cfg.model.detector.m = cfg.m;
  }
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  return train_config_from_json(read_json_file(path));
}

void apply_override(json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValueError("override '" + assignment +
                     "' is not of the form key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(
        start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) {
      throw ValueError("override '" + assignment + "' has an empty key part");
    }
    if (dot == std::string::npos) {
      // Numbers, booleans, arrays parse as JSON; anything unparsable is
      // taken as a plain string so `kind=gaussian` works unquoted.
      json value;
      try {
        value = json::parse(raw);
      } catch (const json::exception&) {
        value = raw;
      }
      (*node)[key] = value;
      return;
    }
    node = &((*node)[key]);
    if (!node->is_object() && !node->is_null()) {
      throw ValueError("override '" + assignment + "': '" +
                       path.substr(0, dot) + "' is not an object");
    }
    start = dot + 1;
  }
}

json synth_job_to_json(const SynthJobSpec& job) {
  json j;
  j["train_images"] = job.train_images;
  j["val_images"] = job.val_images;
  j["test_images"] = job.test_images;
  j["classes_per_image"] = job.scene.classes_per_image;
  j["instances_per_class"] = job.scene.instances_per_class;
  j["shape_vocabulary"] = job.scene.shape_vocabulary;
  j["size_jitter"] = job.scene.size_jitter;
  j["seed"] = job.scene.seed;
  j["canvas_width"] = job.scene.canvas_width;
  j["canvas_height"] = job.scene.canvas_height;
  j["exemplars_k"] = job.scene.exemplars_k;
  j["base_size_frac"] = job.scene.base_size_frac;
  return j;
}

SynthJobSpec synth_job_from_json(const json& j) {
  if (!j.is_object()) {
    throw SchemaViolationError("synth spec: top level must be a JSON object");
  }
  reject_unknown_keys(j,
                      {"train_images", "val_images", "test_images",
                       "classes_per_image", "instances_per_class",
                       "shape_vocabulary", "size_jitter", "seed",
                       "canvas_width", "canvas_height", "exemplars_k",
                       "base_size_frac"},
                      "");
  SynthJobSpec job;
  pull(j, "train_images", job.train_images);
  pull(j, "val_images", job.val_images);
  pull(j, "test_images", job.test_images);
  pull(j, "classes_per_image", job.scene.classes_per_image);
  pull(j, "instances_per_class", job.scene.instances_per_class);
  pull(j, "shape_vocabulary", job.scene.shape_vocabulary);
  pull(j, "size_jitter", job.scene.size_jitter);
  pull(j, "seed", job.scene.seed);
  pull(j, "canvas_width", job.scene.canvas_width);
  pull(j, "canvas_height", job.scene.canvas_height);
  pull(j, "exemplars_k", job.scene.exemplars_k);
  pull(j, "base_size_frac", job.scene.base_size_frac);
  return job;
}

SynthJobSpec load_synth_job(const std::string& path) {
  return synth_job_from_json(read_json_file(path));
}

}  // namespace fscd
