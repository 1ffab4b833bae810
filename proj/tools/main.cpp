#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fscd/checkpoint.hpp"
#include "fscd/cli_support.hpp"
#include "fscd/config.hpp"
#include "fscd/datamodel.hpp"
#include "fscd/errors.hpp"
#include "fscd/log.hpp"
#include "fscd/manifest.hpp"
#include "fscd/metrics.hpp"
#include "fscd/pipeline.hpp"
#include "fscd/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  bool overwrite = false;
  std::optional<std::uint64_t> seed;
};

/// The config file (or defaults), then --set overrides, then --seed.
fscd::TrainConfig make_train_config(const GlobalArgs& g) {
  fscd::TrainConfig base;
  if (!g.config_path.empty()) base = fscd::load_train_config(g.config_path);
  json doc = fscd::train_config_to_json(base);

  bool touched_m = false, touched_detector_m = false;
  for (const auto& assignment : g.overrides) {
    fscd::apply_override(doc, assignment);
    if (assignment.rfind("m=", 0) == 0) touched_m = true;
    if (assignment.rfind("model.detector.m=", 0) == 0) {
      touched_detector_m = true;
    }
  }
  // `--set m=...` moves the recorded architecture with it unless the
  // architecture was pinned explicitly, mirroring the config-file shorthand.
  if (touched_m && !touched_detector_m) {
    doc["model"]["detector"]["m"] = doc["m"];
  }

  fscd::TrainConfig cfg = fscd::train_config_from_json(doc);
  if (g.seed.has_value()) cfg.seed = *g.seed;
  return cfg;
}

/// Out-dir contract shared by every command: the parent must already exist,
/// the directory itself is created, and non-empty targets need --overwrite.
void claim_out_dir(const GlobalArgs& g) {
  if (g.out.empty()) throw fscd::ValueError("--out is required");
  const fs::path parent = fs::absolute(g.out).parent_path();
  if (!fs::exists(parent)) {
    throw fscd::MissingFileError("parent directory does not exist: " +
                                 parent.string());
  }
  fscd::prepare_out_dir(g.out, g.overwrite);
}

void require_artifact(const std::string& path, const std::string& what,
                      const std::string& produce_hint) {
  if (!fs::exists(path)) {
    throw fscd::MissingPrerequisiteError(what + " not found at " + path +
                                         "; run " + produce_hint + " first");
  }
}

std::string pseudo_file_path(const std::string& given) {
  if (fs::is_directory(given)) {
    return (fs::path(given) / "pseudo_boxes.json").string();
  }
  return given;
}

void report_training(const fscd::TrainResult& res) {
  fscd::info("final training loss " +
             std::to_string(res.epoch_losses.back()));
  if (!res.val_mae.empty()) {
    fscd::info("best epoch " + std::to_string(res.best_epoch + 1) +
               " with validation MAE " +
               std::to_string(res.val_mae[static_cast<std::size_t>(
                   res.best_epoch)]));
  }
  fscd::info("best checkpoint: " + res.best_checkpoint);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_synth(const GlobalArgs& g, const std::string& spec_path) {
  fscd::SynthJobSpec job;
  if (!spec_path.empty()) job = fscd::load_synth_job(spec_path);
  if (g.seed.has_value()) job.scene.seed = *g.seed;

  claim_out_dir(g);
  fscd::RunManifest manifest;
  manifest.command = "synth";
  manifest.config = fscd::synth_job_to_json(job);
  manifest.seed = job.scene.seed;
  if (!spec_path.empty()) {
    manifest.inputs["spec"] = fscd::hash_file(spec_path);
  }
  fscd::write_manifest(g.out, manifest);

  const std::array<std::pair<std::string, long>, 3> splits{
      {{"train", job.train_images},
       {"val", job.val_images},
       {"test", job.test_images}}};
  for (std::size_t i = 0; i < splits.size(); ++i) {
    fscd::SyntheticSceneSpec spec = job.scene;
    spec.num_images = splits[i].second;
    spec.seed = job.scene.seed + i;
    spec.id_prefix = splits[i].first;
    const auto records = fscd::generate_synthetic(spec);
    fscd::save_dataset(records, g.out, splits[i].first);
    fscd::info("wrote " + std::to_string(records.size()) + " " +
               splits[i].first + " images");
  }
}

void cmd_train_stage1(const GlobalArgs& g, const std::string& data,
                      const std::string& train_split,
                      const std::string& val_split) {
  const std::string root = fscd::resolve_data_root(data);
  const fscd::TrainConfig cfg = make_train_config(g);
  const auto train = fscd::load_dataset(root, train_split, cfg.k, true);
  std::vector<fscd::AnnotatedImage> val;
  if (!val_split.empty()) {
    val = fscd::load_dataset(root, val_split, cfg.k, true);
  }

  claim_out_dir(g);
  fscd::RunManifest manifest;
  manifest.command = "train-stage1";
  manifest.config = fscd::train_config_to_json(cfg);
  manifest.seed = cfg.seed;
  manifest.inputs["dataset"] = fscd::hash_tree(root);
  fscd::write_manifest(g.out, manifest);

  const fscd::TrainResult res = fscd::train_stage1(train, val, cfg, g.out);
  report_training(res);
}

void cmd_pseudo_gen(const GlobalArgs& g, const std::string& data,
                    const std::string& split, const std::string& ckpt) {
  require_artifact(ckpt, "stage-1 checkpoint", "train-stage1");
  const std::string root = fscd::resolve_data_root(data);
  const fscd::TrainConfig cfg = make_train_config(g);

  json meta;
  const fscd::Model model = fscd::load_model(ckpt, &meta);
  const long k = meta.value("k", cfg.k);
  const auto dataset = fscd::load_dataset(root, split, k, true);

  claim_out_dir(g);
  fscd::RunManifest manifest;
  manifest.command = "pseudo-gen";
  manifest.config = fscd::train_config_to_json(cfg);
  manifest.seed = cfg.seed;
  manifest.inputs["dataset"] = fscd::hash_tree(root);
  manifest.inputs["checkpoint"] = fscd::hash_file(ckpt);
  fscd::write_manifest(g.out, manifest);

  const auto pseudo =
      fscd::generate_pseudo_boxes(model, dataset, cfg.max_image_side);
  fscd::save_pseudo_boxes(pseudo,
                          (fs::path(g.out) / "pseudo_boxes.json").string());
  fscd::info("wrote pseudo boxes for " + std::to_string(pseudo.size()) +
             " images");
}

void cmd_train_stage2(const GlobalArgs& g, const std::string& data,
                      const std::string& train_split,
                      const std::string& val_split, const std::string& ckpt,
                      const std::string& pseudo) {
  require_artifact(ckpt, "stage-1 checkpoint", "train-stage1");
  const std::string pseudo_file = pseudo_file_path(pseudo);
  require_artifact(pseudo_file, "pseudo boxes", "pseudo-gen");

  const std::string root = fscd::resolve_data_root(data);
  const fscd::TrainConfig cfg = make_train_config(g);
  const auto train = fscd::load_dataset(root, train_split, cfg.k, true);
  std::vector<fscd::AnnotatedImage> val;
  if (!val_split.empty()) {
    val = fscd::load_dataset(root, val_split, cfg.k, true);
  }
  const auto pseudo_set = fscd::load_pseudo_boxes(pseudo_file, train);

  claim_out_dir(g);
  fscd::RunManifest manifest;
  manifest.command = "train-stage2";
  manifest.config = fscd::train_config_to_json(cfg);
  manifest.seed = cfg.seed;
  manifest.inputs["dataset"] = fscd::hash_tree(root);
  manifest.inputs["stage1_checkpoint"] = fscd::hash_file(ckpt);
  manifest.inputs["pseudo_boxes"] = fscd::hash_file(pseudo_file);
  fscd::write_manifest(g.out, manifest);

  const fscd::TrainResult res =
      fscd::train_stage2(pseudo_set, val, ckpt, cfg, g.out);
  report_training(res);
}

std::vector<fscd::PredictionRecord> predict_split(
    const fscd::Model& model, const json& meta,
    const std::vector<fscd::AnnotatedImage>& dataset,
    const fscd::TrainConfig& cfg) {
  const long m = meta.value("m", cfg.m);
  const fscd::QueryPoints anchors =
      fscd::make_anchor_points(m, "fixed-grid");
  std::vector<fscd::PredictionRecord> preds;
  preds.reserve(dataset.size());
  for (const auto& record : dataset) {
    fscd::PredictionRecord rec = fscd::predict(
        model, record.image, record.exemplars, anchors, cfg.score_threshold,
        cfg.use_nms, cfg.nms_iou, cfg.max_image_side);
    rec.image_id = record.image_id;
    preds.push_back(std::move(rec));
  }
  return preds;
}

void cmd_evaluate(const GlobalArgs& g, const std::string& data,
                  const std::string& split, const std::string& ckpt,
                  const std::string& pred_path) {
  const std::string root = fscd::resolve_data_root(data);
  const fscd::TrainConfig cfg = make_train_config(g);

  std::vector<fscd::PredictionRecord> preds;
  fscd::RunManifest manifest;
  manifest.command = "evaluate";
  manifest.seed = cfg.seed;
  manifest.inputs["dataset"] = fscd::hash_tree(root);

  std::vector<fscd::AnnotatedImage> gt;
  bool predictions_generated = false;
  if (!pred_path.empty()) {
    require_artifact(pred_path, "predictions file", "predict");
    gt = fscd::load_dataset(root, split, cfg.k, false);
    preds = fscd::load_predictions(pred_path);
    manifest.inputs["predictions"] = fscd::hash_file(pred_path);
  } else {
    require_artifact(ckpt, "model checkpoint", "train-stage2");
    json meta;
    const fscd::Model model = fscd::load_model(ckpt, &meta);
    gt = fscd::load_dataset(root, split, meta.value("k", cfg.k), true);
    preds = predict_split(model, meta, gt, cfg);
    manifest.inputs["checkpoint"] = fscd::hash_file(ckpt);
    predictions_generated = true;
  }

  const fscd::EvalReport report = fscd::evaluate_predictions(gt, preds);

  claim_out_dir(g);
  manifest.config = fscd::train_config_to_json(cfg);
  fscd::write_manifest(g.out, manifest);
  if (predictions_generated) {
    fscd::save_predictions(
        preds, (fs::path(g.out) / "predictions.json").string());
  }
  {
    std::ofstream out(fs::path(g.out) / "eval_report.json");
    out << fscd::eval_report_to_json(report) << "\n";
  }
  std::cout << fscd::format_eval_report(report);
}

void cmd_predict(const GlobalArgs& g, const std::string& data,
                 const std::string& split, const std::string& image_id,
                 const std::string& ckpt, bool render) {
  require_artifact(ckpt, "model checkpoint", "train-stage2");
  const std::string root = fscd::resolve_data_root(data);
  const fscd::TrainConfig cfg = make_train_config(g);

  json meta;
  const fscd::Model model = fscd::load_model(ckpt, &meta);
  auto dataset = fscd::load_dataset(root, split, meta.value("k", cfg.k), true);
  if (!image_id.empty()) {
    std::vector<fscd::AnnotatedImage> filtered;
    for (auto& record : dataset) {
      if (record.image_id == image_id) filtered.push_back(std::move(record));
    }
    if (filtered.empty()) {
      throw fscd::ValueError("image id '" + image_id + "' not in split '" +
                             split + "'");
    }
    dataset = std::move(filtered);
  }

  claim_out_dir(g);
  fscd::RunManifest manifest;
  manifest.command = "predict";
  manifest.config = fscd::train_config_to_json(cfg);
  manifest.seed = cfg.seed;
  manifest.inputs["dataset"] = fscd::hash_tree(root);
  manifest.inputs["checkpoint"] = fscd::hash_file(ckpt);
  fscd::write_manifest(g.out, manifest);

  const auto preds = predict_split(model, meta, dataset, cfg);
  fscd::save_predictions(preds,
                         (fs::path(g.out) / "predictions.json").string());

  long total = 0;
  for (const auto& rec : preds) total += rec.count;
  fscd::info("predicted " + std::to_string(total) + " objects across " +
             std::to_string(preds.size()) + " images");

  if (render) {
    const fs::path render_dir = fs::path(g.out) / "render";
    fs::create_directories(render_dir);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const fscd::Image canvas =
          fscd::render_prediction(dataset[i], preds[i]);
      fscd::save_ppm(canvas,
                     (render_dir / (preds[i].image_id + ".ppm")).string());
    }
    fscd::info("rendered overlays into " + render_dir.string());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"exemplar-conditioned object counting and detection"};
  app.require_subcommand(1);

  GlobalArgs g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config_path,
                 "JSON config file with training settings");
  app.add_option("--set", g.overrides,
                 "dotted config override, e.g. --set weights.lambda4=0")
      ->take_all();
  app.add_option("--out", g.out, "output directory for this command");
  app.add_flag("--overwrite", g.overwrite,
               "replace existing results in --out");
  auto* seed_opt =
      app.add_option("--seed", seed_value, "seed override for this run");

  std::string spec_path, data, train_split = "train", val_split = "val";
  std::string split = "test", image_id, ckpt, pred_path, pseudo;
  bool render = false;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->fallthrough();
  synth->add_option("--spec", spec_path, "scene spec JSON file");

  CLI::App* s1 = app.add_subcommand("train-stage1",
                                    "train with exemplar-center queries");
  s1->fallthrough();
  s1->add_option("--data", data, "dataset root (default: FSCD_DATA_ROOT)");
  s1->add_option("--train-split", train_split, "training split name");
  s1->add_option("--val-split", val_split,
                 "validation split name; empty disables validation");

  CLI::App* pg = app.add_subcommand("pseudo-gen",
                                    "predict one box per annotated dot");
  pg->fallthrough();
  pg->add_option("--data", data, "dataset root (default: FSCD_DATA_ROOT)");
  pg->add_option("--split", train_split, "split to pseudo-label")
      ->default_str("train");
  pg->add_option("--ckpt", ckpt, "stage-1 checkpoint")->required();

  CLI::App* s2 = app.add_subcommand("train-stage2",
                                    "train with fixed-lattice anchors");
  s2->fallthrough();
  s2->add_option("--data", data, "dataset root (default: FSCD_DATA_ROOT)");
  s2->add_option("--train-split", train_split, "training split name");
  s2->add_option("--val-split", val_split,
                 "validation split name; empty disables validation");
  s2->add_option("--ckpt", ckpt, "stage-1 checkpoint")->required();
  s2->add_option("--pseudo", pseudo,
                 "pseudo boxes file or the pseudo-gen output directory")
      ->required();

  CLI::App* ev = app.add_subcommand("evaluate",
                                    "counting and detection metrics");
  ev->fallthrough();
  ev->add_option("--data", data, "dataset root (default: FSCD_DATA_ROOT)");
  ev->add_option("--split", split, "split to evaluate");
  ev->add_option("--ckpt", ckpt, "model checkpoint to run");
  ev->add_option("--pred", pred_path,
                 "existing predictions JSON (skips the model)");

  CLI::App* pr = app.add_subcommand("predict", "write predictions for a split");
  pr->fallthrough();
  pr->add_option("--data", data, "dataset root (default: FSCD_DATA_ROOT)");
  pr->add_option("--split", split, "split to predict");
  pr->add_option("--image-id", image_id, "restrict to one image");
  pr->add_option("--ckpt", ckpt, "model checkpoint")->required();
  pr->add_flag("--render", render, "write overlay images");

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (synth->parsed()) {
      cmd_synth(g, spec_path);
    } else if (s1->parsed()) {
      cmd_train_stage1(g, data, train_split, val_split);
    } else if (pg->parsed()) {
      cmd_pseudo_gen(g, data, train_split, ckpt);
    } else if (s2->parsed()) {
      cmd_train_stage2(g, data, train_split, val_split, ckpt, pseudo);
    } else if (ev->parsed()) {
      if (ckpt.empty() && pred_path.empty()) {
        throw fscd::ValueError("evaluate needs --ckpt or --pred");
      }
      cmd_evaluate(g, data, split, ckpt, pred_path);
    } else if (pr->parsed()) {
      cmd_predict(g, data, split, image_id, ckpt, render);
    }
  } catch (const fscd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
