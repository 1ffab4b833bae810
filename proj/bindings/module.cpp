#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <array>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "fscd/checkpoint.hpp"
#include "fscd/config.hpp"
#include "fscd/errors.hpp"
#include "fscd/geometry.hpp"
#include "fscd/matching_losses.hpp"
#include "fscd/metrics.hpp"
#include "fscd/pipeline.hpp"
#include "fscd/synth.hpp"

namespace py = pybind11;

namespace {

using BoxTuple = std::array<double, 4>;

fscd::Box to_box(const BoxTuple& t) {
  return fscd::Box(t[0], t[1], t[2], t[3]);
}

BoxTuple from_box(const fscd::Box& b) { return {b.cx, b.cy, b.w, b.h}; }

fscd::Image to_image(long width, long height, const py::bytes& rgb) {
  const std::string buf = rgb;
  fscd::Image img(width, height);
  if (buf.size() != img.rgb.size()) {
    throw fscd::DimensionError("rgb buffer holds " +
                               std::to_string(buf.size()) + " bytes, image " +
                               std::to_string(width) + "x" +
                               std::to_string(height) + " needs " +
                               std::to_string(img.rgb.size()));
  }
  std::memcpy(img.rgb.data(), buf.data(), buf.size());
  return img;
}

/// Model handle exposed to Python: construct fresh or from a checkpoint,
/// save, and run thresholded prediction on raw RGB bytes.
struct PyModel {
  std::unique_ptr<fscd::Model> model;

  explicit PyModel(const std::string& config_json, std::uint64_t seed) {
    const auto doc = nlohmann::json::parse(config_json);
    model = std::make_unique<fscd::Model>(fscd::model_config_from_json(doc),
                                          seed);
  }

  explicit PyModel(const std::string& path) {
    model = std::make_unique<fscd::Model>(fscd::load_model(path));
  }

  void save(const std::string& path) const {
    nlohmann::json meta;
    meta["model"] = fscd::model_config_to_json(model->cfg);
    fscd::save_checkpoint(path, model->params, meta);
  }

  py::dict predict(long width, long height, const py::bytes& rgb,
                   const std::vector<BoxTuple>& exemplars, long m,
                   double score_threshold, bool use_nms, double nms_iou,
                   long max_image_side) const {
    const fscd::Image img = to_image(width, height, rgb);
    std::vector<fscd::Box> ex;
    ex.reserve(exemplars.size());
    for (const auto& t : exemplars) ex.push_back(to_box(t));
    const fscd::QueryPoints anchors =
        fscd::make_anchor_points(m, "fixed-grid");
    const fscd::PredictionRecord rec =
        fscd::predict(*model, img, ex, anchors, score_threshold, use_nms,
                      nms_iou, max_image_side);
    py::dict out;
    std::vector<BoxTuple> boxes;
    boxes.reserve(rec.boxes.size());
    for (const auto& b : rec.boxes) boxes.push_back(from_box(b));
    out["boxes"] = boxes;
    out["scores"] = rec.scores;
    out["count"] = rec.count;
    return out;
  }
};

}  // namespace

PYBIND11_MODULE(_fscd, mod) {
  mod.doc() = "exemplar-conditioned object counting and detection";

  py::register_exception<fscd::Error>(mod, "FscdError");

  mod.def(
      "iou",
      [](const BoxTuple& a, const BoxTuple& b) {
        return fscd::iou(to_box(a), to_box(b));
      },
      py::arg("a"), py::arg("b"),
      "Intersection over union of two (cx, cy, w, h) boxes.");

  mod.def(
      "giou",
      [](const BoxTuple& a, const BoxTuple& b) {
        return fscd::giou(to_box(a), to_box(b));
      },
      py::arg("a"), py::arg("b"),
      "Generalized IoU in [-1, 1] of two (cx, cy, w, h) boxes.");

  mod.def(
      "hungarian_match",
      [](const std::vector<std::vector<double>>& cost) {
        const long n = static_cast<long>(cost.size());
        const long t = n > 0 ? static_cast<long>(cost[0].size()) : 0;
        fscd::nn::Tensor mat({n, t});
        for (long i = 0; i < n; ++i) {
          if (static_cast<long>(cost[i].size()) != t) {
            throw fscd::DimensionError("cost rows have unequal lengths");
          }
          for (long j = 0; j < t; ++j) mat[i * t + j] = cost[i][j];
        }
        const fscd::MatchResult res = fscd::hungarian_match(mat);
        py::dict out;
        out["pairs"] = res.pairs;
        out["unmatched"] = res.unmatched_predictions;
        out["total_cost"] = res.total_cost;
        return out;
      },
      py::arg("cost"),
      "Minimum-cost assignment of columns (targets) to rows (predictions).");

  mod.def(
      "counting_errors",
      [](const std::vector<std::pair<long, long>>& pairs) {
        std::vector<fscd::CountPair> cp;
        cp.reserve(pairs.size());
        for (const auto& p : pairs) cp.push_back({p.first, p.second});
        const fscd::CountingErrors e = fscd::counting_errors(cp);
        py::dict out;
        out["mae"] = e.mae;
        out["rmse"] = e.rmse;
        out["nae"] = e.nae;
        out["sre"] = e.sre;
        return out;
      },
      py::arg("pairs"),
      "Counting metrics from (ground_truth, predicted) count pairs.");

  mod.def(
      "average_precision",
      [](const std::vector<
          std::tuple<std::vector<BoxTuple>, std::vector<double>,
                     std::vector<BoxTuple>>>& images) {
        std::vector<fscd::DetectionInstance> insts;
        insts.reserve(images.size());
        for (const auto& [boxes, scores, gt] : images) {
          fscd::DetectionInstance inst;
          for (const auto& b : boxes) inst.boxes.push_back(to_box(b));
          inst.scores = scores;
          for (const auto& b : gt) inst.gt.push_back(to_box(b));
          insts.push_back(std::move(inst));
        }
        const fscd::ApResult r = fscd::average_precision(insts);
        py::dict out;
        out["map"] = r.map;
        out["ap50"] = r.ap50;
        return out;
      },
      py::arg("images"),
      "Dataset-pooled AP from (boxes, scores, gt_boxes) per image.");

  mod.def(
      "make_anchor_points",
      [](long m) {
        const fscd::QueryPoints q = fscd::make_anchor_points(m, "fixed-grid");
        std::vector<std::pair<double, double>> pts;
        pts.reserve(q.m());
        const fscd::nn::Tensor coords = q.coords();
        for (long i = 0; i < q.m(); ++i) {
          pts.emplace_back(coords[i * 2 + 0], coords[i * 2 + 1]);
        }
        return pts;
      },
      py::arg("m"),
      "Centers of the near-square lattice of m anchor points.");

  mod.def(
      "generate_synthetic",
      [](long num_images, std::uint64_t seed, long canvas, long k) {
        fscd::SyntheticSceneSpec spec;
        spec.num_images = num_images;
        spec.seed = seed;
        spec.canvas_width = canvas;
        spec.canvas_height = canvas;
        spec.exemplars_k = k;
        spec.classes_per_image = {2, 2};
        spec.instances_per_class = {3, 6};
        const auto records = fscd::generate_synthetic(spec);
        py::list out;
        for (const auto& rec : records) {
          py::dict d;
          d["image_id"] = rec.image_id;
          d["width"] = rec.image.width;
          d["height"] = rec.image.height;
          d["rgb"] = py::bytes(
              reinterpret_cast<const char*>(rec.image.rgb.data()),
              rec.image.rgb.size());
          d["dots"] = rec.dots;
          std::vector<BoxTuple> ex;
          for (const auto& b : rec.exemplars) ex.push_back(from_box(b));
          d["exemplars"] = ex;
          std::vector<BoxTuple> gt;
          for (const auto& b : *rec.gt_boxes) gt.push_back(from_box(b));
          d["gt_boxes"] = gt;
          out.append(std::move(d));
        }
        return out;
      },
      py::arg("num_images") = 1, py::arg("seed") = 0, py::arg("canvas") = 64,
      py::arg("k") = 3,
      "Small crowded scenes with dots, exemplars, and ground-truth boxes.");

  py::class_<PyModel>(mod, "Model")
      .def(py::init<const std::string&, std::uint64_t>(),
           py::arg("config_json"), py::arg("seed") = 0,
           "Fresh model from an architecture JSON string.")
      .def_static(
          "load", [](const std::string& path) { return PyModel(path); },
          py::arg("path"), "Reconstruct a model from a checkpoint file.")
      .def("save", &PyModel::save, py::arg("path"),
           "Write the weights plus architecture to a checkpoint file.")
      .def("predict", &PyModel::predict, py::arg("width"), py::arg("height"),
           py::arg("rgb"), py::arg("exemplars"), py::arg("m") = 100,
           py::arg("score_threshold") = 0.5, py::arg("use_nms") = false,
           py::arg("nms_iou") = 0.5, py::arg("max_image_side") = 1024,
           "Thresholded detections for raw RGB bytes (row-major, 3 "
           "channels).");
}
