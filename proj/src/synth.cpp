#include "fscd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fscd/errors.hpp"

namespace fscd {

namespace {

using Rng = nn::Rng;

// splitmix64 finalizer: decorrelates per-image substreams of one seed.
std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

long rand_int(Rng& rng, long lo, long hi) {
  return std::uniform_int_distribution<long>(lo, hi)(rng);
}

double rand_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::uint8_t jitter_channel(Rng& rng, int base, int amount) {
  const int v = base + static_cast<int>(rand_int(rng, -amount, amount));
  return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
}

// One color family per class; the target class (index 0) is the warm red
// family so it stays visually distinct from distractors.
constexpr int kFamilies[][3] = {
    {195, 60, 55},   // red (target)
    {60, 95, 200},   // blue
    {70, 170, 90},   // green
    {205, 180, 70},  // yellow
    {150, 80, 185},  // purple
    {70, 180, 190},  // cyan
};
constexpr int kNumFamilies = 6;

enum class ShapeKind { Rect, Ellipse, Triangle };

ShapeKind parse_kind(const std::string& name) {
  if (name == "rect") return ShapeKind::Rect;
  if (name == "ellipse") return ShapeKind::Ellipse;
  if (name == "triangle") return ShapeKind::Triangle;
  throw ValueError("shape_vocabulary: unknown kind '" + name + "'");
}

struct Placed {
  Box box;  // normalized
  long cls;
  ShapeKind kind;
  Rgb color;
};

// Same-class shapes must stay clearly separable; cross-class occlusion is
// allowed but bounded so every object stays visible.
constexpr double kSameClassIouCap = 0.45;
constexpr double kCrossClassIouCap = 0.60;
constexpr int kTriesPerInstance = 250;

void render_scene(Image& img, const std::vector<Placed>& shapes, Rng& rng) {
  // Flat dark base with additive clutter: a few dim blobs, then pixel noise.
  fill_rect(img, 0, 0, img.width - 1, img.height - 1, {30, 32, 36});
  const long n_blobs = rand_int(rng, 3, 6);
  for (long i = 0; i < n_blobs; ++i) {
    const double cx = rand_real(rng, 0.0, static_cast<double>(img.width));
    const double cy = rand_real(rng, 0.0, static_cast<double>(img.height));
    const double r = rand_real(rng, 4.0, static_cast<double>(img.width) / 5.0);
    const std::uint8_t g = static_cast<std::uint8_t>(rand_int(rng, 42, 62));
    fill_ellipse(img, cx, cy, r, r * rand_real(rng, 0.6, 1.4), {g, g, g});
  }
  std::uniform_int_distribution<int> noise(-10, 10);
  for (auto& byte : img.rgb) {
    byte = static_cast<std::uint8_t>(
        std::clamp(static_cast<int>(byte) + noise(rng), 0, 255));
  }
  // Draw distractor classes first, the target class last, so targets are
  // never fully occluded.
  for (int pass = 1; pass >= 0; --pass) {
    for (const Placed& p : shapes) {
      if ((pass == 1) != (p.cls != 0)) continue;
      const CornerBox c = to_corners(p.box);
      const long x0 = std::lround(c.x1 * img.width);
      const long y0 = std::lround(c.y1 * img.height);
      const long x1 = std::lround(c.x2 * img.width) - 1;
      const long y1 = std::lround(c.y2 * img.height) - 1;
      switch (p.kind) {
        case ShapeKind::Rect:
          fill_rect(img, x0, y0, x1, y1, p.color);
          break;
        case ShapeKind::Ellipse:
          fill_ellipse(img, p.box.cx * img.width, p.box.cy * img.height,
                       p.box.w * img.width / 2.0, p.box.h * img.height / 2.0,
                       p.color);
          break;
        case ShapeKind::Triangle:
          fill_triangle(img, x0, y0, x1, y1, p.color);
          break;
      }
    }
  }
}

AnnotatedImage generate_one(const SyntheticSceneSpec& spec, long index) {
  Rng rng(mix(spec.seed, static_cast<std::uint64_t>(index)));
  const double min_side =
      static_cast<double>(std::min(spec.canvas_width, spec.canvas_height));
  const long n_classes =
      rand_int(rng, spec.classes_per_image[0], spec.classes_per_image[1]);

  std::vector<Placed> shapes;
  std::vector<long> target_indices;  // into `shapes`
  for (long cls = 0; cls < n_classes; ++cls) {
    const ShapeKind kind = parse_kind(spec.shape_vocabulary[static_cast<std::size_t>(
        rand_int(rng, 0, static_cast<long>(spec.shape_vocabulary.size()) - 1))]);
    const int* fam = kFamilies[cls % kNumFamilies];
    const double base = spec.base_size_frac * min_side *
                        rand_real(rng, 0.9, 1.1);
    const long count =
        rand_int(rng, spec.instances_per_class[0], spec.instances_per_class[1]);
    for (long i = 0; i < count; ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < kTriesPerInstance; ++attempt) {
        const double wpx = base * rand_real(rng, spec.size_jitter[0],
                                            spec.size_jitter[1]);
        const double hpx = base * rand_real(rng, spec.size_jitter[0],
                                            spec.size_jitter[1]);
        const double w = wpx / static_cast<double>(spec.canvas_width);
        const double h = hpx / static_cast<double>(spec.canvas_height);
        if (w >= 1.0 || h >= 1.0) continue;
        const double cx = rand_real(rng, w / 2, 1.0 - w / 2);
        const double cy = rand_real(rng, h / 2, 1.0 - h / 2);
        const Box cand(cx, cy, w, h);
        bool ok = true;
        for (const Placed& other : shapes) {
          const double overlap = iou(cand, other.box);
          const double cap =
              (other.cls == cls) ? kSameClassIouCap : kCrossClassIouCap;
          if (overlap >= cap) {
            ok = false;
            break;
          }
        }
        if (ok) {
          Rgb color = {jitter_channel(rng, fam[0], 25),
                       jitter_channel(rng, fam[1], 25),
                       jitter_channel(rng, fam[2], 25)};
          if (cls == 0) {
            target_indices.push_back(static_cast<long>(shapes.size()));
          }
          shapes.push_back({cand, cls, kind, color});
          placed = true;
          break;
        }
      }
      if (!placed) {
        throw InfeasibleSpecError(
            "generate_synthetic: could not place instance " +
            std::to_string(i) + " of class " + std::to_string(cls) +
            " in image " + std::to_string(index) + " within " +
            std::to_string(kTriesPerInstance) + " tries; reduce instance "
            "counts or shape size");
      }
    }
  }

  AnnotatedImage rec;
  char id[64];
  std::snprintf(id, sizeof(id), "%s_%06ld", spec.id_prefix.c_str(), index);
  rec.image_id = id;
  rec.image = Image(spec.canvas_width, spec.canvas_height);
  render_scene(rec.image, shapes, rng);

  std::vector<Box> gt;
  for (long idx : target_indices) {
    const Box& b = shapes[static_cast<std::size_t>(idx)].box;
    rec.dots.push_back({b.cx, b.cy});
    gt.push_back(b);
  }
  // K distinct exemplars drawn from the target instances.
  std::vector<long> order(target_indices.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(spec.exemplars_k));
  std::sort(order.begin(), order.end());
  for (long i : order) rec.exemplars.push_back(gt[static_cast<std::size_t>(i)]);
  rec.gt_boxes = std::move(gt);
  return rec;
}

}  // namespace

void validate_spec(const SyntheticSceneSpec& spec) {
  if (spec.num_images < 1) throw ValueError("spec: num_images must be >= 1");
  if (spec.classes_per_image[0] < 2 ||
      spec.classes_per_image[1] < spec.classes_per_image[0]) {
    throw ValueError("spec: classes_per_image must be a non-empty range with "
                     "at least 2 classes");
  }
  if (spec.instances_per_class[0] < 1 ||
      spec.instances_per_class[1] < spec.instances_per_class[0]) {
    throw ValueError("spec: instances_per_class must be a non-empty range");
  }
  if (spec.shape_vocabulary.empty()) {
    throw ValueError("spec: shape_vocabulary must be non-empty");
  }
  for (const auto& name : spec.shape_vocabulary) parse_kind(name);
  if (!(spec.size_jitter[0] > 0.0) ||
      spec.size_jitter[1] < spec.size_jitter[0]) {
    throw ValueError("spec: size_jitter must be a positive non-empty range");
  }
  if (spec.canvas_width < 16 || spec.canvas_height < 16) {
    throw ValueError("spec: canvas must be at least 16x16");
  }
  if (spec.exemplars_k < 1) throw ValueError("spec: exemplars_k must be >= 1");
  if (spec.exemplars_k > spec.instances_per_class[0]) {
    throw ValueError(
        "spec: exemplars_k exceeds the minimum target instance count");
  }
  if (!(spec.base_size_frac > 0.0) || spec.base_size_frac > 0.9) {
    throw ValueError("spec: base_size_frac must lie in (0, 0.9]");
  }
}

std::vector<AnnotatedImage> generate_synthetic(const SyntheticSceneSpec& spec) {
  validate_spec(spec);
  std::vector<AnnotatedImage> out;
  out.reserve(static_cast<std::size_t>(spec.num_images));
  for (long i = 0; i < spec.num_images; ++i) {
    out.push_back(generate_one(spec, i));
    validate_annotated_image(out.back());
  }
  return out;
}

}  // namespace fscd
