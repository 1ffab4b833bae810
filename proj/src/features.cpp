#include "fscd/features.hpp"

#include <cmath>

#include "fscd/errors.hpp"

namespace fscd {

using nn::Rng;
using nn::Tensor;
using nn::Var;

namespace {

bool is_power_of_two(long v) { return v > 0 && (v & (v - 1)) == 0; }

long log2_of(long v) {
  long n = 0;
  while ((1L << n) < v) ++n;
  return n;
}

// He-style fan-in scaling keeps activations in a sane range at init.
Tensor conv_init(Rng& rng, long kh, long kw, long cin, long cout) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(kh * kw * cin));
  return Tensor::randn({kh, kw, cin, cout}, rng, stddev);
}

/// Nearest-neighbor upsample of [H, W, D] to [th, tw, D] built from the
/// sampling op so gradients flow back to the source map.
Var upsample_nearest(const Var& map, long th, long tw) {
  const long d = map.shape()[2];
  std::vector<double> pts;
  pts.reserve(static_cast<std::size_t>(th * tw * 2));
  for (long y = 0; y < th; ++y) {
    for (long x = 0; x < tw; ++x) {
      pts.push_back((static_cast<double>(x) + 0.5) / static_cast<double>(tw));
      pts.push_back((static_cast<double>(y) + 0.5) / static_cast<double>(th));
    }
  }
  return nn::reshape(nn::nearest_sample(map, pts), {th, tw, d});
}

}  // namespace

Backbone::Conv Backbone::make_conv(Rng& rng, const std::string& name, long kh,
                                   long kw, long cin, long cout, long stride,
                                   long pad) {
  Conv c;
  c.w = Var::leaf(conv_init(rng, kh, kw, cin, cout), true);
  c.b = Var::leaf(Tensor::zeros({cout}), true);
  c.stride = stride;
  c.pad = pad;
  params_.push_back({name + ".w", c.w});
  params_.push_back({name + ".b", c.b});
  return c;
}

Backbone::Affine Backbone::make_affine(Rng& rng, const std::string& name,
                                       long c) {
  (void)rng;
  Affine a;
  a.scale = Var::leaf(Tensor::full({c}, 1.0), true);
  a.shift = Var::leaf(Tensor::zeros({c}), true);
  params_.push_back({name + ".scale", a.scale});
  params_.push_back({name + ".shift", a.shift});
  return a;
}

Var Backbone::apply_conv(const Conv& c, const Var& x) {
  return nn::conv2d(x, c.w, c.b, c.stride, c.pad);
}

Var Backbone::apply_affine(const Affine& a, const Var& x) {
  const long h = x.shape()[0], w = x.shape()[1], d = x.shape()[2];
  Var flat = nn::reshape(x, {h * w, d});
  flat = nn::add_rowvec(nn::mul_rowvec(flat, a.scale), a.shift);
  return nn::reshape(flat, {h, w, d});
}

Var Backbone::bottleneck_forward(const Bottleneck& blk, const Var& x) const {
  Var y = nn::relu(apply_affine(blk.bn1, apply_conv(blk.conv1, x)));
  y = nn::relu(apply_affine(blk.bn2, apply_conv(blk.conv2, y)));
  y = apply_affine(blk.bn3, apply_conv(blk.conv3, y));
  Var shortcut = x;
  if (blk.has_down) {
    shortcut = apply_affine(blk.down_bn, apply_conv(blk.down, x));
  }
  return nn::relu(nn::add(y, shortcut));
}

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.feature_dim < 4) {
    throw ValueError("backbone: feature_dim must be at least 4");
  }
  Rng rng(seed);

  if (cfg_.kind == "tiny") {
    if (!is_power_of_two(cfg_.stride) || cfg_.stride > 32) {
      throw ValueError("tiny backbone: stride must be a power of two <= 32");
    }
    const long stages = log2_of(cfg_.stride);
    long cin = 3;
    for (long s = 0; s < stages; ++s) {
      // Channels double toward D over the stride-2 stack.
      const long cout =
          std::max(8L, cfg_.feature_dim >> (stages - 1 - s));
      tiny_convs_.push_back(make_conv(rng, "tiny.conv" + std::to_string(s), 3,
                                      3, cin, cout, 2, 1));
      cin = cout;
    }
    tiny_convs_.push_back(make_conv(rng, "tiny.refine", 3, 3, cin,
                                    cfg_.feature_dim, 1, 1));
    return;
  }

  if (cfg_.kind != "resnet50") {
    throw ValueError("backbone: kind must be 'tiny' or 'resnet50', got '" +
                     cfg_.kind + "'");
  }
  if (cfg_.stride != 8) {
    throw ValueError("resnet50 backbone: the fused pyramid is emitted at "
                     "stride 8");
  }

  stem_ = make_conv(rng, "resnet.stem", 7, 7, 3, 64, 2, 3);
  stem_bn_ = make_affine(rng, "resnet.stem_bn", 64);
  pool_ = make_conv(rng, "resnet.pool", 3, 3, 64, 64, 2, 1);
  pool_bn_ = make_affine(rng, "resnet.pool_bn", 64);

  const long block_counts[4] = {3, 4, 6, 3};
  const long widths[4] = {64, 128, 256, 512};
  long cin = 64;
  stages_.resize(4);
  for (int s = 0; s < 4; ++s) {
    const long mid = widths[s];
    const long cout = mid * 4;
    for (long b = 0; b < block_counts[s]; ++b) {
      const std::string name =
          "resnet.layer" + std::to_string(s + 1) + "." + std::to_string(b);
      Bottleneck blk;
      const long stride = (b == 0 && s > 0) ? 2 : 1;
      blk.conv1 = make_conv(rng, name + ".conv1", 1, 1, cin, mid, 1, 0);
      blk.bn1 = make_affine(rng, name + ".bn1", mid);
      blk.conv2 = make_conv(rng, name + ".conv2", 3, 3, mid, mid, stride, 1);
      blk.bn2 = make_affine(rng, name + ".bn2", mid);
      blk.conv3 = make_conv(rng, name + ".conv3", 1, 1, mid, cout, 1, 0);
      blk.bn3 = make_affine(rng, name + ".bn3", cout);
      if (stride != 1 || cin != cout) {
        blk.has_down = true;
        blk.down = make_conv(rng, name + ".down", 1, 1, cin, cout, stride, 0);
        blk.down_bn = make_affine(rng, name + ".down_bn", cout);
      }
      stages_[static_cast<std::size_t>(s)].push_back(std::move(blk));
      cin = cout;
    }
  }
  // Pyramid fusion down to stride 8; exemplars read the deepest stage.
  lat3_ = make_conv(rng, "fpn.lat3", 1, 1, 512, cfg_.feature_dim, 1, 0);
  lat4_ = make_conv(rng, "fpn.lat4", 1, 1, 1024, cfg_.feature_dim, 1, 0);
  lat5_ = make_conv(rng, "fpn.lat5", 1, 1, 2048, cfg_.feature_dim, 1, 0);
  smooth_ = make_conv(rng, "fpn.smooth", 3, 3, cfg_.feature_dim,
                      cfg_.feature_dim, 1, 1);
}

BackboneMaps Backbone::forward(const Var& image_tensor) const {
  if (image_tensor.shape().size() != 3 || image_tensor.shape()[2] != 3) {
    throw DimensionError("backbone: input must be [H, W, 3]");
  }

  if (cfg_.kind == "tiny") {
    Var x = image_tensor;
    for (const Conv& c : tiny_convs_) {
      x = nn::relu(apply_conv(c, x));
    }
    FeatureMap fmap{x, cfg_.stride};
    return {fmap, fmap};
  }

  Var x = nn::relu(apply_affine(stem_bn_, apply_conv(stem_, image_tensor)));
  x = nn::relu(apply_affine(pool_bn_, apply_conv(pool_, x)));
  std::vector<Var> stage_outputs;
  for (const auto& stage : stages_) {
    for (const auto& blk : stage) x = bottleneck_forward(blk, x);
    stage_outputs.push_back(x);
  }
  const Var& c3 = stage_outputs[1];  // stride 8
  const Var& c4 = stage_outputs[2];  // stride 16
  const Var& c5 = stage_outputs[3];  // stride 32

  Var p5 = apply_conv(lat5_, c5);
  Var p4 = nn::add(apply_conv(lat4_, c4),
                   upsample_nearest(p5, c4.shape()[0], c4.shape()[1]));
  Var p3 = nn::add(apply_conv(lat3_, c3),
                   upsample_nearest(p4, c3.shape()[0], c3.shape()[1]));
  p3 = apply_conv(smooth_, p3);

  return {FeatureMap{p3, 8}, FeatureMap{p5, 32}};
}

BackboneMaps Backbone::forward(const Tensor& image_tensor) const {
  return forward(Var::constant(image_tensor));
}

FeatureMap extract_feature_map(const Backbone& backbone, const Image& image) {
  const long stride = backbone.config().stride;
  if (image.width < stride || image.height < stride) {
    throw ValueError("extract_feature_map: image " +
                     std::to_string(image.width) + "x" +
                     std::to_string(image.height) +
                     " is smaller than the backbone stride " +
                     std::to_string(stride));
  }
  return backbone.forward(image_to_tensor(image)).features;
}

ExemplarFeature extract_exemplar_feature(const FeatureMap& fmap,
                                         const std::vector<Box>& exemplars,
                                         SampleMode mode) {
  if (exemplars.empty()) {
    throw ValueError("extract_exemplar_feature: need at least one exemplar");
  }
  std::vector<double> pts;
  pts.reserve(exemplars.size() * 2);
  for (const Box& b : exemplars) {
    if (b.cx < 0.0 || b.cx > 1.0 || b.cy < 0.0 || b.cy > 1.0) {
      throw ValueError("extract_exemplar_feature: exemplar center (" +
                       std::to_string(b.cx) + ", " + std::to_string(b.cy) +
                       ") falls outside the image");
    }
    pts.push_back(b.cx);
    pts.push_back(b.cy);
  }
  Var rows = mode == SampleMode::kBilinear
                 ? nn::bilinear_sample(fmap.values, pts)
                 : nn::nearest_sample(fmap.values, pts);
  // Mean over the K exemplars: [K, D] -> [1, D].
  Var mean = nn::mul_scalar(
      nn::matmul(Var::constant(Tensor::full({1, static_cast<long>(exemplars.size())}, 1.0)),
                 rows),
      1.0 / static_cast<double>(exemplars.size()));
  return {mean};
}

AggregatedMap aggregate(const FeatureMap& fmap, const ExemplarFeature& f_b,
                        const Var& w_proj) {
  const long h = fmap.h(), w = fmap.w(), d = fmap.d();
  if (f_b.values.shape() != std::vector<long>{1, d}) {
    throw DimensionError("aggregate: exemplar feature must be [1, D]");
  }
  if (w_proj.shape() != std::vector<long>{2 * d, d}) {
    throw DimensionError("aggregate: w_proj must be [2D, D], got " +
                         nn::shape_str(w_proj.shape()));
  }
  Var flat = nn::reshape(fmap.values, {h * w, d});
  Var modulated = nn::mul_rowvec(flat, f_b.values);
  Var fused = nn::matmul(nn::concat_cols(flat, modulated), w_proj);
  return {nn::reshape(fused, {h, w, d}), fmap.stride};
}

}  // namespace fscd
