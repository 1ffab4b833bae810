#pragma once

#include <string>
#include <vector>

#include "fscd/geometry.hpp"
#include "fscd/image.hpp"
#include "fscd/nn/ops.hpp"
#include "fscd/nn/optim.hpp"

namespace fscd {

struct BackboneConfig {
  std::string kind = "tiny";  // "tiny" | "resnet50"
  long stride = 8;            // downsampling of the returned feature map
  long feature_dim = 64;      // D
};

/// Spatial feature grid [H, W, D] plus its downsampling factor.
struct FeatureMap {
  nn::Var values;
  long stride = 8;

  long h() const { return values.shape()[0]; }
  long w() const { return values.shape()[1]; }
  long d() const { return values.shape()[2]; }
};

/// Pooled exemplar descriptor, shape [1, D].
struct ExemplarFeature {
  nn::Var values;
};

/// Exemplar-conditioned feature grid, same shape as its source map.
struct AggregatedMap {
  nn::Var values;
  long stride = 8;
};

/// The map fed to the detector plus the map exemplar vectors are sampled
/// from. The tiny backbone emits one map for both roles; the 50-layer
/// residual backbone samples exemplars from its deepest stage.
struct BackboneMaps {
  FeatureMap features;
  FeatureMap exemplar_source;
};

class Backbone {
 public:
  /// Randomly initialized weights, deterministic per seed.
  Backbone(BackboneConfig cfg, std::uint64_t seed);

  /// image_tensor: [H_img, W_img, 3] standardized intensities.
  BackboneMaps forward(const nn::Var& image_tensor) const;
  BackboneMaps forward(const nn::Tensor& image_tensor) const;

  const BackboneConfig& config() const { return cfg_; }
  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }

 private:
  struct Conv {
    nn::Var w, b;
    long stride = 1, pad = 1;
  };
  struct Affine {  // frozen batch-norm folded to per-channel scale/shift
    nn::Var scale, shift;
  };
  struct Bottleneck {
    Conv conv1, conv2, conv3;
    Affine bn1, bn2, bn3;
    bool has_down = false;
    Conv down;
    Affine down_bn;
  };

  Conv make_conv(nn::Rng& rng, const std::string& name, long kh, long kw,
                 long cin, long cout, long stride, long pad);
  Affine make_affine(nn::Rng& rng, const std::string& name, long c);
  static nn::Var apply_conv(const Conv& c, const nn::Var& x);
  static nn::Var apply_affine(const Affine& a, const nn::Var& x);
  nn::Var bottleneck_forward(const Bottleneck& blk, const nn::Var& x) const;

  BackboneConfig cfg_;
  nn::ParamList params_;

  std::vector<Conv> tiny_convs_;  // stride-2 stack + one refining conv

  Conv stem_;
  Affine stem_bn_;
  Conv pool_;  // stride-2 conv standing in for the stem max-pool
  Affine pool_bn_;
  std::vector<std::vector<Bottleneck>> stages_;
  Conv lat3_, lat4_, lat5_, smooth_;
};

enum class SampleMode { kBilinear, kNearest };

/// Preprocesses (standardize only; resizing happens upstream) and runs the
/// backbone. Throws when either image dimension is smaller than the stride.
FeatureMap extract_feature_map(const Backbone& backbone, const Image& image);

/// Mean of the per-exemplar vectors sampled at each box center (f^B). Throws
/// when there is no exemplar or a center falls outside the unit square.
ExemplarFeature extract_exemplar_feature(const FeatureMap& fmap,
                                         const std::vector<Box>& exemplars,
                                         SampleMode mode = SampleMode::kBilinear);

/// Location-wise fusion: out[h,w] = w_projᵀ · [F[h,w] ; F[h,w] ⊙ f_B],
/// a 1x1 convolution with kernel w_proj of shape [2D, D].
AggregatedMap aggregate(const FeatureMap& fmap, const ExemplarFeature& f_b,
                        const nn::Var& w_proj);

}  // namespace fscd
