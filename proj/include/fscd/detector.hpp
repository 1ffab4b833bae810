#pragma once

#include <array>
#include <string>
#include <vector>

#include "fscd/features.hpp"
#include "fscd/geometry.hpp"
#include "fscd/nn/ops.hpp"
#include "fscd/nn/optim.hpp"

namespace fscd {

/// The M 2-D points fed to the decoder as initial object locations.
/// Kinds: "exemplar-centers" (stage 1), "dot-annotations" (pseudo-box
/// generation), "fixed-grid" and "learnable" (stage 2 / inference).
struct QueryPoints {
  nn::Tensor points;  // [M, 2], normalized, ignored when learnable
  std::string kind = "fixed-grid";
  nn::Var learnable;  // defined only for kind == "learnable"

  long m() const {
    if (learnable.defined()) return learnable.shape()[0];
    return points.rank() == 2 ? points.dim(0) : 0;
  }
  /// The coordinates as a graph node (the trainable Var when learnable).
  nn::Var as_var() const {
    return learnable.defined() ? learnable : nn::Var::constant(points);
  }
  nn::Tensor coords() const {
    return learnable.defined() ? learnable.value() : points;
  }
};

/// Lattice rule: r x c grid of cell centers with r*c = M, r the divisor of M
/// closest to sqrt(M) (600 -> 24x25). "learnable" starts from the same
/// lattice with trainable coordinates.
QueryPoints make_anchor_points(long m, const std::string& kind = "fixed-grid");

/// Wraps explicit coordinates (exemplar centers, dots) as queries.
QueryPoints make_query_points(const std::vector<std::array<double, 2>>& pts,
                              const std::string& kind);

struct DetectorConfig {
  long num_encoder_layers = 2;
  long num_decoder_layers = 2;
  long feature_dim = 64;  // D, divisible by num_heads and by 4
  long num_heads = 8;
  long m = 100;           // anchor count for fixed-grid/learnable queries
  std::string anchor_kind = "fixed-grid";
  long ffn_dim = 256;
};

/// Per-query predictions. scores in (0,1); box_params rows are
/// (dx, dy, w, h) with w,h squashed into (0,1); log_sigma clamped to [-5,5].
struct DetectorOutput {
  nn::Var scores;      // [M, 1]
  nn::Var box_params;  // [M, 4]
  nn::Var log_sigma;   // [M, 4]

  long m() const { return scores.defined() ? scores.shape()[0] : 0; }
};

class Detector {
 public:
  Detector(DetectorConfig cfg, std::uint64_t seed);

  /// Encoder over the flattened map, decoder over the queries, three heads.
  DetectorOutput forward(const AggregatedMap& fa,
                         const QueryPoints& queries) const;

  const DetectorConfig& config() const { return cfg_; }
  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }

 private:
  struct Linear {
    nn::Var w, b;
  };
  struct LayerNormParams {
    nn::Var gamma, beta;
  };
  struct Attention {
    Linear q, k, v, out;
  };
  struct EncoderLayer {
    Attention self_attn;
    LayerNormParams ln1, ln2;
    Linear ffn1, ffn2;
  };
  struct DecoderLayer {
    Attention self_attn, cross_attn;
    LayerNormParams ln1, ln2, ln3;
    Linear ffn1, ffn2;
  };

  Linear make_linear(nn::Rng& rng, const std::string& name, long din,
                     long dout);
  LayerNormParams make_ln(const std::string& name, long d);
  Attention make_attention(nn::Rng& rng, const std::string& name, long d);
  static nn::Var apply_linear(const Linear& l, const nn::Var& x);
  nn::Var attention(const Attention& a, const nn::Var& q_in,
                    const nn::Var& k_in, const nn::Var& v_in) const;
  nn::Var positional_encoding(const nn::Var& pts) const;  // [N,2] -> [N,D]

  DetectorConfig cfg_;
  nn::ParamList params_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Linear box_mlp1_, box_mlp2_, box_mlp3_;
  Linear score_head_;
  Linear sigma_mlp1_, sigma_mlp2_;
};

/// Box m: center (p_m + dx, p_m + dy) clamped into the unit square, size
/// (w, h) floored at a tiny positive value.
std::vector<Box> decode_boxes(const DetectorOutput& out,
                              const QueryPoints& queries);

/// Inverse of decode_boxes on in-range values: row m = (cx - p_x, cy - p_y,
/// w, h).
nn::Tensor encode_targets(const std::vector<Box>& boxes,
                          const QueryPoints& queries);

/// Decoded boxes as a graph node for loss computation: rows (cx, cy, w, h)
/// with unclamped centers so gradients are exact.
nn::Var decode_boxes_var(const DetectorOutput& out,
                         const QueryPoints& queries);

}  // namespace fscd
