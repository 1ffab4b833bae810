#include "fscd/detector.hpp"

#include <algorithm>
#include <cmath>

#include "fscd/errors.hpp"

namespace fscd {

using nn::Rng;
using nn::Tensor;
using nn::Var;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kPeTemperature = 10000.0;
constexpr double kScoreLogitClamp = 14.0;  // keeps sigmoid away from {0,1}
constexpr double kLogSigmaClamp = 5.0;

Tensor lattice_points(long m) {
  // r = divisor of m closest to sqrt(m); grid is r rows by c = m/r columns.
  long best_r = 1;
  double best_gap = 1e300;
  for (long r = 1; r <= m; ++r) {
    if (m % r != 0) continue;
    const double gap = std::abs(static_cast<double>(r) - std::sqrt(static_cast<double>(m)));
    if (gap < best_gap) {
      best_gap = gap;
      best_r = r;
    }
  }
  const long rows = best_r, cols = m / best_r;
  Tensor pts({m, 2});
  long idx = 0;
  for (long i = 0; i < rows; ++i) {
    for (long j = 0; j < cols; ++j) {
      pts[idx * 2 + 0] = (static_cast<double>(j) + 0.5) / static_cast<double>(cols);
      pts[idx * 2 + 1] = (static_cast<double>(i) + 0.5) / static_cast<double>(rows);
      ++idx;
    }
  }
  return pts;
}

// Bilinear interpolation weights of the query points over the cell-center
// lattice, as a dense [M, H*W] matrix. Row q holds the (up to four) blend
// weights of query q's location; multiplying by the flattened map hands
// every query the feature under its point. Coordinates outside the lattice
// clamp to the border cells.
Tensor bilinear_sample_weights(long h, long w, const Tensor& pts) {
  const long m = pts.dim(0);
  Tensor s = Tensor::zeros({m, h * w});
  for (long q = 0; q < m; ++q) {
    const double gx = pts[q * 2 + 0] * static_cast<double>(w) - 0.5;
    const double gy = pts[q * 2 + 1] * static_cast<double>(h) - 0.5;
    const double fx = std::floor(gx), fy = std::floor(gy);
    const double ax = gx - fx, ay = gy - fy;
    const long x0 = std::clamp(static_cast<long>(fx), 0L, w - 1);
    const long x1 = std::clamp(static_cast<long>(fx) + 1, 0L, w - 1);
    const long y0 = std::clamp(static_cast<long>(fy), 0L, h - 1);
    const long y1 = std::clamp(static_cast<long>(fy) + 1, 0L, h - 1);
    s[q * (h * w) + y0 * w + x0] += (1.0 - ay) * (1.0 - ax);
    s[q * (h * w) + y0 * w + x1] += (1.0 - ay) * ax;
    s[q * (h * w) + y1 * w + x0] += ay * (1.0 - ax);
    s[q * (h * w) + y1 * w + x1] += ay * ax;
  }
  return s;
}

}  // namespace

QueryPoints make_anchor_points(long m, const std::string& kind) {
  if (m < 1) throw ValueError("make_anchor_points: M must be >= 1");
  if (kind != "fixed-grid" && kind != "learnable") {
    throw ValueError("make_anchor_points: kind must be fixed-grid|learnable");
  }
  QueryPoints q;
  q.kind = kind;
  q.points = lattice_points(m);
  if (kind == "learnable") {
    q.learnable = Var::leaf(q.points, true);
  }
  return q;
}

QueryPoints make_query_points(const std::vector<std::array<double, 2>>& pts,
                              const std::string& kind) {
  QueryPoints q;
  q.kind = kind;
  q.points = Tensor({static_cast<long>(pts.size()), 2});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double x = pts[i][0], y = pts[i][1];
    if (x < 0.0 || x > 1.0 || y < 0.0 || y > 1.0) {
      throw ValueError("make_query_points: coordinates must lie in [0,1]");
    }
    q.points[static_cast<long>(i) * 2 + 0] = x;
    q.points[static_cast<long>(i) * 2 + 1] = y;
  }
  return q;
}

Detector::Linear Detector::make_linear(Rng& rng, const std::string& name,
                                       long din, long dout) {
  Linear l;
  const double stddev = std::sqrt(2.0 / static_cast<double>(din + dout));
  l.w = Var::leaf(Tensor::randn({din, dout}, rng, stddev), true);
  l.b = Var::leaf(Tensor::zeros({dout}), true);
  params_.push_back({name + ".w", l.w});
  params_.push_back({name + ".b", l.b});
  return l;
}

Detector::LayerNormParams Detector::make_ln(const std::string& name, long d) {
  LayerNormParams ln;
  ln.gamma = Var::leaf(Tensor::full({d}, 1.0), true);
  ln.beta = Var::leaf(Tensor::zeros({d}), true);
  params_.push_back({name + ".gamma", ln.gamma});
  params_.push_back({name + ".beta", ln.beta});
  return ln;
}

Detector::Attention Detector::make_attention(Rng& rng, const std::string& name,
                                             long d) {
  Attention a;
  a.q = make_linear(rng, name + ".q", d, d);
  a.k = make_linear(rng, name + ".k", d, d);
  a.v = make_linear(rng, name + ".v", d, d);
  a.out = make_linear(rng, name + ".out", d, d);
  return a;
}

Var Detector::apply_linear(const Linear& l, const Var& x) {
  return nn::linear(x, l.w, l.b);
}

Var Detector::attention(const Attention& a, const Var& q_in, const Var& k_in,
                        const Var& v_in) const {
  Var q = apply_linear(a.q, q_in);
  Var k = apply_linear(a.k, k_in);
  Var v = apply_linear(a.v, v_in);
  Var mixed = nn::multihead_attention(q, k, v, cfg_.num_heads);
  return apply_linear(a.out, mixed);
}

Var Detector::positional_encoding(const Var& pts) const {
  // [sin(xF), cos(xF), sin(yF), cos(yF)] with D/4 geometric frequencies.
  const long bands = cfg_.feature_dim / 4;
  Tensor freqs({1, bands});
  for (long i = 0; i < bands; ++i) {
    freqs[i] = 2.0 * kPi /
               std::pow(kPeTemperature,
                        static_cast<double>(i) / static_cast<double>(bands));
  }
  const Var f = Var::constant(freqs);
  Var x = nn::matmul(nn::slice_cols(pts, 0, 1), f);
  Var y = nn::matmul(nn::slice_cols(pts, 1, 2), f);
  return nn::concat_cols(nn::concat_cols(nn::sin_op(x), nn::cos_op(x)),
                         nn::concat_cols(nn::sin_op(y), nn::cos_op(y)));
}

Detector::Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.num_encoder_layers < 1 || cfg_.num_decoder_layers < 1) {
    throw ValueError("detector: need at least one encoder and decoder layer");
  }
  if (cfg_.feature_dim % cfg_.num_heads != 0) {
    throw ValueError("detector: feature_dim must be divisible by num_heads");
  }
  if (cfg_.feature_dim % 4 != 0) {
    throw ValueError("detector: feature_dim must be divisible by 4");
  }
  Rng rng(seed);
  const long d = cfg_.feature_dim;
  for (long l = 0; l < cfg_.num_encoder_layers; ++l) {
    const std::string name = "detector.enc" + std::to_string(l);
    EncoderLayer layer;
    layer.self_attn = make_attention(rng, name + ".attn", d);
    layer.ln1 = make_ln(name + ".ln1", d);
    layer.ffn1 = make_linear(rng, name + ".ffn1", d, cfg_.ffn_dim);
    layer.ffn2 = make_linear(rng, name + ".ffn2", cfg_.ffn_dim, d);
    layer.ln2 = make_ln(name + ".ln2", d);
    encoder_.push_back(std::move(layer));
  }
  for (long l = 0; l < cfg_.num_decoder_layers; ++l) {
    const std::string name = "detector.dec" + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = make_attention(rng, name + ".self", d);
    layer.ln1 = make_ln(name + ".ln1", d);
    layer.cross_attn = make_attention(rng, name + ".cross", d);
    layer.ln2 = make_ln(name + ".ln2", d);
    layer.ffn1 = make_linear(rng, name + ".ffn1", d, cfg_.ffn_dim);
    layer.ffn2 = make_linear(rng, name + ".ffn2", cfg_.ffn_dim, d);
    layer.ln3 = make_ln(name + ".ln3", d);
    decoder_.push_back(std::move(layer));
  }
  box_mlp1_ = make_linear(rng, "detector.box1", d, d);
  box_mlp2_ = make_linear(rng, "detector.box2", d, d);
  box_mlp3_ = make_linear(rng, "detector.box3", d, 4);
  score_head_ = make_linear(rng, "detector.score", d, 1);
  sigma_mlp1_ = make_linear(rng, "detector.sigma1", d, d);
  sigma_mlp2_ = make_linear(rng, "detector.sigma2", d, 4);
}

DetectorOutput Detector::forward(const AggregatedMap& fa,
                                 const QueryPoints& queries) const {
  if (fa.values.shape().size() != 3 ||
      fa.values.shape()[2] != cfg_.feature_dim) {
    throw DimensionError("detector: map depth does not match feature_dim");
  }
  const long m = queries.m();
  if (m == 0) {
    DetectorOutput empty;
    empty.scores = Var::constant(Tensor({0, 1}));
    empty.box_params = Var::constant(Tensor({0, 4}));
    empty.log_sigma = Var::constant(Tensor({0, 4}));
    return empty;
  }

  const long h = fa.values.shape()[0], w = fa.values.shape()[1];
  const long d = cfg_.feature_dim;

  // Flattened map tokens with positional encodings of their cell centers.
  Var memory = nn::reshape(fa.values, {h * w, d});
  Tensor cell_pts({h * w, 2});
  for (long i = 0; i < h; ++i) {
    for (long j = 0; j < w; ++j) {
      cell_pts[(i * w + j) * 2 + 0] =
          (static_cast<double>(j) + 0.5) / static_cast<double>(w);
      cell_pts[(i * w + j) * 2 + 1] =
          (static_cast<double>(i) + 0.5) / static_cast<double>(h);
    }
  }
  const Var mem_pe = positional_encoding(Var::constant(cell_pts));
  for (const EncoderLayer& layer : encoder_) {
    Var qk = nn::add(memory, mem_pe);
    Var attn = attention(layer.self_attn, qk, qk, memory);
    memory = nn::layer_norm(nn::add(memory, attn), layer.ln1.gamma,
                            layer.ln1.beta);
    Var ffn = apply_linear(layer.ffn2,
                           nn::relu(apply_linear(layer.ffn1, memory)));
    memory = nn::layer_norm(nn::add(memory, ffn), layer.ln2.gamma,
                            layer.ln2.beta);
  }

  // Decoder: each query embedding starts from the encoded feature under its
  // own point, so queries carry local image evidence from the first layer on
  // (a purely positional start gives the heads no content gradient and
  // collapses to query-independent outputs at small training budgets).
  // Positional encodings remain a pure function of the query coordinates.
  const Var query_pe = positional_encoding(queries.as_var());
  const Tensor sample_w = bilinear_sample_weights(h, w, queries.coords());
  Var tgt = nn::matmul(Var::constant(sample_w), memory);
  for (const DecoderLayer& layer : decoder_) {
    Var qk = nn::add(tgt, query_pe);
    Var self_out = attention(layer.self_attn, qk, qk, tgt);
    tgt = nn::layer_norm(nn::add(tgt, self_out), layer.ln1.gamma,
                         layer.ln1.beta);
    Var cross_out = attention(layer.cross_attn, nn::add(tgt, query_pe),
                              nn::add(memory, mem_pe), memory);
    tgt = nn::layer_norm(nn::add(tgt, cross_out), layer.ln2.gamma,
                         layer.ln2.beta);
    Var ffn = apply_linear(layer.ffn2, nn::relu(apply_linear(layer.ffn1, tgt)));
    tgt = nn::layer_norm(nn::add(tgt, ffn), layer.ln3.gamma, layer.ln3.beta);
  }

  DetectorOutput out;
  Var score_logits = nn::clamp(apply_linear(score_head_, tgt),
                               -kScoreLogitClamp, kScoreLogitClamp);
  out.scores = nn::sigmoid(score_logits);

  Var box_raw = apply_linear(
      box_mlp3_,
      nn::relu(apply_linear(box_mlp2_,
                            nn::relu(apply_linear(box_mlp1_, tgt)))));
  Var offsets = nn::slice_cols(box_raw, 0, 2);
  Var sizes = nn::sigmoid(nn::slice_cols(box_raw, 2, 4));
  out.box_params = nn::concat_cols(offsets, sizes);

  Var sigma_raw =
      apply_linear(sigma_mlp2_, nn::relu(apply_linear(sigma_mlp1_, tgt)));
  out.log_sigma = nn::clamp(sigma_raw, -kLogSigmaClamp, kLogSigmaClamp);
  return out;
}

std::vector<Box> decode_boxes(const DetectorOutput& out,
                              const QueryPoints& queries) {
  const long m = out.m();
  if (queries.m() != m) {
    throw DimensionError("decode_boxes: query/output length mismatch");
  }
  const Tensor pts = queries.coords();
  std::vector<Box> boxes;
  boxes.reserve(static_cast<std::size_t>(m));
  const Tensor& bp = out.box_params.value();
  for (long i = 0; i < m; ++i) {
    const double cx = std::clamp(pts[i * 2 + 0] + bp[i * 4 + 0], 0.0, 1.0);
    const double cy = std::clamp(pts[i * 2 + 1] + bp[i * 4 + 1], 0.0, 1.0);
    const double w = std::max(bp[i * 4 + 2], 1e-4);
    const double h = std::max(bp[i * 4 + 3], 1e-4);
    boxes.emplace_back(cx, cy, w, h);
  }
  return boxes;
}

Tensor encode_targets(const std::vector<Box>& boxes,
                      const QueryPoints& queries) {
  const long m = queries.m();
  if (static_cast<long>(boxes.size()) != m) {
    throw DimensionError("encode_targets: box/query length mismatch");
  }
  const Tensor pts = queries.coords();
  Tensor out({m, 4});
  for (long i = 0; i < m; ++i) {
    out[i * 4 + 0] = boxes[static_cast<std::size_t>(i)].cx - pts[i * 2 + 0];
    out[i * 4 + 1] = boxes[static_cast<std::size_t>(i)].cy - pts[i * 2 + 1];
    out[i * 4 + 2] = boxes[static_cast<std::size_t>(i)].w;
    out[i * 4 + 3] = boxes[static_cast<std::size_t>(i)].h;
  }
  return out;
}

Var decode_boxes_var(const DetectorOutput& out, const QueryPoints& queries) {
  if (queries.m() != out.m()) {
    throw DimensionError("decode_boxes_var: query/output length mismatch");
  }
  Var centers = nn::add(nn::slice_cols(out.box_params, 0, 2), queries.as_var());
  Var sizes = nn::slice_cols(out.box_params, 2, 4);
  return nn::concat_cols(centers, sizes);
}

}  // namespace fscd
