#pragma once

#include <vector>

#include "fscd/nn/autodiff.hpp"

namespace fscd::nn {

// ---- elementwise (same shape) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var exp_op(const Var& x);
Var log_op(const Var& x);
Var abs_op(const Var& x);
Var sin_op(const Var& x);
Var cos_op(const Var& x);
Var square(const Var& x);
// Subgradient: passes through on [lo, hi], zero outside.
Var clamp(const Var& x, double lo, double hi);
// Smooth focal-style power (1 - p)^gamma for p in (0,1); gamma >= 0.
Var pow_scalar(const Var& x, double e);

// ---- broadcast over rows of [N, D] ----
Var add_rowvec(const Var& x, const Var& bias);  // bias: [D] or [1, D]
Var mul_rowvec(const Var& x, const Var& v);     // v:    [D] or [1, D]

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);  // [m,k] x [k,n]
Var linear(const Var& x, const Var& w, const Var& b);  // x[N,Din] w[Din,Dout] b[Dout]

// ---- shape ----
Var reshape(const Var& x, std::vector<long> shape);
Var slice_cols(const Var& x, long c0, long c1);
Var concat_cols(const Var& a, const Var& b);
Var concat_rows(const Var& a, const Var& b);
Var gather_rows(const Var& x, std::vector<long> idx);

// ---- reductions ----
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var sum_lastdim(const Var& x);  // [N, D] -> [N, 1]

// ---- neural layers ----
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               double eps = 1e-5);
/// Scaled dot-product attention on already-projected q[Nq,D], k[Nk,D],
/// v[Nk,D] split into `heads` column blocks.
Var multihead_attention(const Var& q, const Var& k, const Var& v, long heads);
/// x: [H, W, Cin], w: [KH, KW, Cin, Cout], b: [Cout]. Output [Ho, Wo, Cout]
/// with Ho = (H + 2*pad - KH)/stride + 1 (floor).
Var conv2d(const Var& x, const Var& w, const Var& b, long stride, long pad);
/// Samples map [H, W, D] at M normalized (x, y) points with border clamping;
/// returns [M, D]. Gradients flow to the map only.
Var bilinear_sample(const Var& map, const std::vector<double>& points_xy);
Var nearest_sample(const Var& map, const std::vector<double>& points_xy);

}  // namespace fscd::nn
