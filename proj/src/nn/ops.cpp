#include "fscd/nn/ops.hpp"

#include <algorithm>
#include <cmath>

#include "fscd/errors.hpp"

namespace fscd::nn {

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Unary op helper: y = f(x), dx = dfdx(x, y) * dy (elementwise).
template <typename F, typename G>
Var unary(const Var& x, F&& f, G&& dfdx_times) {
  Tensor out(x.shape());
  const auto& xv = x.value().vec();
  for (std::size_t i = 0; i < xv.size(); ++i) out.vec()[i] = f(xv[i]);
  Tensor saved = out;  // many derivatives reuse y; cheap at these sizes
  Var xc = x;
  return make_op(std::move(out), {x}, [xc, saved, dfdx_times](Node& n) {
    Tensor g(n.value.shape());
    const auto& xv = xc.value().vec();
    for (std::size_t i = 0; i < g.vec().size(); ++i) {
      g.vec()[i] = dfdx_times(xv[i], saved.vec()[i]) * n.grad.vec()[i];
    }
    n.parents[0]->accumulate(g);
  });
}

long rows_of(const Var& x) { return x.value().rows(); }
long cols_of(const Var& x) { return x.value().cols(); }

// Accepts [D] or [1, D]; returns D.
long vec_len(const Var& v, const char* op) {
  const auto& s = v.shape();
  if (s.size() == 1) return s[0];
  if (s.size() == 2 && s[0] == 1) return s[1];
  throw DimensionError(std::string(op) + ": expected vector, got " + shape_str(s));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (long i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    n.parents[0]->accumulate(n.grad);
    n.parents[1]->accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (long i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& n) {
    n.parents[0]->accumulate(n.grad);
    Tensor g(n.grad.shape());
    for (long i = 0; i < g.numel(); ++i) g[i] = -n.grad[i];
    n.parents[1]->accumulate(g);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (long i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  Var ac = a, bc = b;
  return make_op(std::move(out), {a, b}, [ac, bc](Node& n) {
    Tensor ga(n.grad.shape()), gb(n.grad.shape());
    for (long i = 0; i < n.grad.numel(); ++i) {
      ga[i] = n.grad[i] * bc.value()[i];
      gb[i] = n.grad[i] * ac.value()[i];
    }
    n.parents[0]->accumulate(ga);
    n.parents[1]->accumulate(gb);
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out(a.shape());
  for (long i = 0; i < out.numel(); ++i) out[i] = a.value()[i] / b.value()[i];
  Var ac = a, bc = b;
  return make_op(std::move(out), {a, b}, [ac, bc](Node& n) {
    Tensor ga(n.grad.shape()), gb(n.grad.shape());
    for (long i = 0; i < n.grad.numel(); ++i) {
      const double bi = bc.value()[i];
      ga[i] = n.grad[i] / bi;
      gb[i] = -n.grad[i] * ac.value()[i] / (bi * bi);
    }
    n.parents[0]->accumulate(ga);
    n.parents[1]->accumulate(gb);
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out(a.shape());
  for (long i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + c;
  return make_op(std::move(out), {a},
                 [](Node& n) { n.parents[0]->accumulate(n.grad); });
}

Var mul_scalar(const Var& a, double c) {
  Tensor out(a.shape());
  for (long i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * c;
  return make_op(std::move(out), {a}, [c](Node& n) {
    Tensor g(n.grad.shape());
    for (long i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * c;
    n.parents[0]->accumulate(g);
  });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp_op(const Var& x) {
  return unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Var log_op(const Var& x) {
  return unary(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Var abs_op(const Var& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sin_op(const Var& x) {
  return unary(
      x, [](double v) { return std::sin(v); },
      [](double v, double) { return std::cos(v); });
}

Var cos_op(const Var& x) {
  return unary(
      x, [](double v) { return std::cos(v); },
      [](double v, double) { return -std::sin(v); });
}

Var square(const Var& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var pow_scalar(const Var& x, double e) {
  return unary(
      x, [e](double v) { return std::pow(v, e); },
      [e](double v, double) { return e * std::pow(v, e - 1.0); });
}

Var add_rowvec(const Var& x, const Var& bias) {
  const long n = rows_of(x), d = cols_of(x);
  if (vec_len(bias, "add_rowvec") != d) {
    throw DimensionError("add_rowvec: bias length != columns");
  }
  Tensor out(x.shape());
  for (long r = 0; r < n; ++r) {
    for (long c = 0; c < d; ++c) {
      out[r * d + c] = x.value()[r * d + c] + bias.value()[c];
    }
  }
  return make_op(std::move(out), {x, bias}, [n, d](Node& node) {
    node.parents[0]->accumulate(node.grad);
    Tensor gb(node.parents[1]->value.shape());
    for (long r = 0; r < n; ++r) {
      for (long c = 0; c < d; ++c) gb[c] += node.grad[r * d + c];
    }
    node.parents[1]->accumulate(gb);
  });
}

Var mul_rowvec(const Var& x, const Var& v) {
  const long n = rows_of(x), d = cols_of(x);
  if (vec_len(v, "mul_rowvec") != d) {
    throw DimensionError("mul_rowvec: vector length != columns");
  }
  Tensor out(x.shape());
  for (long r = 0; r < n; ++r) {
    for (long c = 0; c < d; ++c) {
      out[r * d + c] = x.value()[r * d + c] * v.value()[c];
    }
  }
  Var xc = x, vc = v;
  return make_op(std::move(out), {x, v}, [n, d, xc, vc](Node& node) {
    Tensor gx(xc.value().shape());
    Tensor gv(vc.value().shape());
    for (long r = 0; r < n; ++r) {
      for (long c = 0; c < d; ++c) {
        gx[r * d + c] = node.grad[r * d + c] * vc.value()[c];
        gv[c] += node.grad[r * d + c] * xc.value()[r * d + c];
      }
    }
    node.parents[0]->accumulate(gx);
    node.parents[1]->accumulate(gv);
  });
}

Var matmul(const Var& a, const Var& b) {
  const long m = rows_of(a), k = cols_of(a);
  const long k2 = rows_of(b), n = cols_of(b);
  if (k != k2) {
    throw DimensionError("matmul: inner dims " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  out.mat(m, n).noalias() = a.value().mat(m, k) * b.value().mat(k, n);
  Var ac = a, bc = b;
  return make_op(std::move(out), {a, b}, [m, k, n, ac, bc](Node& node) {
    ConstMatMap g(node.grad.data(), m, n);
    if (node.parents[0]->requires_grad) {
      Tensor ga({m, k});
      ga.mat(m, k).noalias() = g * bc.value().mat(k, n).transpose();
      node.parents[0]->accumulate(ga);
    }
    if (node.parents[1]->requires_grad) {
      Tensor gb({k, n});
      gb.mat(k, n).noalias() = ac.value().mat(m, k).transpose() * g;
      node.parents[1]->accumulate(gb);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  return add_rowvec(matmul(x, w), b);
}

Var reshape(const Var& x, std::vector<long> shape) {
  Tensor out = x.value().reshaped(shape);
  return make_op(std::move(out), {x}, [](Node& n) {
    n.parents[0]->accumulate(n.grad.reshaped(n.parents[0]->value.shape()));
  });
}

Var slice_cols(const Var& x, long c0, long c1) {
  const long n = rows_of(x), d = cols_of(x);
  if (c0 < 0 || c1 > d || c0 >= c1) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + shape_str(x.shape()));
  }
  const long w = c1 - c0;
  Tensor out({n, w});
  for (long r = 0; r < n; ++r) {
    for (long c = 0; c < w; ++c) out[r * w + c] = x.value()[r * d + c0 + c];
  }
  return make_op(std::move(out), {x}, [n, d, c0, w](Node& node) {
    Tensor g(node.parents[0]->value.shape());
    for (long r = 0; r < n; ++r) {
      for (long c = 0; c < w; ++c) g[r * d + c0 + c] = node.grad[r * w + c];
    }
    node.parents[0]->accumulate(g);
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const long n = rows_of(a), da = cols_of(a), db = cols_of(b);
  if (rows_of(b) != n) throw DimensionError("concat_cols: row mismatch");
  Tensor out({n, da + db});
  for (long r = 0; r < n; ++r) {
    for (long c = 0; c < da; ++c) out[r * (da + db) + c] = a.value()[r * da + c];
    for (long c = 0; c < db; ++c) out[r * (da + db) + da + c] = b.value()[r * db + c];
  }
  return make_op(std::move(out), {a, b}, [n, da, db](Node& node) {
    Tensor ga({n, da}), gb({n, db});
    for (long r = 0; r < n; ++r) {
      for (long c = 0; c < da; ++c) ga[r * da + c] = node.grad[r * (da + db) + c];
      for (long c = 0; c < db; ++c) gb[r * db + c] = node.grad[r * (da + db) + da + c];
    }
    node.parents[0]->accumulate(ga);
    node.parents[1]->accumulate(gb);
  });
}

Var concat_rows(const Var& a, const Var& b) {
  const long na = rows_of(a), nb = rows_of(b), d = cols_of(a);
  if (cols_of(b) != d) throw DimensionError("concat_rows: column mismatch");
  Tensor out({na + nb, d});
  std::copy(a.value().vec().begin(), a.value().vec().end(), out.vec().begin());
  std::copy(b.value().vec().begin(), b.value().vec().end(),
            out.vec().begin() + static_cast<std::ptrdiff_t>(na * d));
  return make_op(std::move(out), {a, b}, [na, nb, d](Node& node) {
    Tensor ga({na, d}), gb({nb, d});
    std::copy(node.grad.vec().begin(), node.grad.vec().begin() + na * d,
              ga.vec().begin());
    std::copy(node.grad.vec().begin() + na * d, node.grad.vec().end(),
              gb.vec().begin());
    node.parents[0]->accumulate(ga);
    node.parents[1]->accumulate(gb);
  });
}

Var gather_rows(const Var& x, std::vector<long> idx) {
  const long n = rows_of(x), d = cols_of(x);
  for (long i : idx) {
    if (i < 0 || i >= n) throw DimensionError("gather_rows: index out of range");
  }
  const long m = static_cast<long>(idx.size());
  Tensor out({m, d});
  for (long r = 0; r < m; ++r) {
    const long src = idx[static_cast<std::size_t>(r)];
    std::copy(x.value().vec().begin() + src * d,
              x.value().vec().begin() + (src + 1) * d,
              out.vec().begin() + r * d);
  }
  return make_op(std::move(out), {x}, [idx = std::move(idx), d](Node& node) {
    Tensor g(node.parents[0]->value.shape());
    const long m = static_cast<long>(idx.size());
    for (long r = 0; r < m; ++r) {
      const long dst = idx[static_cast<std::size_t>(r)];
      for (long c = 0; c < d; ++c) g[dst * d + c] += node.grad[r * d + c];
    }
    node.parents[0]->accumulate(g);
  });
}

Var sum_all(const Var& x) {
  double s = 0.0;
  for (long i = 0; i < x.numel(); ++i) s += x.value()[i];
  return make_op(Tensor::scalar(s), {x}, [](Node& node) {
    Tensor g = Tensor::full(node.parents[0]->value.shape(), node.grad[0]);
    node.parents[0]->accumulate(g);
  });
}

Var mean_all(const Var& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Var sum_lastdim(const Var& x) {
  const long n = rows_of(x), d = cols_of(x);
  Tensor out({n, 1});
  for (long r = 0; r < n; ++r) {
    double s = 0.0;
    for (long c = 0; c < d; ++c) s += x.value()[r * d + c];
    out[r] = s;
  }
  return make_op(std::move(out), {x}, [n, d](Node& node) {
    Tensor g({n, d});
    for (long r = 0; r < n; ++r) {
      for (long c = 0; c < d; ++c) g[r * d + c] = node.grad[r];
    }
    node.parents[0]->accumulate(g);
  });
}

Var softmax_rows(const Var& x) {
  const long n = rows_of(x), d = cols_of(x);
  Tensor out({n, d});
  for (long r = 0; r < n; ++r) {
    double mx = -1e300;
    for (long c = 0; c < d; ++c) mx = std::max(mx, x.value()[r * d + c]);
    double z = 0.0;
    for (long c = 0; c < d; ++c) {
      const double e = std::exp(x.value()[r * d + c] - mx);
      out[r * d + c] = e;
      z += e;
    }
    for (long c = 0; c < d; ++c) out[r * d + c] /= z;
  }
  Tensor saved = out;
  return make_op(std::move(out), {x}, [n, d, saved](Node& node) {
    Tensor g({n, d});
    for (long r = 0; r < n; ++r) {
      double dot = 0.0;
      for (long c = 0; c < d; ++c) dot += node.grad[r * d + c] * saved[r * d + c];
      for (long c = 0; c < d; ++c) {
        g[r * d + c] = saved[r * d + c] * (node.grad[r * d + c] - dot);
      }
    }
    node.parents[0]->accumulate(g);
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const long n = rows_of(x), d = cols_of(x);
  if (vec_len(gamma, "layer_norm") != d || vec_len(beta, "layer_norm") != d) {
    throw DimensionError("layer_norm: affine parameter length != columns");
  }
  Tensor out({n, d});
  Tensor xhat({n, d});
  Tensor inv_std({n});
  for (long r = 0; r < n; ++r) {
    double mean = 0.0;
    for (long c = 0; c < d; ++c) mean += x.value()[r * d + c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (long c = 0; c < d; ++c) {
      const double dv = x.value()[r * d + c] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (long c = 0; c < d; ++c) {
      const double xh = (x.value()[r * d + c] - mean) * is;
      xhat[r * d + c] = xh;
      out[r * d + c] = xh * gamma.value()[c] + beta.value()[c];
    }
  }
  Var gc = gamma;
  return make_op(std::move(out), {x, gamma, beta},
                 [n, d, xhat, inv_std, gc](Node& node) {
    Tensor gx({n, d});
    Tensor ggamma(node.parents[1]->value.shape());
    Tensor gbeta(node.parents[2]->value.shape());
    for (long r = 0; r < n; ++r) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (long c = 0; c < d; ++c) {
        const double dy = node.grad[r * d + c];
        const double dxhat = dy * gc.value()[c];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat[r * d + c];
        ggamma[c] += dy * xhat[r * d + c];
        gbeta[c] += dy;
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      for (long c = 0; c < d; ++c) {
        const double dxhat = node.grad[r * d + c] * gc.value()[c];
        gx[r * d + c] =
            inv_std[r] * (dxhat - mean_dxhat - xhat[r * d + c] * mean_dxhat_xhat);
      }
    }
    node.parents[0]->accumulate(gx);
    node.parents[1]->accumulate(ggamma);
    node.parents[2]->accumulate(gbeta);
  });
}

Var multihead_attention(const Var& q, const Var& k, const Var& v, long heads) {
  const long nq = rows_of(q), d = cols_of(q);
  const long nk = rows_of(k);
  if (cols_of(k) != d || cols_of(v) != d || rows_of(v) != nk) {
    throw DimensionError("multihead_attention: shape mismatch");
  }
  if (d % heads != 0) {
    throw DimensionError("multihead_attention: dim not divisible by heads");
  }
  const long dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out({nq, d});
  // One softmaxed attention matrix per head, saved for backward.
  std::vector<RowMat> attn(static_cast<std::size_t>(heads));
  ConstMatMap qm = q.value().mat(nq, d);
  ConstMatMap km = k.value().mat(nk, d);
  ConstMatMap vm = v.value().mat(nk, d);
  MatMap om = out.mat(nq, d);
  for (long h = 0; h < heads; ++h) {
    RowMat s = qm.middleCols(h * dh, dh) * km.middleCols(h * dh, dh).transpose();
    s *= scale;
    for (long r = 0; r < nq; ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    om.middleCols(h * dh, dh).noalias() = s * vm.middleCols(h * dh, dh);
    attn[static_cast<std::size_t>(h)] = std::move(s);
  }

  Var qc = q, kc = k, vc = v;
  return make_op(std::move(out), {q, k, v},
                 [nq, nk, d, dh, heads, scale, attn = std::move(attn), qc, kc,
                  vc](Node& node) {
    ConstMatMap g(node.grad.data(), nq, d);
    ConstMatMap qm = qc.value().mat(nq, d);
    ConstMatMap km = kc.value().mat(nk, d);
    ConstMatMap vm = vc.value().mat(nk, d);
    Tensor gq({nq, d}), gk({nk, d}), gv({nk, d});
    MatMap gqm = gq.mat(nq, d);
    MatMap gkm = gk.mat(nk, d);
    MatMap gvm = gv.mat(nk, d);
    for (long h = 0; h < heads; ++h) {
      const RowMat& a = attn[static_cast<std::size_t>(h)];
      RowMat go = g.middleCols(h * dh, dh);
      gvm.middleCols(h * dh, dh).noalias() = a.transpose() * go;
      RowMat da = go * vm.middleCols(h * dh, dh).transpose();  // [nq, nk]
      // softmax backward per row
      RowMat ds(nq, nk);
      for (long r = 0; r < nq; ++r) {
        const double dot = (da.row(r).array() * a.row(r).array()).sum();
        ds.row(r) = a.row(r).array() * (da.row(r).array() - dot);
      }
      ds *= scale;
      gqm.middleCols(h * dh, dh).noalias() = ds * km.middleCols(h * dh, dh);
      gkm.middleCols(h * dh, dh).noalias() = ds.transpose() * qm.middleCols(h * dh, dh);
    }
    node.parents[0]->accumulate(gq);
    node.parents[1]->accumulate(gk);
    node.parents[2]->accumulate(gv);
  });
}

namespace {

struct ConvDims {
  long h, w, cin, kh, kw, cout, ho, wo;
};

ConvDims conv_dims(const Var& x, const Var& w, long stride, long pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4) {
    throw DimensionError("conv2d: expected x[H,W,Cin], w[KH,KW,Cin,Cout]");
  }
  ConvDims d;
  d.h = xs[0];
  d.w = xs[1];
  d.cin = xs[2];
  d.kh = ws[0];
  d.kw = ws[1];
  d.cout = ws[3];
  if (ws[2] != d.cin) throw DimensionError("conv2d: channel mismatch");
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.ho < 1 || d.wo < 1) throw DimensionError("conv2d: output would be empty");
  return d;
}

// Patch matrix [Ho*Wo, KH*KW*Cin] from x[H,W,Cin].
Tensor im2col(const Tensor& x, const ConvDims& d, long stride, long pad) {
  Tensor cols({d.ho * d.wo, d.kh * d.kw * d.cin});
  const double* xp = x.data();
  double* cp = cols.data();
  const long patch = d.kh * d.kw * d.cin;
  for (long oy = 0; oy < d.ho; ++oy) {
    for (long ox = 0; ox < d.wo; ++ox) {
      double* row = cp + (oy * d.wo + ox) * patch;
      for (long ky = 0; ky < d.kh; ++ky) {
        const long iy = oy * stride + ky - pad;
        for (long kx = 0; kx < d.kw; ++kx) {
          const long ix = ox * stride + kx - pad;
          double* dst = row + (ky * d.kw + kx) * d.cin;
          if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
            const double* src = xp + (iy * d.w + ix) * d.cin;
            std::copy(src, src + d.cin, dst);
          }
          // else: zero padding, already zero-initialized
        }
      }
    }
  }
  return cols;
}

void col2im_accumulate(const Tensor& gcols, const ConvDims& d, long stride,
                       long pad, Tensor& gx) {
  const double* cp = gcols.data();
  double* xp = gx.data();
  const long patch = d.kh * d.kw * d.cin;
  for (long oy = 0; oy < d.ho; ++oy) {
    for (long ox = 0; ox < d.wo; ++ox) {
      const double* row = cp + (oy * d.wo + ox) * patch;
      for (long ky = 0; ky < d.kh; ++ky) {
        const long iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= d.h) continue;
        for (long kx = 0; kx < d.kw; ++kx) {
          const long ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= d.w) continue;
          const double* src = row + (ky * d.kw + kx) * d.cin;
          double* dst = xp + (iy * d.w + ix) * d.cin;
          for (long c = 0; c < d.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, long stride, long pad) {
  const ConvDims d = conv_dims(x, w, stride, pad);
  if (vec_len(b, "conv2d") != d.cout) {
    throw DimensionError("conv2d: bias length != output channels");
  }
  Tensor cols = im2col(x.value(), d, stride, pad);
  const long patch = d.kh * d.kw * d.cin;
  Tensor out({d.ho, d.wo, d.cout});
  MatMap om = out.mat(d.ho * d.wo, d.cout);
  om.noalias() = cols.mat(d.ho * d.wo, patch) * w.value().mat(patch, d.cout);
  om.rowwise() += ConstVecMap(b.value().data(), d.cout).transpose();

  Var wc = w;
  return make_op(std::move(out), {x, w, b},
                 [d, stride, pad, patch, cols = std::move(cols), wc](Node& node) {
    ConstMatMap g(node.grad.data(), d.ho * d.wo, d.cout);
    if (node.parents[1]->requires_grad) {
      Tensor gw({d.kh, d.kw, d.cin, d.cout});
      gw.mat(patch, d.cout).noalias() =
          cols.mat(d.ho * d.wo, patch).transpose() * g;
      node.parents[1]->accumulate(gw);
    }
    if (node.parents[2]->requires_grad) {
      Tensor gb(node.parents[2]->value.shape());
      VecMap(gb.data(), d.cout) = g.colwise().sum().transpose();
      node.parents[2]->accumulate(gb);
    }
    if (node.parents[0]->requires_grad) {
      Tensor gcols({d.ho * d.wo, patch});
      gcols.mat(d.ho * d.wo, patch).noalias() =
          g * wc.value().mat(patch, d.cout).transpose();
      Tensor gx({d.h, d.w, d.cin});
      col2im_accumulate(gcols, d, stride, pad, gx);
      node.parents[0]->accumulate(gx);
    }
  });
}

namespace {

struct SampleTap {
  long cell;      // flattened (i * W + j)
  double weight;
};

// Bilinear taps with border clamp; cell (i, j) center sits at normalized
// ((j + 0.5) / W, (i + 0.5) / H).
std::vector<SampleTap> bilinear_taps(double x, double y, long h, long w) {
  const double u = x * static_cast<double>(w) - 0.5;
  const double v = y * static_cast<double>(h) - 0.5;
  const double uc = std::min(std::max(u, 0.0), static_cast<double>(w - 1));
  const double vc = std::min(std::max(v, 0.0), static_cast<double>(h - 1));
  const long j0 = static_cast<long>(std::floor(uc));
  const long i0 = static_cast<long>(std::floor(vc));
  const long j1 = std::min(j0 + 1, w - 1);
  const long i1 = std::min(i0 + 1, h - 1);
  const double fu = uc - static_cast<double>(j0);
  const double fv = vc - static_cast<double>(i0);
  return {{i0 * w + j0, (1 - fu) * (1 - fv)},
          {i0 * w + j1, fu * (1 - fv)},
          {i1 * w + j0, (1 - fu) * fv},
          {i1 * w + j1, fu * fv}};
}

Var sample_impl(const Var& map, const std::vector<double>& points_xy,
                bool bilinear) {
  const auto& s = map.shape();
  if (s.size() != 3) throw DimensionError("sample: expected map [H,W,D]");
  if (points_xy.size() % 2 != 0) throw DimensionError("sample: odd point array");
  const long h = s[0], w = s[1], d = s[2];
  const long m = static_cast<long>(points_xy.size()) / 2;
  std::vector<std::vector<SampleTap>> taps(static_cast<std::size_t>(m));
  for (long p = 0; p < m; ++p) {
    const double x = points_xy[static_cast<std::size_t>(2 * p)];
    const double y = points_xy[static_cast<std::size_t>(2 * p + 1)];
    if (bilinear) {
      taps[static_cast<std::size_t>(p)] = bilinear_taps(x, y, h, w);
    } else {
      const double u = x * static_cast<double>(w) - 0.5;
      const double v = y * static_cast<double>(h) - 0.5;
      const long j = std::min(std::max<long>(std::lround(u), 0), w - 1);
      const long i = std::min(std::max<long>(std::lround(v), 0), h - 1);
      taps[static_cast<std::size_t>(p)] = {{i * w + j, 1.0}};
    }
  }
  Tensor out({m, d});
  for (long p = 0; p < m; ++p) {
    for (const auto& t : taps[static_cast<std::size_t>(p)]) {
      const double* src = map.value().data() + t.cell * d;
      double* dst = out.data() + p * d;
      for (long c = 0; c < d; ++c) dst[c] += t.weight * src[c];
    }
  }
  return make_op(std::move(out), {map}, [taps = std::move(taps), d](Node& node) {
    Tensor g(node.parents[0]->value.shape());
    const long m = static_cast<long>(taps.size());
    for (long p = 0; p < m; ++p) {
      for (const auto& t : taps[static_cast<std::size_t>(p)]) {
        double* dst = g.data() + t.cell * d;
        const double* src = node.grad.data() + p * d;
        for (long c = 0; c < d; ++c) dst[c] += t.weight * src[c];
      }
    }
    node.parents[0]->accumulate(g);
  });
}

}  // namespace

Var bilinear_sample(const Var& map, const std::vector<double>& points_xy) {
  return sample_impl(map, points_xy, true);
}

Var nearest_sample(const Var& map, const std::vector<double>& points_xy) {
  return sample_impl(map, points_xy, false);
}

}  // namespace fscd::nn
