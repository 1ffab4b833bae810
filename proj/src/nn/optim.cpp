#include "fscd/nn/optim.hpp"

#include <cmath>

namespace fscd::nn {

double clip_global_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.var.has_grad()) continue;
    for (double g : p.var.grad().vec()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      for (double& g : p.var.node()->grad.vec()) g *= scale;
    }
  }
  return norm;
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Var v = p.var;
    v.zero_grad();
  }
}

AdamW::AdamW(std::vector<Group> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(groups_.size());
  v_.resize(groups_.size());
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (const auto& p : groups_[g].params) {
      m_[g].push_back(Tensor::zeros(p.var.shape()));
      v_[g].push_back(Tensor::zeros(p.var.shape()));
    }
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    Group& grp = groups_[g];
    for (std::size_t i = 0; i < grp.params.size(); ++i) {
      Var& var = grp.params[i].var;
      if (!var.has_grad()) continue;
      Tensor& theta = var.value_mut();
      const Tensor& grad = var.grad();
      Tensor& m = m_[g][i];
      Tensor& v = v_[g][i];
      for (long k = 0; k < theta.numel(); ++k) {
        const double gk = grad[k];
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        theta[k] -= grp.lr * (mhat / (std::sqrt(vhat) + eps_) +
                              grp.weight_decay * theta[k]);
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& grp : groups_) zero_grads(grp.params);
}

}  // namespace fscd::nn
