#pragma once

#include <string>
#include <vector>

#include "fscd/nn/autodiff.hpp"

namespace fscd::nn {

struct NamedParam {
  std::string name;
  Var var;
};

using ParamList = std::vector<NamedParam>;

/// Rescales all gradients in place so the global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_global_grad_norm(const ParamList& params, double max_norm);

void zero_grads(const ParamList& params);

/// Decoupled-weight-decay Adam with per-group learning rates.
class AdamW {
 public:
  struct Group {
    ParamList params;
    double lr;
    double weight_decay = 1e-4;
  };

  explicit AdamW(std::vector<Group> groups, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  long step_count() const { return t_; }
  std::vector<Group>& groups() { return groups_; }

 private:
  std::vector<Group> groups_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<Tensor>> m_;  // [group][param]
  std::vector<std::vector<Tensor>> v_;
};

}  // namespace fscd::nn
