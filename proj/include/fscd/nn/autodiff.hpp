#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "fscd/nn/tensor.hpp"

namespace fscd::nn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. Values are computed eagerly when an
/// op is applied; `backward_fn` reads this node's grad and accumulates into
/// the parents' grads.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
  void accumulate(const Tensor& g);
  void accumulate_mat(const ConstMatMap& g);
};

/// Value-semantic handle to a tape node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var leaf(Tensor value, bool requires_grad);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value_mut() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad_ready; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad();

  const std::vector<long>& shape() const { return node_->value.shape(); }
  long numel() const { return node_->value.numel(); }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

/// Runs reverse-mode accumulation from a scalar root. Grad buffers of every
/// reachable node that requires grad are filled; leaves keep theirs until
/// zero_grad.
void backward(const Var& root);

/// Builds a non-leaf node. requires_grad is inherited from the parents; the
/// backward_fn is dropped when no parent needs gradients.
Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward_fn);

}  // namespace fscd::nn
