#include "fscd/nn/autodiff.hpp"

#include <unordered_set>

#include "fscd/errors.hpp"

namespace fscd::nn {

Tensor& Node::ensure_grad() {
  if (!grad_ready) {
    grad = Tensor::zeros(value.shape());
    grad_ready = true;
  }
  return grad;
}

void Node::accumulate(const Tensor& g) {
  Tensor& dst = ensure_grad();
  const std::size_t n = dst.vec().size();
  for (std::size_t i = 0; i < n; ++i) dst.vec()[i] += g.vec()[i];
}

void Node::accumulate_mat(const ConstMatMap& g) {
  Tensor& dst = ensure_grad();
  MatMap(dst.data(), g.rows(), g.cols()) += g;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = false;
  return Var(std::move(n));
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

void Var::zero_grad() {
  if (node_) {
    node_->grad = Tensor();
    node_->grad_ready = false;
  }
}

Var make_op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Var& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (const Var& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined()) throw ValueError("backward: undefined root");
  if (root.numel() != 1) {
    throw ValueError("backward: root must be scalar, got shape " +
                     shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for the topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* parent = node->parents[idx++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] = 1.0;

  // order is post-order: parents before children; walk it backwards.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad_ready) {
      node->backward_fn(*node);
    }
  }
}

}  // namespace fscd::nn
