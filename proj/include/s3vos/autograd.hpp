#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "s3vos/tensor.hpp"

namespace s3vos {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. `backward` reads `grad` of this node
/// and accumulates into the grads of `inputs`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor(value.rows(), value.cols());
    return grad;
  }
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool valid() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }
  void zero_grad() { node_->grad = Tensor(); }

 private:
  NodePtr node_;
};

/// Leaf holding data that never receives gradient.
Var constant(Tensor value);

/// Leaf that accumulates gradient across backward passes until zero_grad.
Var parameter(Tensor value);

/// Creates an interior node. If no input requires grad, the result is a
/// constant and `backward` is dropped.
Var make_node(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// While alive, new nodes record no backward edges on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse pass from `root`, seeding its gradient with `seed`
/// (ones when `seed` is empty).
void backward(const Var& root, const Tensor& seed = Tensor());

}  // namespace s3vos
