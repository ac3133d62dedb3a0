#pragma once

// Define-by-run reverse-mode differentiation. Every differentiable op returns
// a Var whose node remembers its inputs and a closure that pushes the node's
// gradient back to them. The graph lives exactly as long as the Vars that
// reference it.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "modeseg/tensor.hpp"

namespace modeseg {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  std::string label;

  bool is_leaf() const noexcept { return !backward_fn; }

  /// Adds `g` into this node's gradient, allocating it on first use.
  void accumulate(const Tensor<T>& g);
  /// Returns the gradient buffer, zero-initialized on first access.
  Tensor<T>& grad_buffer();
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false, std::string label = {})
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->label = std::move(label);
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct access for optimizers and checkpoint loading; never used by ops.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

  const std::string& label() const { return node_->label; }
  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the result Var of an op. The backward closure is only kept when at
/// least one input requires a gradient, so inference builds no graph.
template <typename T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs,
                   std::function<void(Node<T>&)> backward_fn, std::string label);

/// Populates gradients of every requires_grad tensor reachable from `loss`.
/// Leaf gradients accumulate across calls; intermediate gradients are reset.
template <typename T>
void backward(const Var<T>& loss);

/// Visits reachable nodes in topological order (inputs before consumers).
template <typename T>
std::vector<Node<T>*> topological_order(const Var<T>& root);

// Elementwise and reduction helpers used by losses and tests.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

}  // namespace modeseg
