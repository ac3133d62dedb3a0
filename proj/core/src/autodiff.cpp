#include "modeseg/autodiff.hpp"

#include <unordered_set>

namespace modeseg {

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad = Tensor<T>(value.shape());
  return grad;
}

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
  require_same_shape(g.shape(), value.shape(), "gradient accumulation");
  if (grad.empty()) {
    grad = g;
    return;
  }
  T* dst = grad.ptr();
  const T* src = g.ptr();
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

template <typename T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs,
                   std::function<void(Node<T>&)> backward_fn, std::string label) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->label = std::move(label);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->backward_fn = std::move(backward_fn);
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
  }
  return Var<T>(std::move(node));
}

template <typename T>
std::vector<Node<T>*> topological_order(const Var<T>& root) {
  std::vector<Node<T>*> order;
  if (!root.defined()) return order;
  std::unordered_set<Node<T>*> visited;
  // Iterative post-order DFS; graphs can be a few hundred nodes deep.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tensor requiring a gradient");
  }
  auto order = topological_order(loss);
  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad = Tensor<T>();
  }
  Node<T>* root = loss.node();
  if (root->is_leaf()) {
    root->accumulate(Tensor<T>(root->value.shape(), T{1}));
    return;
  }
  root->grad = Tensor<T>(root->value.shape(), T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward_fn(*n);
  }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->accumulate(self.grad);
    }
  }, "add");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& x = *self.inputs[0];
    Node<T>& y = *self.inputs[1];
    const std::size_t n = self.grad.numel();
    if (x.requires_grad) {
      Tensor<T> g(x.value.shape());
      for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * y.value[i];
      x.accumulate(g);
    }
    if (y.requires_grad) {
      Tensor<T> g(y.value.shape());
      for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * x.value[i];
      y.accumulate(g);
    }
  }, "mul");
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * factor;
  return make_result<T>(std::move(out), {a}, [factor](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * factor;
    self.inputs[0]->accumulate(g);
  }, "scale");
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data()) acc += v;
  Tensor<T> out(Shape{1}, static_cast<T>(acc));
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    Node<T>& x = *self.inputs[0];
    x.accumulate(Tensor<T>(x.value.shape(), self.grad[0]));
  }, "sum");
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto n = static_cast<T>(a.numel());
  return scale(sum(a), T{1} / n);
}

#define MODESEG_INSTANTIATE(T)                                                          \
  template struct Node<T>;                                                              \
  template Var<T> make_result<T>(Tensor<T>, const std::vector<Var<T>>&,                 \
                                 std::function<void(Node<T>&)>, std::string);           \
  template std::vector<Node<T>*> topological_order<T>(const Var<T>&);                   \
  template void backward<T>(const Var<T>&);                                             \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> scale<T>(const Var<T>&, T);                                           \
  template Var<T> sum<T>(const Var<T>&);                                                \
  template Var<T> mean<T>(const Var<T>&);

MODESEG_INSTANTIATE(float)
MODESEG_INSTANTIATE(double)

#undef MODESEG_INSTANTIATE

}  // namespace modeseg
