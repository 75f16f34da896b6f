#include "echoflow/nn/tensor.hpp"

#include <unordered_set>

#include "echoflow/error.hpp"

namespace echoflow::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

size_t numel(const Shape& shape) {
  size_t n = 1;
  for (int d : shape) n *= size_t(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

std::span<Scalar> Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), Scalar(0));
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value.assign(nn::numel(shape), Scalar(0));
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::filled(Shape shape, Scalar value) {
  auto t = zeros(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::span<const Scalar> values, bool requires_grad) {
  if (values.size() != nn::numel(shape))
    throw Error(ErrorCode::ShapeMismatch, "tensor data does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(values.begin(), values.end());
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  return from(shape(), data());
}

void backward(const Tensor& root, std::span<const Scalar> seed) {
  if (!root.requires_grad()) return;
  if (seed.size() != root.numel())
    throw Error(ErrorCode::ShapeMismatch, "backward seed size mismatch");

  // Iterative post-order DFS to get a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto g = root.node()->ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      // Interior gradients are not needed after propagation.
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace echoflow::nn
