#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace echoflow::nn {

// The gradient-check test target rebuilds the engine in double precision.
#ifdef ECHOFLOW_NN_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

// Aligned storage keeps Eigen's vectorized reductions independent of where
// the heap happens to place a buffer; results are then bit-reproducible.
using Buffer = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

using Shape = std::vector<int>;

size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  std::span<Scalar> ensure_grad();
};

// Shared handle to a node of the autograd graph. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, Scalar value);
  static Tensor from(Shape shape, std::span<const Scalar> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[size_t(i < 0 ? int(node_->shape.size()) + i : i)]; }
  int rank() const { return int(node_->shape.size()); }
  size_t numel() const { return node_->value.size(); }

  std::span<Scalar> data() { return node_->value; }
  std::span<const Scalar> data() const { return node_->value; }
  std::span<Scalar> grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  // Detached deep copy of the values.
  Tensor clone() const;

 private:
  std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from `root`, seeded with d(loss)/d(root).
void backward(const Tensor& root, std::span<const Scalar> seed);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace echoflow::nn
