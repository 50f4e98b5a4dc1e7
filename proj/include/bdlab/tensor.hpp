#pragma once

// Dense float64 tensors with a dynamically recorded reverse-mode autodiff
// graph. A Tensor is a cheap shared handle; operations never mutate their
// inputs and return a fresh node that remembers how to push gradients back.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Size of a dimension; negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access, intended for parameter updates outside the graph.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  // calls; interior gradients are recomputed each time.
  void backward() const;

  // Same values, cut from the graph.
  Tensor detach() const;
  // Deep copy of values into a new leaf.
  Tensor clone(bool requires_grad = false) const;

  // Identity of the underlying storage.
  const void* id() const { return node_.get(); }

  // Builds an interior node. The backward closure is only retained when grad
  // recording is enabled and some parent requires grad.
  static Tensor make_result(Shape shape, std::vector<double> data,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Keeps large tensor buffers in the heap arena instead of fresh mmap
// regions, which otherwise page-fault on every training step. Process-wide.
void configure_allocator();

// Grad recording is enabled by default, per thread.
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

// ---------------------------------------------------------------------------
// Differentiable primitives. Binary elementwise ops broadcast numpy-style.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor transpose_last2(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
// Gathers rows of a [rows, width] table; output shape is index_shape + [width].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, Shape index_shape);
// x / sqrt(mean(x^2) + eps) over the last dimension.
Tensor rms_normalize_lastdim(const Tensor& x, double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);

// Counter-based dropout. `stream` identifies the call site; identical
// (seed, stream) pairs reproduce the same mask. Identity when !train or p == 0.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};
Tensor dropout(const Tensor& x, double p, DropoutKey key, bool train);

// Mean token cross-entropy over active rows of a [t, c] logit matrix.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     const std::vector<bool>& active);
// Sum over active rows divided by `denominator`; used to split one logical
// batch across accumulation steps without changing the total gradient.
Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets,
                         const std::vector<bool>& active, double denominator);

// ---------------------------------------------------------------------------
// Finite-difference verification.

// max_i |autodiff_i - fd_i| / (|fd_i| + 1e-8), fd_i = (f(x+h e_i) - f(x-h e_i)) / 2h.
double fd_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace bdlab
