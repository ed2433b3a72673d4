#pragma once

#include "mat/real.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mat {
inline namespace MAT_REAL_NS {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct Node;
}

// Dense row-major tensor (elements of type Real) of rank 1..3. Copies share storage (handle
// semantics); use clone() for an independent copy. Tensors produced by ops
// while gradient recording is enabled keep references to their inputs so
// that backward() can walk the graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Real> data() const;
  std::span<Real> data();
  // Gradient buffer; allocated on first access for tensors that require grad.
  std::span<const Real> grad() const;
  std::span<Real> grad();
  bool has_grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  void zero_grad();

  Real item() const;
  Real at(std::size_t i, std::size_t j) const;

  Tensor clone(bool requires_grad = false) const;
  Tensor reshape(Shape shape) const;

  std::string_view op_name() const;
  std::uint64_t id() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Receives the gradient of the op output; must accumulate into inputs.
using BackwardFn = std::function<void(std::span<const Real> out_grad)>;

// Creates an op result. When recording is enabled and any input requires
// grad, the result joins the computation graph with `backward` as its rule.
// Throws NumericError if `values` contains a non-finite entry.
Tensor make_op_result(std::string_view op, Shape shape, std::vector<Real> values,
                      std::vector<Tensor> inputs, BackwardFn backward);

bool grad_recording_enabled() noexcept;

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// The ordered set of recorded nodes reachable from a root. Nodes appear in
// creation order, which is a topological order of the graph.
class ComputationRecord {
 public:
  static ComputationRecord trace(const Tensor& root);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool is_topological() const;
  std::vector<std::string> op_names() const;

  // Zeroes interior gradients, seeds the root with 1 and applies each
  // backward rule exactly once in reverse order. Returns the number of
  // rules applied.
  std::size_t run_backward();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Reverse-mode differentiation of a scalar loss. Leaf gradients accumulate
// across calls until zero_grad().
void backward(const Tensor& loss);

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  std::span<Real> grad_buffer();
};

}  // namespace detail

}  // namespace MAT_REAL_NS
}  // namespace mat
