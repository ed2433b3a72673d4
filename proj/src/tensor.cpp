#include "mat/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mat/errors.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};
thread_local bool g_recording = true;

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw DimensionError("tensor rank must be 1..3, got " + std::to_string(shape.size()));
  }
}

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<Real> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  if (requires_grad) {
    node->grad.assign(node->data.size(), 0.0f);
  }
  return node;
}

const detail::Node& require(const std::shared_ptr<detail::Node>& node) {
  if (!node) {
    throw Error("use of an undefined tensor");
  }
  return *node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::span<Real> detail::Node::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<Real>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<Real> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return require(node_).shape; }
std::size_t Tensor::numel() const { return require(node_).data.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() == 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<const Real> Tensor::data() const { return require(node_).data; }
std::span<Real> Tensor::data() {
  require(node_);
  return node_->data;
}

std::span<const Real> Tensor::grad() const {
  require(node_);
  if (!node_->requires_grad) throw Error("grad() on a tensor that does not require grad");
  return node_->grad_buffer();
}

std::span<Real> Tensor::grad() {
  require(node_);
  if (!node_->requires_grad) throw Error("grad() on a tensor that does not require grad");
  return node_->grad_buffer();
}

bool Tensor::has_grad() const { return node_ && node_->requires_grad; }
bool Tensor::requires_grad() const { return require(node_).requires_grad; }

void Tensor::set_requires_grad(bool value) {
  require(node_);
  node_->requires_grad = value;
  if (value) {
    node_->grad_buffer();
  } else {
    node_->grad.clear();
  }
}

void Tensor::zero_grad() {
  require(node_);
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Real Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->data[0];
}

Real Tensor::at(std::size_t i, std::size_t j) const {
  const auto c = cols();
  if (i >= rows() || j >= c) throw DimensionError("index out of range");
  return node_->data[i * c + j];
}

Tensor Tensor::clone(bool requires_grad) const {
  const auto& n = require(node_);
  return Tensor(new_node(n.shape, n.data, requires_grad));
}

Tensor Tensor::reshape(Shape shape) const {
  const auto& n = require(node_);
  if (shape_numel(shape) != n.data.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(n.shape) + " to " + shape_to_string(shape));
  }
  Tensor src = *this;
  return make_op_result("reshape", std::move(shape), n.data, {src}, [src](std::span<const Real> g) mutable {
    auto dst = src.grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

std::string_view Tensor::op_name() const { return require(node_).op; }
std::uint64_t Tensor::id() const { return require(node_).id; }

Tensor make_op_result(std::string_view op, Shape shape, std::vector<Real> values, std::vector<Tensor> inputs,
                      BackwardFn backward) {
  for (Real v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
    }
  }
  bool record = false;
  if (g_recording) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        record = true;
        break;
      }
    }
  }
  auto node = new_node(std::move(shape), std::move(values), record);
  node->op = std::string(op);
  if (record) {
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) node->parents.push_back(in.node());
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool grad_recording_enabled() noexcept { return g_recording; }

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }

ComputationRecord ComputationRecord::trace(const Tensor& root) {
  ComputationRecord record;
  if (!root.defined() || !root.requires_grad()) return record;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{root.node()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    for (const auto& p : node->parents) {
      if (seen.insert(p.get()).second) stack.push_back(p);
    }
    record.nodes_.push_back(std::move(node));
  }
  std::sort(record.nodes_.begin(), record.nodes_.end(),
            [](const auto& a, const auto& b) { return a->id < b->id; });
  return record;
}

bool ComputationRecord::is_topological() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const auto& p : nodes_[i]->parents) {
      auto it = std::find(nodes_.begin(), nodes_.begin() + static_cast<std::ptrdiff_t>(i), p);
      if (it == nodes_.begin() + static_cast<std::ptrdiff_t>(i)) return false;
    }
  }
  return true;
}

std::vector<std::string> ComputationRecord::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n->op);
  return names;
}

std::size_t ComputationRecord::run_backward() {
  if (nodes_.empty()) return 0;
  for (auto& n : nodes_) {
    if (n->backward) {
      auto g = n->grad_buffer();
      std::fill(g.begin(), g.end(), 0.0f);
    }
  }
  auto& root = *nodes_.back();
  auto root_grad = root.grad_buffer();
  if (root.backward) {
    root_grad[0] = 1.0f;
  } else {
    root_grad[0] += 1.0f;
  }
  std::size_t applied = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = **it;
    if (n.backward) {
      n.backward(n.grad);
      ++applied;
    }
  }
  return applied;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw Error("backward() on a loss that does not depend on any parameter");
  }
  ComputationRecord::trace(loss).run_backward();
}

}  // namespace MAT_REAL_NS
}  // namespace mat
