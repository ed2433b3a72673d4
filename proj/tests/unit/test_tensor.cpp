#include <cmath>
#include <limits>

#include "doctest.h"
#include "mat/errors.hpp"
#include "mat/grad_check.hpp"
#include "mat/ops.hpp"
#include "mat/tensor.hpp"

using namespace mat;

TEST_CASE("tensor construction and shape checks") {
  const Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6.0f);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({1, 2, 3, 4}), DimensionError);
  CHECK_FALSE(t.requires_grad());
  CHECK_THROWS(t.grad());
  const Tensor r = Tensor::from_data({2, 2, 2}, std::vector<float>(8, 1.0f));
  CHECK(r.rows() == 4);
}

TEST_CASE("non-finite values are rejected") {
  const float inf = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(scale(Tensor::from_data({1}, {inf}), 1.0f), NumericError);
  const Tensor big = Tensor::from_data({1, 1}, {3e38f});
  CHECK_THROWS_AS(add(big, big), NumericError);
}

TEST_CASE("handles share storage, clone does not") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = a;
  Tensor c = a.clone();
  a.data()[0] = 9.0f;
  CHECK(b.data()[0] == 9.0f);
  CHECK(c.data()[0] == 1.0f);
}

TEST_CASE("backward of sum gives ones") {
  Tensor x = Tensor::from_data({2, 3}, {1, -2, 3, 0.5f, 7, 8}, true);
  backward(sum(x));
  for (float g : x.grad()) CHECK(g == 1.0f);
}

TEST_CASE("backward of sum(x*x)/2 gives x") {
  Tensor x = Tensor::from_data({4}, {1, -2, 3, 0.25f}, true);
  backward(scale(sum(mul(x, x)), 0.5f));
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("repeated backward accumulates until zero_grad") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum(x));
  backward(sum(x));
  CHECK(x.grad()[1] == 2.0f);
  x.zero_grad();
  CHECK(x.grad()[1] == 0.0f);
}

TEST_CASE("backward requires a scalar") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0f)), DimensionError);
}

TEST_CASE("computation record is topological and walked once") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  Tensor b = Tensor::from_data({2, 2}, {0.5f, -1, 2, 1}, true);
  Tensor h = matmul(a, b);
  Tensor loss = sum(mul(h, add(h, a)));
  auto rec = ComputationRecord::trace(loss);
  CHECK(rec.is_topological());
  CHECK(rec.size() == 6);  // a, b, matmul, add, mul, sum
  CHECK(rec.op_names().back() == "sum");
  CHECK(rec.run_backward() == 4);  // interior ops each applied once
}

TEST_CASE("no-grad guard skips recording") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  {
    NoGradGuard ng;
    Tensor y = scale(x, 3.0f);
    CHECK_FALSE(y.requires_grad());
    CHECK(ComputationRecord::trace(y).size() == 0);
  }
  CHECK(scale(x, 3.0f).requires_grad());
}

TEST_CASE("determinism of forward ops") {
  auto run = [] {
    Tensor a = Tensor::from_data({2, 3}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f});
    Tensor b = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    return layer_norm(matmul(a, b), Tensor::full({2}, 1.0f), Tensor::zeros({2}), 1e-5f);
  };
  const Tensor x = run(), y = run();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.data()[i] == y.data()[i]);
}

TEST_CASE("grad_check on half squared norm") {
  Tensor theta = Tensor::from_data({5}, {0.3f, -1.2f, 2.0f, 0.7f, -0.1f}, true);
  const NamedTensor p[] = {{"theta", theta}};
  const auto report = grad_check([&] { return scale(sum(mul(theta, theta)), 0.5f); }, p);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-3);
  CHECK(report.entries.size() == 5);
}

namespace {

// Doubles its input, but the backward rule claims a factor of 3.
Tensor broken_double(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= 2.0f;
  Tensor cx = x;
  return make_op_result("broken_double", x.shape(), std::move(out), {x}, [cx](std::span<const float> g) mutable {
    auto d = cx.grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += 3.0f * g[i];
  });
}

}  // namespace

TEST_CASE("grad_check catches a corrupted backward rule") {
  Tensor x = Tensor::from_data({3}, {0.5f, 1.5f, -2.0f}, true);
  const NamedTensor p[] = {{"x", x}};
  const auto report = grad_check([&] { return sum(mul(broken_double(x), x)); }, p);
  CHECK_FALSE(report.passed);
  CHECK(report.max_rel_error > 0.1);
}
