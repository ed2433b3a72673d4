// Finite-difference checks against the double-precision build of the core.
// In float32 the loss itself is rounded to ~1e-7 relative, which at a 1e-3
// step leaves ~1e-4 of noise in every numeric derivative; the analytic
// gradients are the same code in both builds.
#ifndef MAT_REAL_DOUBLE
#error "compile this file with MAT_REAL_DOUBLE"
#endif

#include <random>
#include <type_traits>

#include "doctest.h"
#include "mat/attention.hpp"
#include "mat/grad_check.hpp"
#include "mat/mask.hpp"
#include "mat/model.hpp"
#include "mat/ops.hpp"
#include "mat/training.hpp"
#include "test_util.hpp"

using namespace mat;
using mat::test::random_tokens;
using mat::test::tiny_config;

static_assert(std::is_same_v<Real, double>);

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool grad = false) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

Example copy_example(std::mt19937_64& rng, std::size_t len) {
  const auto ids = random_tokens(rng, len, 11);
  Example ex;
  ex.src = ids;
  ex.src.push_back(kEosId);
  ex.tgt_in = {kBosId};
  ex.tgt_in.insert(ex.tgt_in.end(), ids.begin(), ids.end());
  ex.tgt_out = ids;
  ex.tgt_out.push_back(kEosId);
  return ex;
}

}  // namespace

TEST_CASE("f64: every op passes the gradient check") {
  std::mt19937_64 rng(8);
  Tensor a = random_tensor(rng, {3, 4}, true), b = random_tensor(rng, {4, 5}, true);
  Tensor c = random_tensor(rng, {6, 5}, true), bias = random_tensor(rng, {5}, true);
  Tensor gain = random_tensor(rng, {5}, true), lnb = random_tensor(rng, {5}, true);
  Tensor table = random_tensor(rng, {6, 4}, true);
  const TokenId ids[] = {1, 4, 1};
  const TokenId targets[] = {2, 0, 4};
  const auto mask = build_mask(MaskKind::Banded, 3, 2);
  auto loss = [&] {
    Tensor h = add(matmul(a, b), matmul(embedding(table, ids, 1.5), b));
    h = layer_norm(relu(add_bias(h, bias)), gain, lnb, 1e-5);
    Tensor s = matmul_nt(h, h);
    Tensor p = softmax_masked(scale(s, 0.3), mask);
    Tensor logits = matmul_nt(matmul(p, h), add(c, c));
    return add(cross_entropy(mul(logits, logits), targets, 0.1f, -1), sum(scale(mul(a, a), 0.01)));
  };
  const NamedTensor params[] = {{"a", a},       {"b", b},     {"c", c},        {"bias", bias},
                                {"gain", gain}, {"lnb", lnb}, {"table", table}};
  GradCheckOptions opts;
  opts.samples_per_tensor = 12;
  const auto report = grad_check(loss, params, opts);
  CHECK_MESSAGE(report.passed, "max rel " << report.max_rel_error);
}

TEST_CASE("f64: attention gradients") {
  std::mt19937_64 rng(13);
  const std::size_t n = 5, d = 4;
  Tensor x = random_tensor(rng, {n, d}, true), mem = random_tensor(rng, {n + 1, d}, true);
  Tensor stat = random_tensor(rng, {n, d}, true);
  AttentionParams p{random_tensor(rng, {d, d}, true), random_tensor(rng, {d, d}, true),
                    random_tensor(rng, {d, d}, true), random_tensor(rng, {d, d}, true)};
  const auto mask = build_mask(MaskKind::Banded, n, 2);
  auto loss = [&] {
    Tensor self = transparent_self_attention(x, stat, AttentionMask::banded(n, 3), p, 2);
    Tensor cross = multi_head_attention(self, mem, std::nullopt, p, 2);
    Tensor out = multi_head_attention(cross, cross, mask, p, 2);
    return sum(mul(out, out));
  };
  const NamedTensor params[] = {{"x", x},       {"mem", mem}, {"stat", stat}, {"wq", p.w_q},
                                {"wk", p.w_k}, {"wv", p.w_v}, {"wo", p.w_o}};
  GradCheckOptions opts;
  opts.samples_per_tensor = 8;
  const auto report = grad_check(loss, params, opts);
  CHECK_MESSAGE(report.passed, "max rel " << report.max_rel_error);
}

TEST_CASE("f64: model gradients, both layer-norm placements") {
  std::mt19937_64 rng(9);
  for (Variant v : {Variant::AT, Variant::TAT, Variant::MAT}) {
    for (bool post : {true, false}) {
      auto c = tiny_config(v, 2, 2, 11);
      c.post_layernorm = post;
      const Model m = Model::create(c);
      const auto src = random_tokens(rng, 5, 11), tgt = random_tokens(rng, 6, 11, true);
      std::vector<TokenId> out(tgt.begin() + 1, tgt.end());
      out.push_back(kEosId);
      auto loss = [&] { return cross_entropy(decode_forward(m, encode(m, src), tgt), out, 0.1f, kPadId); };
      GradCheckOptions opts;
      opts.samples_per_tensor = 3;
      opts.seed = 4;
      const auto params = m.params().named();
      const auto report = grad_check(loss, params, opts);
      CHECK_MESSAGE(report.passed, to_string(v) << " post=" << post << " max rel " << report.max_rel_error);
    }
  }
}

TEST_CASE("f64: batched nll_loss gradients") {
  std::mt19937_64 rng(10);
  for (Variant v : {Variant::AT, Variant::TAT, Variant::MAT}) {
    const Model m = Model::create(tiny_config(v, 2, 2, 21));
    // uneven lengths so padding is exercised
    const std::vector<Example> ex = {copy_example(rng, 4), copy_example(rng, 2)};
    const Batch b = make_batch(ex);
    GradCheckOptions opts;
    opts.samples_per_tensor = 3;
    opts.kink_refinements = 3;
    const auto params = m.params().named();
    const auto report = grad_check([&] { return nll_loss(m, b, 0.1f); }, params, opts);
    CHECK_MESSAGE(report.passed, to_string(v) << " max rel " << report.max_rel_error);
    CHECK(report.refined <= report.entries.size() / 10);
  }
}

TEST_CASE("f64: kink refinement does not rescue a wrong gradient") {
  // x sits 1e-4 from the relu kink, inside the default stencil
  Tensor x = Tensor::from_data({2}, {1e-4, -2e-4}, true);
  const NamedTensor params[] = {{"x", x}};
  GradCheckOptions opts;
  CHECK_FALSE(grad_check([&] { return sum(relu(x)); }, params, opts).passed);
  opts.kink_refinements = 3;
  const auto kinked = grad_check([&] { return sum(relu(x)); }, params, opts);
  CHECK(kinked.passed);
  CHECK(kinked.refined == 2);

  // Doubles its input, but the backward rule claims a factor of 3.
  auto broken = [&] {
    std::vector<Real> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= 2.0;
    Tensor cx = x;
    return make_op_result("broken_double", x.shape(), std::move(out), {x}, [cx](std::span<const Real> g) mutable {
      auto d = cx.grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += 3.0 * g[i];
    });
  };
  const auto wrong = grad_check([&] { return sum(mul(broken(), x)); }, params, opts);
  CHECK_FALSE(wrong.passed);
  CHECK(wrong.refined == 0);
}
