#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "mat/checkpoint.hpp"
#include "mat/errors.hpp"
#include "mat/ops.hpp"
#include "mat/training.hpp"
#include "test_util.hpp"

using namespace mat;
using mat::test::random_tokens;
using mat::test::tiny_config;

namespace {

Example make_example(std::vector<TokenId> src_ids, std::vector<TokenId> tgt_ids) {
  Example ex;
  ex.src = src_ids;
  ex.src.push_back(kEosId);
  ex.tgt_in = {kBosId};
  ex.tgt_in.insert(ex.tgt_in.end(), tgt_ids.begin(), tgt_ids.end());
  ex.tgt_out = tgt_ids;
  ex.tgt_out.push_back(kEosId);
  return ex;
}

std::vector<Example> copy_examples(std::size_t n, std::size_t len, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ids = random_tokens(rng, len, vocab);
    out.push_back(make_example(ids, ids));
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

TrainingConfig quick_cfg() {
  TrainingConfig t;
  t.base_lr = 0.5;
  t.warmup = 30;
  t.weight_decay = 0.0;
  t.label_smoothing = 0.0f;
  t.batch_tokens = 256;
  t.log_every = 0;
  return t;
}

}  // namespace

TEST_CASE("schedule") {
  CHECK(schedule_factor(400, 400) == doctest::Approx(1.0 / 20.0));
  CHECK(schedule_factor(1, 400) == doctest::Approx(std::pow(400.0, -1.5)));
  CHECK(schedule_factor(1600, 400) == doctest::Approx(1.0 / 40.0));
  TrainingConfig t;
  t.base_lr = 2.0;
  CHECK(learning_rate(t, 400) == doctest::Approx(0.1));
  for (std::size_t s = 1; s < 400; ++s) CHECK(schedule_factor(s, 400) < schedule_factor(s + 1, 400));
  for (std::size_t s = 400; s < 900; ++s) CHECK(schedule_factor(s, 400) > schedule_factor(s + 1, 400));
  CHECK_THROWS_AS(schedule_factor(0, 400), ConfigError);
}

TEST_CASE("training config validation") {
  TrainingConfig t;
  CHECK_NOTHROW(validate_training(t));
  t.beta2 = 1.0;
  CHECK_THROWS_AS(validate_training(t), ConfigError);
  t = TrainingConfig{};
  t.warmup = 0;
  CHECK_THROWS_AS(validate_training(t), ConfigError);
  t = TrainingConfig{};
  t.label_smoothing = -0.1f;
  CHECK_THROWS_AS(validate_training(t), ConfigError);
}

TEST_CASE("zero output embeddings give loss ln V") {
  Model m = Model::create(tiny_config(Variant::MAT));
  for (auto& v : m.params().tgt_embedding.data()) v = 0.0f;
  const auto ex = copy_examples(3, 5, 11, 1);
  const Batch b = make_batch(ex);
  CHECK(nll_loss(m, b, 0.0f).item() == doctest::Approx(std::log(11.0)).epsilon(1e-6));
  CHECK(nll_loss(m, b, 0.1f).item() == doctest::Approx(std::log(11.0)).epsilon(1e-6));
}

TEST_CASE("batch loss is the token-weighted mean of sentence losses") {
  const Model m = Model::create(tiny_config(Variant::AT));
  std::vector<Example> ex = copy_examples(1, 3, 11, 2);
  const auto longer = copy_examples(1, 9, 11, 3);
  ex.push_back(longer[0]);
  const Batch b = make_batch(ex);
  CHECK(b.target_tokens == 4 + 10);
  const auto per = sentence_losses(m, ex);
  NoGradGuard ng;
  CHECK(nll_loss(m, b, 0.0f).item() == doctest::Approx((per[0] + per[1]) / 14.0).epsilon(1e-5));

  // duplicating the batch leaves the mean unchanged
  std::vector<Example> twice = ex;
  twice.insert(twice.end(), ex.begin(), ex.end());
  CHECK(nll_loss(m, make_batch(twice), 0.0f).item() == doctest::Approx(nll_loss(m, b, 0.0f).item()).epsilon(1e-5));
}

TEST_CASE("make_batch layout") {
  const auto ex = copy_examples(2, 3, 11, 4);
  const std::size_t idx[] = {1};
  const Batch b = make_batch(ex, idx);
  CHECK(b.src.batch == 1);
  CHECK(b.tgt_in.ids == ex[1].tgt_in);
  CHECK(b.tgt_out == ex[1].tgt_out);
  CHECK_THROWS_AS(make_batch(std::span<const Example>{}), InputError);
}

TEST_CASE("clip_grad_norm") {
  Tensor x = Tensor::from_data({2}, {0, 0}, true);
  x.grad()[0] = 3.0f;
  x.grad()[1] = 4.0f;
  const NamedTensor p[] = {{"x", x}};
  CHECK(clip_grad_norm(p, 10.0) == doctest::Approx(5.0));
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(clip_grad_norm(p, 1.0) == doctest::Approx(5.0));
  CHECK(x.grad()[0] == doctest::Approx(0.6));
  CHECK(x.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("AdamW minimizes a quadratic") {
  Tensor theta = Tensor::from_data({3}, {2.0f, -1.0f, 0.5f}, true);
  const std::vector<float> target = {-0.5f, 0.25f, 1.0f};
  Parameters fake;
  TrainingConfig t;
  t.base_lr = 1.0;
  t.warmup = 10;
  t.weight_decay = 0.0;
  const NamedTensor p[] = {{"theta", theta}};
  OptimizerState opt;
  opt.m = {std::vector<float>(3, 0.0f)};
  opt.v = {std::vector<float>(3, 0.0f)};
  opt.base_lr = 1.0;
  opt.warmup = 10;
  opt.weight_decay = 0.0;
  for (int step = 0; step < 600; ++step) {
    theta.zero_grad();
    const Tensor diff = add(theta, Tensor::from_data({3}, {0.5f, -0.25f, -1.0f}));
    backward(scale(sum(mul(diff, diff)), 0.5f));
    adamw_update(p, opt);
  }
  CHECK(opt.step == 600);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::fabs(theta.data()[i] - target[i]) < 0.02);
}

TEST_CASE("weight decay with base lr 0 shrinks weights geometrically") {
  Model m = Model::create(tiny_config(Variant::MAT));
  auto params = m.params().named();
  TrainingConfig t;
  t.base_lr = 0.0;
  t.weight_decay = 0.1;
  t.warmup = 4;
  OptimizerState opt = make_optimizer(m.params(), t);
  const float w0 = params[1].tensor.data()[0];
  for (auto& p : params) p.tensor.zero_grad();
  adamw_update(params, opt);
  const double s = schedule_factor(1, 4);
  CHECK(params[1].tensor.data()[0] == doctest::Approx(w0 * (1.0 - s * 0.1)).epsilon(1e-6));
  for (auto& p : params) p.tensor.zero_grad();
  adamw_update(params, opt);
  CHECK(params[1].tensor.data()[0] ==
        doctest::Approx(w0 * (1.0 - s * 0.1) * (1.0 - schedule_factor(2, 4) * 0.1)).epsilon(1e-6));
}

TEST_CASE("length batches cover every example within the budget") {
  std::mt19937_64 rng(5);
  std::vector<Example> ex;
  for (std::size_t i = 0; i < 60; ++i) {
    const auto e = copy_examples(1, 1 + i % 13, 20, i);
    ex.push_back(e[0]);
  }
  const auto batches = make_length_batches(ex, 64, rng);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) {
    std::size_t ms = 0, mt = 0;
    for (auto i : b) {
      seen.insert(i);
      ms = std::max(ms, ex[i].src.size());
      mt = std::max(mt, ex[i].tgt_in.size());
    }
    if (b.size() > 1) CHECK(b.size() * (ms + mt) <= 64);
  }
  CHECK(seen.size() == 60);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 60);
}

TEST_CASE("training overfits a handful of copy sentences") {
  auto c = tiny_config(Variant::MAT, 3, 1, 2);
  c.d_model = 32;
  c.d_ff = 64;
  c.heads = 4;
  Model m = Model::create(c);
  const auto ex = copy_examples(8, 5, 11, 6);
  TrainingConfig t = quick_cfg();
  t.steps = 200;
  const auto result = train(m, ex, t);
  REQUIRE(result.losses.size() == 200);
  const std::vector<double> head(result.losses.begin(), result.losses.begin() + 20);
  const std::vector<double> tail(result.losses.end() - 20, result.losses.end());
  CHECK(median(head) > median(tail));
  NoGradGuard ng;
  const double final_loss = nll_loss(m, make_batch(ex), 0.0f).item();
  CHECK_MESSAGE(final_loss < 0.1, "final loss " << final_loss);
}

TEST_CASE("training is deterministic in the seed") {
  const auto ex = copy_examples(16, 6, 11, 7);
  auto run = [&](std::uint64_t seed) {
    auto c = tiny_config(Variant::AT);
    c.dropout = 0.1f;
    Model m = Model::create(c);
    TrainingConfig t = quick_cfg();
    t.steps = 15;
    t.batch_tokens = 64;
    t.seed = seed;
    const auto r = train(m, ex, t);
    return std::make_pair(r.losses, std::vector<float>(m.params().tgt_embedding.data().begin(),
                                                       m.params().tgt_embedding.data().end()));
  };
  const auto a = run(3), b = run(3), c = run(4);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first != c.first);
}

TEST_CASE("logger receives periodic entries") {
  Model m = Model::create(tiny_config(Variant::TAT));
  const auto ex = copy_examples(4, 4, 11, 8);
  TrainingConfig t = quick_cfg();
  t.steps = 10;
  t.log_every = 5;
  std::vector<TrainLogEntry> log;
  train(m, ex, t, nullptr, [&](const TrainLogEntry& e) { log.push_back(e); });
  REQUIRE(log.size() == 2);
  CHECK(log[0].step == 5);
  CHECK(log[1].step == 10);
  CHECK(log[1].lr == doctest::Approx(learning_rate(t, 10)));
  CHECK(log[0].tokens_per_sec > 0.0);
}

TEST_CASE("a diverging step names the step") {
  Model m = Model::create(tiny_config(Variant::MAT));
  const auto ex = copy_examples(2, 4, 11, 9);
  TrainingConfig t = quick_cfg();
  OptimizerState opt = make_optimizer(m.params(), t);
  m.params().decoder[0].ffn.w1.data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_step(m, opt, make_batch(ex), t, nullptr);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("training step 1") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  auto c = tiny_config(Variant::MAT, 3, 2, 4);
  Model m = Model::create(c);
  Vocab v;
  for (int i = 0; i < 7; ++i) v.add("w" + std::to_string(i));
  const auto ex = copy_examples(4, 4, 11, 11);
  TrainingConfig t = quick_cfg();
  t.steps = 3;
  OptimizerState opt = make_optimizer(m.params(), t);
  train(m, ex, t, &opt);

  const std::string bytes = serialize_checkpoint(m, v, v, Tokenizer::Character, &opt);
  const Checkpoint ck = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(ck.model, ck.src_vocab, ck.tgt_vocab, ck.tokenizer, &*ck.optimizer) == bytes);
  CHECK(ck.tokenizer == Tokenizer::Character);
  CHECK(ck.tgt_vocab == v);
  REQUIRE(ck.optimizer.has_value());
  CHECK(ck.optimizer->step == 3);
  CHECK(ck.optimizer->m == opt.m);
  CHECK(ck.model.config().order == 3);

  NoGradGuard ng;
  const TokenId src[] = {4, 5, 6, kEosId};
  const TokenId tgt[] = {kBosId, 7, 8};
  const Tensor a = decode_forward(m, encode(m, src), tgt);
  const Tensor b = decode_forward(ck.model, encode(ck.model, src), tgt);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  SUBCASE("without optimizer") {
    const auto plain = deserialize_checkpoint(serialize_checkpoint(m, v, v, Tokenizer::Whitespace));
    CHECK_FALSE(plain.optimizer.has_value());
  }
  SUBCASE("file") {
    const auto p = std::filesystem::temp_directory_path() / "mat_test_ckpt.bin";
    save_checkpoint(p, m, v, v, Tokenizer::Character, &opt);
    CHECK(serialize_checkpoint(load_checkpoint(p).model, v, v, Tokenizer::Character, &opt) == bytes);
  }
  SUBCASE("corruption is detected") {
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "xx"), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint("NOTCKPT 1\n{}\n"), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint("MATCKPT 9\n{}\n"), FormatError);
    CHECK_THROWS_AS(deserialize_checkpoint(""), FormatError);
    std::string bad = bytes;
    bad[bytes.find("\"tensors\"") + 1] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
  }
}
