#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "mat/decoding.hpp"
#include "mat/errors.hpp"
#include "mat/ops.hpp"
#include "test_util.hpp"

using namespace mat;
using mat::test::random_tokens;
using mat::test::tiny_config;

namespace {

// Teacher-forced logits row by row, fed through the incremental decoder.
std::vector<std::vector<float>> incremental_logits(const Model& model, const std::vector<TokenId>& src,
                                                   const std::vector<TokenId>& tgt_in, DecoderOptions opts = {}) {
  DecoderState st = init_state(model, src, opts);
  std::vector<std::vector<float>> rows;
  for (std::size_t t = 0; t < tgt_in.size(); ++t) {
    if (t > 0) push_token(model, st, tgt_in[t]);
    rows.push_back(incremental_step(model, st));
  }
  return rows;
}

float max_diff_vs_full(const Model& model, const std::vector<TokenId>& src, const std::vector<TokenId>& tgt_in,
                       DecoderOptions opts = {}) {
  NoGradGuard ng;
  const Tensor full = decode_forward(model, encode(model, src), tgt_in);
  const auto rows = incremental_logits(model, src, tgt_in, opts);
  float worst = 0.0f;
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t v = 0; v < rows[t].size(); ++v) worst = std::max(worst, std::fabs(rows[t][v] - full.at(t, v)));
  return worst;
}

}  // namespace

TEST_CASE("RowRing keeps the newest rows in order") {
  RowRing ring(2, 3);
  for (int i = 0; i < 5; ++i) {
    const float row[] = {static_cast<float>(i), static_cast<float>(-i)};
    ring.push(row);
  }
  REQUIRE(ring.size() == 3);
  CHECK(ring.row(0)[0] == 2.0f);
  CHECK(ring.row(2)[0] == 4.0f);
  CHECK(ring.row(2)[1] == -4.0f);
  CHECK(ring.floats() == 6);
  CHECK_THROWS_AS(ring.row(3), DimensionError);
  CHECK_THROWS_AS(RowRing(2, 0), ConfigError);
}

TEST_CASE("init_state encodes once and buffers BOS") {
  auto cfg = tiny_config(Variant::MAT, 3);
  Model m = Model::create(cfg);
  std::mt19937_64 rng(3);
  const auto src = random_tokens(rng, 6, cfg.tgt_vocab);
  DecoderState a = init_state(m, src), b = init_state(m, src);
  CHECK(a.step == 1);
  CHECK(a.buffered_positions() == 1);
  CHECK(a.tokens == std::vector<TokenId>{kBosId});
  NoGradGuard ng;
  const Tensor mem = encode(m, src);
  CHECK(std::equal(mem.data().begin(), mem.data().end(), a.encoder->memory.data().begin()));
  CHECK(std::equal(a.statics.row(0).begin(), a.statics.row(0).end(), b.statics.row(0).begin()));
  const std::vector<TokenId> too_long(static_cast<std::size_t>(cfg.max_len) + 1, 5);
  CHECK_THROWS_AS(init_state(m, too_long), InputError);
}

TEST_CASE("incremental logits equal full-prefix logits bit for bit") {
  for (auto variant : {Variant::AT, Variant::TAT, Variant::MAT}) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
      auto cfg = tiny_config(variant, 1 + static_cast<int>(seed % 4), 1 + static_cast<int>(seed % 3), seed);
      cfg.post_layernorm = seed % 2 == 0;
      Model m = Model::create(cfg);
      std::mt19937_64 rng(seed * 11);
      const auto src = random_tokens(rng, 3 + seed, cfg.tgt_vocab);
      const auto tgt = random_tokens(rng, 12, cfg.tgt_vocab, true);
      CAPTURE(cfg.describe());
      CHECK(max_diff_vs_full(m, src, tgt) == 0.0f);
      CHECK(max_diff_vs_full(m, src, tgt, DecoderOptions{true}) == 0.0f);
    }
  }
}

TEST_CASE("incremental path also matches for the contextual negative control") {
  auto cfg = tiny_config(Variant::MAT, 2, 2, 5);
  cfg.disable_transparency = true;
  Model m = Model::create(cfg);
  std::mt19937_64 rng(4);
  CHECK(max_diff_vs_full(m, random_tokens(rng, 5, 11), random_tokens(rng, 10, 11, true)) == 0.0f);
}

TEST_CASE("MAT state stays at k rows after 100 tokens") {
  auto cfg = tiny_config(Variant::MAT, 5, 2);
  cfg.max_len = 128;
  Model m = Model::create(cfg);
  DecoderState st = init_state(m, std::vector<TokenId>{4, 5, 6});
  for (int t = 0; t < 100; ++t) {
    incremental_step(m, st);
    push_token(m, st, 4 + t % 7);
  }
  CHECK(st.statics.size() == 5);
  CHECK(st.retained_floats() == 5u * 8u);
  // Ring contents are the static rows of the last five inputs.
  const float scale = std::sqrt(8.0f);
  const auto& p = m.params();
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t pos = 96 + i;
    const TokenId tok = st.tokens[pos];
    for (std::size_t j = 0; j < 8; ++j) {
      const float want = p.tgt_embedding.at(static_cast<std::size_t>(tok), j) * scale + p.positional.at(pos, j);
      CHECK(st.statics.row(i)[j] == want);
    }
  }
}

TEST_CASE("step protocol is enforced") {
  auto cfg = tiny_config(Variant::MAT, 2, 1);
  cfg.max_len = 4;
  Model m = Model::create(cfg);
  DecoderState st = init_state(m, std::vector<TokenId>{4});
  incremental_step(m, st);
  CHECK_THROWS_AS(incremental_step(m, st), Error);
  push_token(m, st, 5);
  CHECK_THROWS_AS(push_token(m, st, 5), Error);
  incremental_step(m, st);
  push_token(m, st, 5);
  incremental_step(m, st);
  push_token(m, st, 5);
  incremental_step(m, st);
  CHECK_THROWS_AS(push_token(m, st, 5), InputError);
}

TEST_CASE("score counter matches the closed form") {
  for (int k = 1; k <= 8; ++k) {
    auto cfg = tiny_config(Variant::MAT, k, 1);
    cfg.max_len = 64;
    Model m = Model::create(cfg);
    for (std::size_t n : {1u, 2u, 7u, 25u, 64u}) {
      const auto r = count_decode_ops(m, n);
      std::size_t want = 0;
      for (std::size_t t = 1; t <= n; ++t) want += std::min<std::size_t>(t, static_cast<std::size_t>(k));
      CHECK(r.self_attn_scores == want);
      CHECK(closed_form_self_attn_scores(cfg, n) == want);
      CHECK(r.self_attn_scores_total == want * static_cast<std::size_t>(cfg.heads * cfg.dec_layers));
    }
  }
}

TEST_CASE("complexity example: n=25, k=5 gives 115 vs 325") {
  auto mat = tiny_config(Variant::MAT, 5, 2);
  auto at = tiny_config(Variant::AT, 5, 2);
  mat.max_len = at.max_len = 32;
  const auto a = count_decode_ops(Model::create(mat), 25);
  const auto b = count_decode_ops(Model::create(at), 25);
  CHECK(a.self_attn_scores == 115);
  CHECK(b.self_attn_scores == 325);
  CHECK(static_cast<double>(b.self_attn_scores) / a.self_attn_scores == doctest::Approx(2.826).epsilon(0.001));
}

TEST_CASE("resident bytes: flat for MAT beyond k, linear for AT") {
  auto mat = tiny_config(Variant::MAT, 3, 2);
  auto at = tiny_config(Variant::AT, 3, 2);
  mat.max_len = at.max_len = 64;
  const Model mm = Model::create(mat), am = Model::create(at);
  CHECK(count_decode_ops(mm, 10).kv_bytes_resident == count_decode_ops(mm, 40).kv_bytes_resident);
  const auto a10 = count_decode_ops(am, 10).kv_bytes_resident, a20 = count_decode_ops(am, 20).kv_bytes_resident,
             a30 = count_decode_ops(am, 30).kv_bytes_resident;
  CHECK(a20 - a10 == a30 - a20);
  CHECK(a20 - a10 == 10u * 8u * 2u * sizeof(float));
}

TEST_CASE("greedy decoding") {
  auto cfg = tiny_config(Variant::MAT, 2, 2);
  Model m = Model::create(cfg);
  const std::vector<TokenId> src{4, 5, 6};
  SUBCASE("deterministic") { CHECK(greedy_decode(m, src, 10) == greedy_decode(m, src, 10)); }
  SUBCASE("respects max_len") { CHECK(greedy_decode(m, src, 3).size() <= 3); }
  SUBCASE("forced EOS gives an empty output") {
    // The tied output row of EOS dominates every logit when scaled up.
    Tensor e = m.params().tgt_embedding;
    auto w = e.data();
    for (std::size_t j = 0; j < 8; ++j) w[kEosId * 8 + j] = 0.0f;
    for (std::size_t v = 0; v < 11; ++v)
      if (v != static_cast<std::size_t>(kEosId))
        for (std::size_t j = 0; j < 8; ++j) w[v * 8 + j] *= 1e-3f;
    // Final layer-norm bias pushes every hidden state along the EOS row.
    auto& last = m.params().decoder.back().ln3;
    for (std::size_t j = 0; j < 8; ++j) {
      w[kEosId * 8 + j] = 10.0f;
      last.bias.data()[j] = 50.0f;
      last.gain.data()[j] = 0.0f;
    }
    CHECK(greedy_decode(m, src, 10).empty());
  }
}

TEST_CASE("beam=1 with alpha=0 reproduces greedy") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (auto variant : {Variant::AT, Variant::TAT, Variant::MAT}) {
      Model m = Model::create(tiny_config(variant, 2, 1, seed));
      std::mt19937_64 rng(seed);
      const auto src = random_tokens(rng, 5, 11);
      CHECK(beam_decode(m, src, 1, 12, 0.0) == greedy_decode(m, src, 12));
    }
  }
}

TEST_CASE("beam=V over two steps equals exhaustive search") {
  auto cfg = tiny_config(Variant::MAT, 2, 1, 9);
  cfg.tgt_vocab = cfg.src_vocab = 6;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    cfg.seed = seed;
    Model m = Model::create(cfg);
    const std::vector<TokenId> src{4, 5, 4};
    NoGradGuard ng;
    const Tensor mem = encode(m, src);
    auto logprob = [&](const std::vector<TokenId>& prefix, TokenId next) {
      const Tensor logits = decode_forward(m, mem, prefix);
      const std::size_t t = prefix.size() - 1, V = logits.cols();
      double mx = -1e30;
      for (std::size_t v = 0; v < V; ++v) mx = std::max<double>(mx, logits.at(t, v));
      double z = 0.0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(logits.at(t, v) - mx);
      return logits.at(t, static_cast<std::size_t>(next)) - mx - std::log(z);
    };
    // All outputs of at most two steps: [EOS], [a, EOS], [a, b] (truncated).
    double best = -1e30;
    std::vector<TokenId> best_seq;
    const auto V = static_cast<TokenId>(cfg.tgt_vocab);
    for (TokenId a = 0; a < V; ++a) {
      const double la = logprob({kBosId}, a);
      if (a == kEosId) {
        if (la > best) best = la, best_seq = {};
        continue;
      }
      for (TokenId b = 0; b < V; ++b) {
        const double lb = la + logprob({kBosId, a}, b);
        if (lb > best) {
          best = lb;
          best_seq = b == kEosId ? std::vector<TokenId>{a} : std::vector<TokenId>{a, b};
        }
      }
    }
    const auto r = beam_search(m, src, static_cast<std::size_t>(V), 2, 0.0);
    CHECK(r.tokens == best_seq);
    CHECK(r.log_prob == doctest::Approx(best).epsilon(1e-9));
  }
}

TEST_CASE("length penalty") {
  CHECK(length_penalty(1, 0.0) == 1.0);
  CHECK(length_penalty(7, 1.0) == doctest::Approx(2.0));
  CHECK_THROWS_AS(beam_decode(Model::create(tiny_config(Variant::AT)), std::vector<TokenId>{4}, 0, 5, 0.0),
                  ConfigError);
}
