#include "mat/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels.hpp"
#include "mat/errors.hpp"
#include "mat/ops.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

constexpr Real kLayerNormEps = 1e-5f;

// Scratch rows for one step; sized once per call.
struct StepScratch {
  std::vector<Real> keys, values, src, q, attn, proj, tmp, ff;
};

void ln_row(const Real* x, const LayerNormParams& p, std::size_t d, Real* y) {
  kernels::layer_norm_row(x, p.gain.data().data(), p.bias.data().data(), kLayerNormEps, d, y, nullptr, nullptr);
}

void project_row(const Real* x, const Tensor& w, std::size_t d, Real* y) {
  kernels::gemm(x, w.data().data(), y, 1, d, w.cols());
}

// y = x + bias, matching add_bias.
void add_bias_row(Real* x, const Tensor& bias) {
  const auto b = bias.data();
  for (std::size_t j = 0; j < b.size(); ++j) x[j] = x[j] + b[j];
}

// Multi-head attention of one query row over `count` key/value rows.
void attend(const Real* q, const Real* keys, const Real* values, std::size_t count, std::size_t d,
            std::size_t heads, Real* weights, Real* out) {
  const std::size_t head_dim = d / heads;
  const Real scale = 1.0f / std::sqrt(static_cast<Real>(head_dim));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t col = h * head_dim;
    kernels::attend_row(q + col, keys + col, d, values + col, d, count, head_dim, scale, weights, out + col);
  }
}

std::size_t self_window_capacity(const ModelConfig& cfg) {
  return cfg.self_mask_kind() == MaskKind::Banded ? static_cast<std::size_t>(cfg.order)
                                                  : static_cast<std::size_t>(cfg.max_len);
}

// Layer-0 decoder input row and the static row of `token` at `pos`.
void embed_row(const Model& model, TokenId token, std::size_t pos, Real* hidden, Real* static_row) {
  const auto& cfg = model.config();
  const auto& p = model.params();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const Real emb_scale = std::sqrt(static_cast<Real>(cfg.d_model));
  if (token < 0 || static_cast<std::size_t>(token) >= p.tgt_embedding.rows()) {
    throw InputError("token id " + std::to_string(token) + " outside target vocabulary");
  }
  const Real* row = p.tgt_embedding.data().data() + static_cast<std::size_t>(token) * d;
  const Real* pe = p.positional.data().data() + pos * d;
  for (std::size_t j = 0; j < d; ++j) {
    const Real tok = row[j] * emb_scale;
    hidden[j] = tok + pe[j];
    if (static_row) static_row[j] = cfg.static_includes_position ? hidden[j] : tok;
  }
}

// Rows that feed self-attention keys/values: the raw row for post-LN, the
// layer's first normalization of it for pre-LN.
void kv_source_row(const ModelConfig& cfg, const DecoderLayerParams& layer, const Real* row, std::size_t d,
                   Real* out) {
  if (cfg.post_layernorm) {
    std::copy(row, row + d, out);
  } else {
    ln_row(row, layer.ln1, d, out);
  }
}

void track_peak(DecoderState& state) {
  state.counters.peak_retained_floats = std::max(state.counters.peak_retained_floats, state.retained_floats());
}

}  // namespace

RowRing::RowRing(std::size_t row_width, std::size_t capacity)
    : width_(row_width), capacity_(capacity), storage_(row_width * capacity) {
  if (capacity == 0) throw ConfigError("RowRing capacity must be >= 1");
}

void RowRing::push(std::span<const Real> row) {
  if (row.size() != width_) throw DimensionError("RowRing: row width mismatch");
  const std::size_t slot = (head_ + count_) % capacity_;
  std::copy(row.begin(), row.end(), storage_.begin() + static_cast<std::ptrdiff_t>(slot * width_));
  if (count_ < capacity_) {
    ++count_;
  } else {
    head_ = (head_ + 1) % capacity_;
  }
}

std::span<const Real> RowRing::row(std::size_t i) const {
  if (i >= count_) throw DimensionError("RowRing: index out of range");
  const std::size_t slot = (head_ + i) % capacity_;
  return {storage_.data() + slot * width_, width_};
}

std::size_t DecoderState::retained_floats() const {
  std::size_t n = statics.floats();
  for (const auto& r : layer_inputs) n += r.floats();
  for (const auto& r : cached_keys) n += r.floats();
  for (const auto& r : cached_values) n += r.floats();
  return n;
}

std::size_t DecoderState::buffered_positions() const {
  if (statics.capacity() > 0) return statics.size();
  if (!layer_inputs.empty()) return layer_inputs.front().size();
  if (!cached_keys.empty()) return cached_keys.front().size();
  return 0;
}

DecoderState init_state(const Model& model, std::span<const TokenId> src_ids, const DecoderOptions& options) {
  const auto& cfg = model.config();
  const auto& p = model.params();
  if (src_ids.empty()) throw InputError("empty source sequence");
  if (src_ids.size() > static_cast<std::size_t>(cfg.max_len)) throw InputError("source longer than max_len");
  NoGradGuard no_grad;
  auto enc = std::make_shared<EncoderContext>();
  enc->memory = encode(model, src_ids);
  for (const auto& layer : p.decoder) {
    enc->cross_keys.push_back(matmul(enc->memory, layer.cross_attn.w_k));
    enc->cross_values.push_back(matmul(enc->memory, layer.cross_attn.w_v));
  }
  const std::size_t d = static_cast<std::size_t>(cfg.d_model), vocab = p.tgt_embedding.rows();
  enc->output_projection.resize(d * vocab);
  kernels::transpose(p.tgt_embedding.data().data(), enc->output_projection.data(), vocab, d);

  DecoderState state;
  state.encoder = std::move(enc);
  state.options = options;
  const std::size_t cap = self_window_capacity(cfg);
  const std::size_t layers = p.decoder.size();
  if (options.cache_projected_kv) {
    state.cached_keys.assign(layers, RowRing(d, cap));
    state.cached_values.assign(layers, RowRing(d, cap));
  } else if (cfg.transparent()) {
    state.statics = RowRing(d, cap);
  } else {
    state.layer_inputs.assign(layers, RowRing(d, cap));
  }
  push_token(model, state, kBosId);
  return state;
}

void push_token(const Model& model, DecoderState& state, TokenId token) {
  const auto& cfg = model.config();
  if (state.step > 0 && state.logits_pending) throw Error("push_token before incremental_step");
  if (state.step >= static_cast<std::size_t>(cfg.max_len)) throw InputError("decoder input exceeds max_len");
  const auto d = static_cast<std::size_t>(cfg.d_model);
  std::vector<Real> hidden(d), static_row(d);
  embed_row(model, token, state.step, hidden.data(), static_row.data());
  if (cfg.transparent()) {
    if (state.options.cache_projected_kv) {
      std::vector<Real> src(d), k(d), v(d);
      const auto& layers = model.params().decoder;
      for (std::size_t l = 0; l < layers.size(); ++l) {
        kv_source_row(cfg, layers[l], static_row.data(), d, src.data());
        project_row(src.data(), layers[l].self_attn.w_k, d, k.data());
        project_row(src.data(), layers[l].self_attn.w_v, d, v.data());
        state.cached_keys[l].push(k);
        state.cached_values[l].push(v);
      }
    } else {
      state.statics.push(static_row);
    }
  }
  state.tokens.push_back(token);
  ++state.step;
  state.logits_pending = true;
  track_peak(state);
}

std::vector<Real> incremental_step(const Model& model, DecoderState& state) {
  if (!state.logits_pending) throw Error("incremental_step called twice for the same position");
  const auto& cfg = model.config();
  const auto& p = model.params();
  const auto& enc = *state.encoder;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto heads = static_cast<std::size_t>(cfg.heads);
  const std::size_t pos = state.step - 1;
  const std::size_t mem_rows = enc.memory.rows();
  const std::size_t cap = self_window_capacity(cfg);

  StepScratch s;
  s.keys.resize(cap * d);
  s.values.resize(cap * d);
  s.src.resize(d);
  s.q.resize(d);
  s.attn.resize(d);
  s.proj.resize(d);
  s.tmp.resize(d);
  s.ff.resize(static_cast<std::size_t>(cfg.d_ff));
  std::vector<Real> weights(std::max(cap, mem_rows));

  std::vector<Real> h(d);
  embed_row(model, state.tokens.back(), pos, h.data(), nullptr);

  std::size_t window = 0;
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    const auto& layer = p.decoder[l];
    // Query input for self-attention.
    std::vector<Real> x(d);
    if (cfg.post_layernorm) {
      x = h;
    } else {
      ln_row(h.data(), layer.ln1, d, x.data());
    }

    // Gather this layer's key/value rows, oldest first.
    if (!cfg.transparent()) {
      if (state.options.cache_projected_kv) {
        kv_source_row(cfg, layer, h.data(), d, s.src.data());
        project_row(s.src.data(), layer.self_attn.w_k, d, s.proj.data());
        state.cached_keys[l].push(s.proj);
        project_row(s.src.data(), layer.self_attn.w_v, d, s.proj.data());
        state.cached_values[l].push(s.proj);
      } else {
        state.layer_inputs[l].push(h);
      }
    }
    if (state.options.cache_projected_kv) {
      window = state.cached_keys[l].size();
      for (std::size_t j = 0; j < window; ++j) {
        const auto kr = state.cached_keys[l].row(j);
        const auto vr = state.cached_values[l].row(j);
        std::copy(kr.begin(), kr.end(), s.keys.begin() + static_cast<std::ptrdiff_t>(j * d));
        std::copy(vr.begin(), vr.end(), s.values.begin() + static_cast<std::ptrdiff_t>(j * d));
      }
    } else {
      const RowRing& rows = cfg.transparent() ? state.statics : state.layer_inputs[l];
      window = rows.size();
      for (std::size_t j = 0; j < window; ++j) {
        kv_source_row(cfg, layer, rows.row(j).data(), d, s.src.data());
        project_row(s.src.data(), layer.self_attn.w_k, d, s.keys.data() + j * d);
        project_row(s.src.data(), layer.self_attn.w_v, d, s.values.data() + j * d);
      }
    }
    if (window != cfg.window_at(pos)) throw Error("decoder window does not match the attention mask");

    project_row(x.data(), layer.self_attn.w_q, d, s.q.data());
    attend(s.q.data(), s.keys.data(), s.values.data(), window, d, heads, weights.data(), s.attn.data());
    project_row(s.attn.data(), layer.self_attn.w_o, d, s.proj.data());
    for (std::size_t j = 0; j < d; ++j) s.tmp[j] = h[j] + s.proj[j];
    if (cfg.post_layernorm) {
      ln_row(s.tmp.data(), layer.ln1, d, h.data());
      x = h;
    } else {
      h = s.tmp;
      ln_row(h.data(), layer.ln2, d, x.data());
    }

    // Cross-attention over the encoder memory.
    project_row(x.data(), layer.cross_attn.w_q, d, s.q.data());
    attend(s.q.data(), enc.cross_keys[l].data().data(), enc.cross_values[l].data().data(), mem_rows, d, heads,
           weights.data(), s.attn.data());
    project_row(s.attn.data(), layer.cross_attn.w_o, d, s.proj.data());
    for (std::size_t j = 0; j < d; ++j) s.tmp[j] = h[j] + s.proj[j];
    if (cfg.post_layernorm) {
      ln_row(s.tmp.data(), layer.ln2, d, h.data());
      x = h;
    } else {
      h = s.tmp;
      ln_row(h.data(), layer.ln3, d, x.data());
    }

    // Position-wise feed-forward.
    project_row(x.data(), layer.ffn.w1, d, s.ff.data());
    add_bias_row(s.ff.data(), layer.ffn.b1);
    for (auto& v : s.ff) v = v > 0.0f ? v : 0.0f;
    kernels::gemm(s.ff.data(), layer.ffn.w2.data().data(), s.proj.data(), 1, s.ff.size(), d);
    add_bias_row(s.proj.data(), layer.ffn.b2);
    for (std::size_t j = 0; j < d; ++j) s.tmp[j] = h[j] + s.proj[j];
    if (cfg.post_layernorm) {
      ln_row(s.tmp.data(), layer.ln3, d, h.data());
    } else {
      h = s.tmp;
    }
  }
  if (!cfg.post_layernorm) {
    ln_row(h.data(), p.decoder_final, d, s.tmp.data());
    h = s.tmp;
  }

  const std::size_t vocab = p.tgt_embedding.rows();
  std::vector<Real> logits(vocab);
  kernels::gemm(h.data(), enc.output_projection.data(), logits.data(), 1, d, vocab);

  state.counters.self_attn_scores_per_head += window;
  state.counters.self_attn_scores_total += window * heads * p.decoder.size();
  state.logits_pending = false;
  track_peak(state);
  return logits;
}

std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> src_ids, std::size_t max_len,
                                   const DecoderOptions& options) {
  const std::size_t limit = std::min(max_len, static_cast<std::size_t>(model.config().max_len));
  DecoderState state = init_state(model, src_ids, options);
  std::vector<TokenId> out;
  for (std::size_t t = 0; t < limit; ++t) {
    const auto logits = incremental_step(model, state);
    const auto best = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (best == kEosId) break;
    out.push_back(best);
    if (t + 1 < limit) push_token(model, state, best);
  }
  return out;
}

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

namespace {

struct Hypothesis {
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
  DecoderState state;
};

struct Candidate {
  std::size_t parent;
  TokenId token;
  double log_prob;
};

std::vector<double> log_softmax(const std::vector<Real>& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) mx = std::max<double>(mx, v);
  double z = 0.0;
  for (Real v : logits) z += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

}  // namespace

BeamResult beam_search(const Model& model, std::span<const TokenId> src_ids, std::size_t beam, std::size_t max_len,
                       double alpha, const DecoderOptions& options) {
  if (beam == 0) throw ConfigError("beam size must be >= 1");
  const std::size_t limit = std::min(max_len, static_cast<std::size_t>(model.config().max_len));
  std::vector<Hypothesis> alive;
  alive.push_back({{}, 0.0, init_state(model, src_ids, options)});
  std::vector<BeamResult> pool;

  for (std::size_t t = 0; t < limit && !alive.empty(); ++t) {
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      const auto lp = log_softmax(incremental_step(model, alive[i].state));
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        cands.push_back({i, static_cast<TokenId>(tok), alive[i].log_prob + lp[tok]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });
    cands.resize(std::min(cands.size(), beam));

    const bool last_step = t + 1 == limit;
    std::vector<Hypothesis> next;
    for (const auto& c : cands) {
      const auto& parent = alive[c.parent];
      if (c.token == kEosId) {
        const std::size_t len = parent.tokens.size() + 1;
        pool.push_back({parent.tokens, c.log_prob, c.log_prob / length_penalty(len, alpha), true});
        continue;
      }
      Hypothesis h{parent.tokens, c.log_prob, parent.state};
      h.tokens.push_back(c.token);
      if (last_step) {
        pool.push_back({h.tokens, h.log_prob, h.log_prob / length_penalty(h.tokens.size(), alpha), false});
      } else {
        push_token(model, h.state, c.token);
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
    if (pool.size() >= beam) break;
    // Without a length penalty extensions can only lose probability.
    if (alpha == 0.0 && !pool.empty() && !alive.empty()) {
      double best_pool = -std::numeric_limits<double>::infinity();
      for (const auto& r : pool) best_pool = std::max(best_pool, r.score);
      double best_alive = -std::numeric_limits<double>::infinity();
      for (const auto& h : alive) best_alive = std::max(best_alive, h.log_prob);
      if (best_pool >= best_alive) break;
    }
  }
  for (auto& h : alive) {
    pool.push_back({h.tokens, h.log_prob, h.log_prob / length_penalty(h.tokens.size(), alpha), false});
  }
  if (pool.empty()) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    if (pool[i].score > pool[best].score) best = i;
  }
  return pool[best];
}

std::vector<TokenId> beam_decode(const Model& model, std::span<const TokenId> src_ids, std::size_t beam,
                                 std::size_t max_len, double alpha, const DecoderOptions& options) {
  return beam_search(model, src_ids, beam, max_len, alpha, options).tokens;
}

std::size_t closed_form_self_attn_scores(const ModelConfig& config, std::size_t n) {
  std::size_t total = 0;
  for (std::size_t t = 1; t <= n; ++t) {
    total += config.variant == Variant::MAT ? std::min(t, static_cast<std::size_t>(config.order)) : t;
  }
  return total;
}

DecodeOpsReport count_decode_ops(const Model& model, std::size_t n, const DecoderOptions& options) {
  const auto& cfg = model.config();
  if (n == 0) throw ConfigError("count_decode_ops requires n >= 1");
  if (n > static_cast<std::size_t>(cfg.max_len)) throw ConfigError("n exceeds the model's max_len");
  const auto vocab = static_cast<TokenId>(cfg.tgt_vocab);
  const auto src_vocab = static_cast<TokenId>(cfg.shared_vocab ? cfg.tgt_vocab : cfg.src_vocab);
  std::vector<TokenId> src;
  for (std::size_t i = 0; i < std::min<std::size_t>(8, static_cast<std::size_t>(cfg.max_len)); ++i) {
    src.push_back(4 + static_cast<TokenId>(i) % (src_vocab - 4));
  }
  DecoderState state = init_state(model, src, options);
  for (std::size_t t = 0; t < n; ++t) {
    incremental_step(model, state);
    if (t + 1 < n) push_token(model, state, 4 + static_cast<TokenId>(t) % (vocab - 4));
  }
  DecodeOpsReport r;
  r.variant = to_string(cfg.variant);
  r.order = cfg.variant == Variant::MAT ? static_cast<std::size_t>(cfg.order) : 0;
  r.n = n;
  r.layers = static_cast<std::size_t>(cfg.dec_layers);
  r.heads = static_cast<std::size_t>(cfg.heads);
  r.self_attn_scores = state.counters.self_attn_scores_per_head;
  r.self_attn_scores_total = state.counters.self_attn_scores_total;
  r.kv_bytes_resident = state.counters.peak_retained_floats * sizeof(Real);
  r.retained_floats_final = state.retained_floats();
  return r;
}

}  // namespace MAT_REAL_NS
}  // namespace mat
