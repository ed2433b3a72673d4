#pragma once

#include <cstddef>
#include <deque>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mat/model.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

// Fixed-capacity FIFO of equally sized rows; the oldest row is
// evicted when a push would exceed capacity.
class RowRing {
 public:
  RowRing() = default;
  RowRing(std::size_t row_width, std::size_t capacity);

  void push(std::span<const Real> row);
  std::size_t size() const noexcept { return count_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t row_width() const noexcept { return width_; }
  // i = 0 is the oldest row.
  std::span<const Real> row(std::size_t i) const;
  std::size_t floats() const noexcept { return count_ * width_; }

 private:
  std::size_t width_ = 0;
  std::size_t capacity_ = 0;
  std::size_t head_ = 0;
  std::size_t count_ = 0;
  std::vector<Real> storage_;
};

struct DecoderOptions {
  // Keep per-layer projected keys/values of the window instead of
  // re-projecting the buffered rows every step. Trades k*d floats per layer
  // for k*d^2 multiply-adds per layer and step; results are identical.
  bool cache_projected_kv = false;
};

// Encoder-side data shared by every hypothesis decoding the same source.
struct EncoderContext {
  Tensor memory;
  std::vector<Tensor> cross_keys;
  std::vector<Tensor> cross_values;
  std::vector<Real> output_projection;  // tgt_embedding transposed, d x V
};

struct DecodeCounters {
  // Scores of one head in one layer, summed over steps.
  std::size_t self_attn_scores_per_head = 0;
  std::size_t self_attn_scores_total = 0;
  std::size_t peak_retained_floats = 0;
};

// Everything the decoder keeps between steps. For MAT(k) the decoder-side
// part is at most k rows per buffer no matter how many tokens were produced.
struct DecoderState {
  std::shared_ptr<const EncoderContext> encoder;
  // Transparent variants: static embeddings of the visible positions.
  RowRing statics;
  // Contextual keys/values: inputs of each decoder layer at visible positions.
  std::vector<RowRing> layer_inputs;
  // Projected key/value rows per layer when DecoderOptions::cache_projected_kv.
  std::vector<RowRing> cached_keys;
  std::vector<RowRing> cached_values;
  std::vector<TokenId> tokens;  // decoder inputs so far, BOS first
  std::size_t step = 0;         // number of decoder inputs consumed
  bool logits_pending = true;
  DecoderOptions options;
  DecodeCounters counters;

  // Floats held on the decoder side (excludes encoder memory).
  std::size_t retained_floats() const;
  std::size_t buffered_positions() const;
};

DecoderState init_state(const Model& model, std::span<const TokenId> src_ids, const DecoderOptions& options = {});

// Next-token logits at the newest decoder input.
std::vector<Real> incremental_step(const Model& model, DecoderState& state);

// Appends a chosen token as the next decoder input.
void push_token(const Model& model, DecoderState& state, TokenId token);

// Argmax decoding, ties to the lowest id; the result excludes EOS.
std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> src_ids, std::size_t max_len,
                                   const DecoderOptions& options = {});

struct BeamResult {
  std::vector<TokenId> tokens;  // without EOS
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / length penalty
  bool finished = false;
};

// GNMT length penalty ((5 + len) / 6)^alpha; len counts EOS when emitted.
double length_penalty(std::size_t length, double alpha);

BeamResult beam_search(const Model& model, std::span<const TokenId> src_ids, std::size_t beam, std::size_t max_len,
                       double alpha, const DecoderOptions& options = {});

std::vector<TokenId> beam_decode(const Model& model, std::span<const TokenId> src_ids, std::size_t beam,
                                 std::size_t max_len, double alpha, const DecoderOptions& options = {});

struct DecodeOpsReport {
  std::string variant;
  std::size_t order = 0;  // 0 for full-history variants
  std::size_t n = 0;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t self_attn_scores = 0;  // per layer per head, measured
  std::size_t self_attn_scores_total = 0;
  std::size_t kv_bytes_resident = 0;  // peak decoder-side floats * 4
  std::size_t retained_floats_final = 0;
};

// Runs n incremental steps on a fixed synthetic input and reports the
// instrumented counters.
DecodeOpsReport count_decode_ops(const Model& model, std::size_t n, const DecoderOptions& options = {});

// Closed form sum_{t=1..n} min(t, window) for one head of one layer
// (window = n for full-history decoders).
std::size_t closed_form_self_attn_scores(const ModelConfig& config, std::size_t n);

}  // namespace MAT_REAL_NS
}  // namespace mat
