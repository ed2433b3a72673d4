#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mat/mask.hpp"
#include "mat/tensor.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

// Projection weights of one attention block, each d_model x d_model.
struct AttentionParams {
  Tensor w_q;
  Tensor w_k;
  Tensor w_v;
  Tensor w_o;
};

// One sequence inside a batch of stacked rows: queries start at
// query_offset, keys/values at key_offset, and the mask gives their counts
// (mask.rows() queries, mask.cols() keys).
struct AttentionSegment {
  std::size_t query_offset = 0;
  std::size_t key_offset = 0;
  AttentionMask mask;
};

// softmax(Q K^T / sqrt(d_h)) V per head and per segment; heads occupy
// consecutive column blocks of width d_model / heads.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const AttentionSegment> segments);

// Standard multi-head attention: queries projected from queries_src, keys and
// values from keys_values_src, output projected by W_O.
Tensor multi_head_attention(const Tensor& queries_src, const Tensor& keys_values_src, const AttentionParams& params,
                            std::size_t heads, std::span<const AttentionSegment> segments);

// Single-sequence form; no mask means every query sees every key.
Tensor multi_head_attention(const Tensor& queries_src, const Tensor& keys_values_src,
                            const std::optional<AttentionMask>& mask, const AttentionParams& params,
                            std::size_t heads);

// Decoder self-attention whose keys and values come from the static
// (layer-0) embeddings instead of the current layer's hidden states, so a
// position can only ever read token information from inside its window no
// matter how many layers are stacked.
Tensor transparent_self_attention(const Tensor& hidden, const Tensor& static_emb, const AttentionMask& mask,
                                  const AttentionParams& params, std::size_t heads);

}  // namespace MAT_REAL_NS
}  // namespace mat
