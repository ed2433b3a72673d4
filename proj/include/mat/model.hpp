#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mat/attention.hpp"
#include "mat/mask.hpp"
#include "mat/tensor.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;

// AT:  causal mask, keys/values from the current layer (vanilla decoder).
// TAT: causal mask, keys/values from the static layer-0 embeddings.
// MAT: banded(order) mask, keys/values from the static embeddings.
enum class Variant { AT, TAT, MAT };

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);

struct ModelConfig {
  Variant variant = Variant::MAT;
  int order = 3;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int d_model = 64;
  int d_ff = 128;
  int src_vocab = 0;
  int tgt_vocab = 0;
  bool shared_vocab = true;
  int max_len = 64;
  float dropout = 0.1f;
  bool post_layernorm = true;
  // Static keys/values carry the positional encoding (they are exactly the
  // decoder's layer-0 input). When false they are token embeddings only.
  bool static_includes_position = true;
  // Negative control: keep the variant's mask but read keys/values from the
  // current layer. Breaks the Markov guarantee of MAT for >= 2 layers.
  bool disable_transparency = false;
  std::uint64_t seed = 1;

  bool transparent() const { return variant != Variant::AT && !disable_transparency; }
  MaskKind self_mask_kind() const { return variant == Variant::MAT ? MaskKind::Banded : MaskKind::Causal; }
  // Decoder self-attention keys visible from query position `pos` (0-based).
  std::size_t window_at(std::size_t pos) const;
  std::string describe() const;
};

// Human-readable violations; empty means valid.
std::vector<std::string> validate_config(const ModelConfig& config);
// Throws ConfigError listing every violation.
void require_valid(const ModelConfig& config);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct FeedForwardParams {
  Tensor w1;
  Tensor b1;
  Tensor w2;
  Tensor b2;
};

struct EncoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams ln1;
  FeedForwardParams ffn;
  LayerNormParams ln2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams ln1;
  AttentionParams cross_attn;
  LayerNormParams ln2;
  FeedForwardParams ffn;
  LayerNormParams ln3;
};

struct Parameters {
  Tensor src_embedding;  // aliases tgt_embedding when the vocabulary is shared
  Tensor tgt_embedding;  // also the (tied) output projection
  Tensor positional;     // fixed sinusoidal table, max_len x d_model
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  LayerNormParams encoder_final;  // pre-layernorm only
  LayerNormParams decoder_final;  // pre-layernorm only

  // Every learned tensor exactly once, in a fixed order.
  std::vector<NamedTensor> named() const;
  std::size_t count() const;
};

Tensor sinusoidal_table(std::size_t max_len, std::size_t d_model);

// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases,
// unit layer-norm gains. Deterministic in config.seed.
Parameters init_params(const ModelConfig& config);
Parameters clone_params(const Parameters& params, const ModelConfig& config);

class Model {
 public:
  Model(ModelConfig config, Parameters params);
  static Model create(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Parameters& params() const { return params_; }
  Parameters& params() { return params_; }
  Model clone() const;

 private:
  ModelConfig config_;
  Parameters params_;
};

// Right-padded token matrix.
struct PaddedBatch {
  std::vector<TokenId> ids;
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<std::size_t> lengths;
};

PaddedBatch pad_sequences(std::span<const std::vector<TokenId>> sequences, TokenId pad = kPadId);

// Dropout is active iff dropout_rng is set and config.dropout > 0.
struct ForwardContext {
  std::mt19937_64* dropout_rng = nullptr;
};

// Encoder memory for every row of the batch: [batch*width x d_model].
Tensor encode_batch(const Model& model, const PaddedBatch& src, const ForwardContext& ctx = {});

// Teacher-forced decoder logits [batch*width x tgt_vocab]. Row t of a
// sequence parameterizes the next token after tgt_in[0..t].
Tensor decode_batch(const Model& model, const Tensor& memory, const PaddedBatch& src, const PaddedBatch& tgt_in,
                    const ForwardContext& ctx = {});

Tensor encode(const Model& model, std::span<const TokenId> src_ids);
Tensor decode_forward(const Model& model, const Tensor& memory, std::span<const TokenId> tgt_in_ids);

// Hidden states entering and leaving the first decoder self-attention
// sublayer, for layer-level comparisons between variants.
struct FirstLayerProbe {
  Tensor static_emb;
  Tensor self_attention_out;
};
FirstLayerProbe probe_first_decoder_layer(const Model& model, std::span<const TokenId> tgt_in_ids);

}  // namespace MAT_REAL_NS
}  // namespace mat
