#include "mat/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mat/errors.hpp"
#include "mat/ops.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

constexpr Real kLayerNormEps = 1e-5f;

Tensor glorot(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<Real> dist(static_cast<Real>(-bound), static_cast<Real>(bound));
  std::vector<Real> v(rows * cols);
  for (auto& x : v) x = dist(rng);
  return Tensor::from_data({rows, cols}, std::move(v), true);
}

AttentionParams init_attention(std::mt19937_64& rng, std::size_t d) {
  return {glorot(rng, d, d), glorot(rng, d, d), glorot(rng, d, d), glorot(rng, d, d)};
}

LayerNormParams init_ln(std::size_t d) { return {Tensor::full({d}, 1.0f, true), Tensor::zeros({d}, true)}; }

FeedForwardParams init_ffn(std::mt19937_64& rng, std::size_t d, std::size_t ff) {
  FeedForwardParams p;
  p.w1 = glorot(rng, d, ff);
  p.b1 = Tensor::zeros({ff}, true);
  p.w2 = glorot(rng, ff, d);
  p.b2 = Tensor::zeros({d}, true);
  return p;
}

void push_attention(std::vector<NamedTensor>& out, const std::string& prefix, const AttentionParams& a) {
  out.push_back({prefix + ".w_q", a.w_q});
  out.push_back({prefix + ".w_k", a.w_k});
  out.push_back({prefix + ".w_v", a.w_v});
  out.push_back({prefix + ".w_o", a.w_o});
}

void push_ln(std::vector<NamedTensor>& out, const std::string& prefix, const LayerNormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".bias", p.bias});
}

void push_ffn(std::vector<NamedTensor>& out, const std::string& prefix, const FeedForwardParams& p) {
  out.push_back({prefix + ".w1", p.w1});
  out.push_back({prefix + ".b1", p.b1});
  out.push_back({prefix + ".w2", p.w2});
  out.push_back({prefix + ".b2", p.b2});
}

Tensor positional_rows(const Tensor& table, std::size_t batch, std::size_t width) {
  const std::size_t d = table.cols();
  if (width > table.rows()) throw InputError("sequence longer than max_len");
  const auto src = table.data();
  std::vector<Real> v(batch * width * d);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(width * d),
              v.begin() + static_cast<std::ptrdiff_t>(b * width * d));
  return Tensor::from_data({batch * width, d}, std::move(v));
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return add_bias(matmul(relu(add_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

Tensor ln(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gain, p.bias, kLayerNormEps); }

void check_batch(const PaddedBatch& b, const char* what) {
  if (b.batch == 0 || b.width == 0 || b.ids.size() != b.batch * b.width || b.lengths.size() != b.batch) {
    throw DimensionError(std::string(what) + ": malformed padded batch");
  }
  for (auto len : b.lengths) {
    if (len == 0 || len > b.width) throw DimensionError(std::string(what) + ": sequence length out of range");
  }
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::AT:
      return "AT";
    case Variant::TAT:
      return "TAT";
    case Variant::MAT:
      return "MAT";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  if (name == "AT") return Variant::AT;
  if (name == "TAT") return Variant::TAT;
  if (name == "MAT") return Variant::MAT;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected AT, TAT or MAT)");
}

std::size_t ModelConfig::window_at(std::size_t pos) const {
  if (variant == Variant::MAT) return std::min(pos + 1, static_cast<std::size_t>(order));
  return pos + 1;
}

std::string ModelConfig::describe() const {
  std::ostringstream os;
  os << to_string(variant);
  if (variant == Variant::MAT) os << '(' << order << ')';
  if (disable_transparency) os << "[contextual-kv]";
  os << " L=" << enc_layers << '/' << dec_layers << " h=" << heads << " d=" << d_model << " ff=" << d_ff;
  return os.str();
}

std::vector<std::string> validate_config(const ModelConfig& c) {
  std::vector<std::string> errors;
  if (c.d_model <= 0) errors.push_back("d_model must be > 0");
  if (c.heads <= 0) {
    errors.push_back("heads must be > 0");
  } else if (c.d_model > 0 && c.d_model % c.heads != 0) {
    errors.push_back("d_model (" + std::to_string(c.d_model) + ") must be divisible by heads (" +
                     std::to_string(c.heads) + ")");
  }
  if (c.d_ff <= 0) errors.push_back("d_ff must be > 0");
  if (c.enc_layers <= 0) errors.push_back("enc_layers must be >= 1");
  if (c.dec_layers <= 0) errors.push_back("dec_layers must be >= 1");
  if (c.variant == Variant::MAT && c.order < 1) errors.push_back("order must be >= 1");
  if (c.tgt_vocab <= 4) errors.push_back("tgt_vocab must exceed the 4 reserved tokens");
  if (!c.shared_vocab && c.src_vocab <= 4) errors.push_back("src_vocab must exceed the 4 reserved tokens");
  if (c.max_len < 2) errors.push_back("max_len must be >= 2");
  if (!(c.dropout >= 0.0f && c.dropout < 1.0f)) errors.push_back("dropout must be in [0, 1)");
  return errors;
}

void require_valid(const ModelConfig& config) {
  const auto errors = validate_config(config);
  if (errors.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw ConfigError(msg);
}

std::vector<NamedTensor> Parameters::named() const {
  std::vector<NamedTensor> out;
  out.push_back({"tgt_embedding", tgt_embedding});
  if (src_embedding.defined() && src_embedding.node() != tgt_embedding.node()) {
    out.push_back({"src_embedding", src_embedding});
  }
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l);
    push_attention(out, p + ".self_attn", encoder[l].self_attn);
    push_ln(out, p + ".ln1", encoder[l].ln1);
    push_ffn(out, p + ".ffn", encoder[l].ffn);
    push_ln(out, p + ".ln2", encoder[l].ln2);
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l);
    push_attention(out, p + ".self_attn", decoder[l].self_attn);
    push_ln(out, p + ".ln1", decoder[l].ln1);
    push_attention(out, p + ".cross_attn", decoder[l].cross_attn);
    push_ln(out, p + ".ln2", decoder[l].ln2);
    push_ffn(out, p + ".ffn", decoder[l].ffn);
    push_ln(out, p + ".ln3", decoder[l].ln3);
  }
  if (encoder_final.gain.defined()) push_ln(out, "encoder.final_ln", encoder_final);
  if (decoder_final.gain.defined()) push_ln(out, "decoder.final_ln", decoder_final);
  return out;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  for (const auto& t : named()) n += t.tensor.numel();
  return n;
}

Tensor sinusoidal_table(std::size_t max_len, std::size_t d_model) {
  std::vector<Real> v(max_len * d_model);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      v[pos * d_model + i] = static_cast<Real>(std::sin(static_cast<double>(pos) * rate));
      if (i + 1 < d_model) v[pos * d_model + i + 1] = static_cast<Real>(std::cos(static_cast<double>(pos) * rate));
    }
  }
  return Tensor::from_data({max_len, d_model}, std::move(v));
}

Parameters init_params(const ModelConfig& config) {
  require_valid(config);
  std::mt19937_64 rng(config.seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  Parameters p;
  p.tgt_embedding = glorot(rng, static_cast<std::size_t>(config.tgt_vocab), d);
  p.src_embedding =
      config.shared_vocab ? p.tgt_embedding : glorot(rng, static_cast<std::size_t>(config.src_vocab), d);
  p.positional = sinusoidal_table(static_cast<std::size_t>(config.max_len), d);
  for (int l = 0; l < config.enc_layers; ++l) {
    EncoderLayerParams layer;
    layer.self_attn = init_attention(rng, d);
    layer.ln1 = init_ln(d);
    layer.ffn = init_ffn(rng, d, ff);
    layer.ln2 = init_ln(d);
    p.encoder.push_back(std::move(layer));
  }
  for (int l = 0; l < config.dec_layers; ++l) {
    DecoderLayerParams layer;
    layer.self_attn = init_attention(rng, d);
    layer.ln1 = init_ln(d);
    layer.cross_attn = init_attention(rng, d);
    layer.ln2 = init_ln(d);
    layer.ffn = init_ffn(rng, d, ff);
    layer.ln3 = init_ln(d);
    p.decoder.push_back(std::move(layer));
  }
  if (!config.post_layernorm) {
    p.encoder_final = init_ln(d);
    p.decoder_final = init_ln(d);
  }
  return p;
}

Parameters clone_params(const Parameters& params, const ModelConfig& config) {
  Parameters copy = init_params(config);
  const auto src = params.named();
  const auto dst = copy.named();
  if (src.size() != dst.size()) throw ConfigError("clone_params: parameter layout does not match config");
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor t = dst[i].tensor;
    const auto from = src[i].tensor.data();
    if (from.size() != t.numel()) throw DimensionError("clone_params: shape mismatch for " + src[i].name);
    std::copy(from.begin(), from.end(), t.data().begin());
  }
  copy.positional = params.positional.clone();
  return copy;
}

Model::Model(ModelConfig config, Parameters params) : config_(std::move(config)), params_(std::move(params)) {
  require_valid(config_);
}

Model Model::create(const ModelConfig& config) { return Model(config, init_params(config)); }

Model Model::clone() const { return Model(config_, clone_params(params_, config_)); }

PaddedBatch pad_sequences(std::span<const std::vector<TokenId>> sequences, TokenId pad) {
  PaddedBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) b.width = std::max(b.width, s.size());
  b.ids.assign(b.batch * b.width, pad);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    std::copy(sequences[i].begin(), sequences[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.width));
    b.lengths.push_back(sequences[i].size());
  }
  return b;
}

Tensor encode_batch(const Model& model, const PaddedBatch& src, const ForwardContext& ctx) {
  check_batch(src, "encode");
  const auto& cfg = model.config();
  const auto& p = model.params();
  if (src.width > static_cast<std::size_t>(cfg.max_len)) throw InputError("source longer than max_len");
  const auto heads = static_cast<std::size_t>(cfg.heads);
  const Real emb_scale = std::sqrt(static_cast<Real>(cfg.d_model));
  const Real pdrop = ctx.dropout_rng ? cfg.dropout : 0.0f;

  std::vector<AttentionSegment> segs;
  for (std::size_t b = 0; b < src.batch; ++b) {
    segs.push_back({b * src.width, b * src.width,
                    AttentionMask::unmasked(src.width, src.width).with_key_limit(src.lengths[b])});
  }

  Tensor h = add(embedding(p.src_embedding, src.ids, emb_scale), positional_rows(p.positional, src.batch, src.width));
  h = dropout(h, pdrop, ctx.dropout_rng);
  for (const auto& layer : p.encoder) {
    if (cfg.post_layernorm) {
      h = ln(add(h, dropout(multi_head_attention(h, h, layer.self_attn, heads, segs), pdrop, ctx.dropout_rng)),
             layer.ln1);
      h = ln(add(h, dropout(feed_forward(h, layer.ffn), pdrop, ctx.dropout_rng)), layer.ln2);
    } else {
      const Tensor x = ln(h, layer.ln1);
      h = add(h, dropout(multi_head_attention(x, x, layer.self_attn, heads, segs), pdrop, ctx.dropout_rng));
      h = add(h, dropout(feed_forward(ln(h, layer.ln2), layer.ffn), pdrop, ctx.dropout_rng));
    }
  }
  if (!cfg.post_layernorm) h = ln(h, p.encoder_final);
  return h;
}

Tensor decode_batch(const Model& model, const Tensor& memory, const PaddedBatch& src, const PaddedBatch& tgt_in,
                    const ForwardContext& ctx) {
  check_batch(tgt_in, "decode");
  check_batch(src, "decode(src)");
  if (src.batch != tgt_in.batch) throw DimensionError("decode: source and target batch sizes differ");
  const auto& cfg = model.config();
  const auto& p = model.params();
  if (memory.rows() != src.batch * src.width || memory.cols() != static_cast<std::size_t>(cfg.d_model)) {
    throw DimensionError("decode: memory shape " + shape_to_string(memory.shape()) + " does not match source batch");
  }
  if (tgt_in.width > static_cast<std::size_t>(cfg.max_len)) throw InputError("target longer than max_len");
  for (std::size_t b = 0; b < tgt_in.batch; ++b) {
    if (tgt_in.ids[b * tgt_in.width] != kBosId) throw InputError("decoder input must start with BOS");
  }
  const auto heads = static_cast<std::size_t>(cfg.heads);
  const Real emb_scale = std::sqrt(static_cast<Real>(cfg.d_model));
  const Real pdrop = ctx.dropout_rng ? cfg.dropout : 0.0f;
  const std::size_t n = tgt_in.width;

  const AttentionMask self_mask =
      build_mask(cfg.self_mask_kind(), n, cfg.self_mask_kind() == MaskKind::Banded ? cfg.order : 0);
  std::vector<AttentionSegment> self_segs, cross_segs;
  for (std::size_t b = 0; b < tgt_in.batch; ++b) {
    self_segs.push_back({b * n, b * n, self_mask});
    cross_segs.push_back(
        {b * n, b * src.width, AttentionMask::unmasked(n, src.width).with_key_limit(src.lengths[b])});
  }

  const Tensor tok = embedding(p.tgt_embedding, tgt_in.ids, emb_scale);
  Tensor h = dropout(add(tok, positional_rows(p.positional, tgt_in.batch, n)), pdrop, ctx.dropout_rng);
  const Tensor static_emb = cfg.static_includes_position ? h : dropout(tok, pdrop, ctx.dropout_rng);

  for (const auto& layer : p.decoder) {
    if (cfg.post_layernorm) {
      const Tensor& kv = cfg.transparent() ? static_emb : h;
      h = ln(add(h, dropout(multi_head_attention(h, kv, layer.self_attn, heads, self_segs), pdrop, ctx.dropout_rng)),
             layer.ln1);
      h = ln(add(h, dropout(multi_head_attention(h, memory, layer.cross_attn, heads, cross_segs), pdrop,
                            ctx.dropout_rng)),
             layer.ln2);
      h = ln(add(h, dropout(feed_forward(h, layer.ffn), pdrop, ctx.dropout_rng)), layer.ln3);
    } else {
      const Tensor x = ln(h, layer.ln1);
      const Tensor kv = cfg.transparent() ? ln(static_emb, layer.ln1) : x;
      h = add(h, dropout(multi_head_attention(x, kv, layer.self_attn, heads, self_segs), pdrop, ctx.dropout_rng));
      h = add(h, dropout(multi_head_attention(ln(h, layer.ln2), memory, layer.cross_attn, heads, cross_segs), pdrop,
                         ctx.dropout_rng));
      h = add(h, dropout(feed_forward(ln(h, layer.ln3), layer.ffn), pdrop, ctx.dropout_rng));
    }
  }
  if (!cfg.post_layernorm) h = ln(h, p.decoder_final);
  return matmul_nt(h, p.tgt_embedding);
}

Tensor encode(const Model& model, std::span<const TokenId> src_ids) {
  const std::vector<std::vector<TokenId>> seqs{{src_ids.begin(), src_ids.end()}};
  if (src_ids.empty()) throw InputError("empty source sequence");
  return encode_batch(model, pad_sequences(seqs));
}

Tensor decode_forward(const Model& model, const Tensor& memory, std::span<const TokenId> tgt_in_ids) {
  if (tgt_in_ids.empty()) throw InputError("empty decoder input");
  const std::vector<std::vector<TokenId>> tgt{{tgt_in_ids.begin(), tgt_in_ids.end()}};
  PaddedBatch src;
  src.batch = 1;
  src.width = memory.rows();
  src.ids.assign(src.width, kPadId);
  src.lengths = {src.width};
  return decode_batch(model, memory, src, pad_sequences(tgt));
}

FirstLayerProbe probe_first_decoder_layer(const Model& model, std::span<const TokenId> tgt_in_ids) {
  const auto& cfg = model.config();
  const auto& p = model.params();
  const std::size_t n = tgt_in_ids.size();
  const Real emb_scale = std::sqrt(static_cast<Real>(cfg.d_model));
  const Tensor tok = embedding(p.tgt_embedding, tgt_in_ids, emb_scale);
  const Tensor h = add(tok, positional_rows(p.positional, 1, n));
  const Tensor static_emb = cfg.static_includes_position ? h : tok;
  const AttentionMask mask =
      build_mask(cfg.self_mask_kind(), n, cfg.self_mask_kind() == MaskKind::Banded ? cfg.order : 0);
  const auto& layer = p.decoder.at(0);
  const auto heads = static_cast<std::size_t>(cfg.heads);
  Tensor out = cfg.transparent() ? transparent_self_attention(h, static_emb, mask, layer.self_attn, heads)
                                 : multi_head_attention(h, h, mask, layer.self_attn, heads);
  return {static_emb, out};
}

}  // namespace MAT_REAL_NS
}  // namespace mat
