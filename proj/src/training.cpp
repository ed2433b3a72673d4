#include "mat/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "mat/errors.hpp"
#include "mat/ops.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

void validate_training(const TrainingConfig& cfg) {
  std::vector<std::string> errors;
  if (!(cfg.base_lr >= 0.0)) errors.push_back("base_lr must be >= 0");
  if (cfg.warmup == 0) errors.push_back("warmup must be >= 1");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0)) errors.push_back("beta1 must be in [0, 1)");
  if (!(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) errors.push_back("beta2 must be in [0, 1)");
  if (!(cfg.eps > 0.0)) errors.push_back("eps must be > 0");
  if (!(cfg.weight_decay >= 0.0)) errors.push_back("weight_decay must be >= 0");
  if (!(cfg.label_smoothing >= 0.0f && cfg.label_smoothing < 1.0f)) errors.push_back("label_smoothing must be in [0, 1)");
  if (cfg.batch_tokens == 0) errors.push_back("batch_tokens must be >= 1");
  if (errors.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw ConfigError(msg);
}

double schedule_factor(std::size_t step, std::size_t warmup) {
  if (step == 0) throw ConfigError("schedule is defined from step 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

double learning_rate(const TrainingConfig& cfg, std::size_t step) {
  return cfg.base_lr * schedule_factor(step, cfg.warmup);
}

OptimizerState make_optimizer(const Parameters& params, const TrainingConfig& cfg) {
  OptimizerState opt;
  for (const auto& p : params.named()) {
    opt.m.emplace_back(p.tensor.numel(), 0.0f);
    opt.v.emplace_back(p.tensor.numel(), 0.0f);
  }
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.eps;
  opt.base_lr = cfg.base_lr;
  opt.weight_decay = cfg.weight_decay;
  opt.warmup = cfg.warmup;
  return opt;
}

void adamw_update(std::span<const NamedTensor> params, OptimizerState& opt) {
  if (params.size() != opt.m.size()) throw DimensionError("optimizer state does not match parameter list");
  ++opt.step;
  const double s = schedule_factor(opt.step, opt.warmup);
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto w = t.data();
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    if (m.size() != w.size()) throw DimensionError("optimizer moment shape mismatch for " + params[i].name);
    const bool has_grad = t.has_grad();
    const Real* g = has_grad ? t.grad().data() : nullptr;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g ? g[j] : 0.0;
      m[j] = static_cast<Real>(opt.beta1 * m[j] + (1.0 - opt.beta1) * gj);
      v[j] = static_cast<Real>(opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj);
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      const double step = opt.base_lr * mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * w[j];
      w[j] = static_cast<Real>(w[j] - s * step);
    }
  }
}

Batch make_batch(std::span<const Example> examples) {
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(examples, idx);
}

Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("empty batch");
  std::vector<std::vector<TokenId>> src, tgt_in;
  for (auto i : indices) {
    const auto& ex = examples[i];
    if (ex.src.empty() || ex.tgt_in.empty() || ex.tgt_in.size() != ex.tgt_out.size()) {
      throw InputError("malformed example " + std::to_string(i));
    }
    src.push_back(ex.src);
    tgt_in.push_back(ex.tgt_in);
  }
  Batch b;
  b.src = pad_sequences(src);
  b.tgt_in = pad_sequences(tgt_in);
  b.tgt_out.assign(b.tgt_in.ids.size(), kPadId);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& out = examples[indices[r]].tgt_out;
    std::copy(out.begin(), out.end(), b.tgt_out.begin() + static_cast<std::ptrdiff_t>(r * b.tgt_in.width));
    b.target_tokens += out.size();
  }
  return b;
}

Tensor nll_loss(const Model& model, const Batch& batch, float label_smoothing, const ForwardContext& ctx) {
  if (batch.tgt_in.batch == 0) throw InputError("empty batch");
  const Tensor memory = encode_batch(model, batch.src, ctx);
  const Tensor logits = decode_batch(model, memory, batch.src, batch.tgt_in, ctx);
  return cross_entropy(logits, batch.tgt_out, label_smoothing, kPadId);
}

std::vector<double> sentence_losses(const Model& model, std::span<const Example> examples) {
  NoGradGuard no_grad;
  std::vector<double> out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const std::size_t idx[] = {i};
    const Batch b = make_batch(examples, idx);
    out.push_back(static_cast<double>(nll_loss(model, b, 0.0f).item()) * static_cast<double>(b.target_tokens));
  }
  return out;
}

double clip_grad_norm(std::span<const NamedTensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    for (Real g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const auto factor = static_cast<Real>(max_norm / (norm + 1e-6));
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor t = p.tensor;
      for (auto& g : t.grad()) g *= factor;
    }
  }
  return norm;
}

StepResult train_step(Model& model, OptimizerState& opt, const Batch& batch, const TrainingConfig& cfg,
                      std::mt19937_64* dropout_rng) {
  const auto params = model.params().named();
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  StepResult r;
  Tensor loss;
  try {
    loss = nll_loss(model, batch, cfg.label_smoothing, ForwardContext{dropout_rng});
  } catch (const NumericError& e) {
    throw NumericError("training step " + std::to_string(opt.step + 1) + ": " + e.what());
  }
  r.loss = loss.item();
  if (!std::isfinite(r.loss)) {
    throw NumericError("training step " + std::to_string(opt.step + 1) + ": loss is not finite");
  }
  backward(loss);
  try {
    r.grad_norm = clip_grad_norm(params, cfg.clip_norm);
  } catch (const NumericError& e) {
    throw NumericError("training step " + std::to_string(opt.step + 1) + ": " + e.what());
  }
  adamw_update(params, opt);
  r.lr = opt.base_lr * schedule_factor(opt.step, opt.warmup);
  return r;
}

std::vector<std::vector<std::size_t>> make_length_batches(std::span<const Example> examples,
                                                          std::size_t batch_tokens, std::mt19937_64& rng) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = examples[a];
    const auto& y = examples[b];
    if (x.tgt_in.size() != y.tgt_in.size()) return x.tgt_in.size() < y.tgt_in.size();
    return x.src.size() < y.src.size();
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t max_src = 0, max_tgt = 0;
  for (auto i : order) {
    const std::size_t ms = std::max(max_src, examples[i].src.size());
    const std::size_t mt = std::max(max_tgt, examples[i].tgt_in.size());
    if (!current.empty() && (current.size() + 1) * (ms + mt) > batch_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      max_src = max_tgt = 0;
    }
    current.push_back(i);
    max_src = std::max(max_src, examples[i].src.size());
    max_tgt = std::max(max_tgt, examples[i].tgt_in.size());
  }
  if (!current.empty()) batches.push_back(std::move(current));
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

TrainResult train(Model& model, std::span<const Example> examples, const TrainingConfig& cfg, OptimizerState* opt,
                  const TrainLogger& logger) {
  validate_training(cfg);
  if (examples.empty()) throw InputError("training corpus is empty");
  OptimizerState local;
  if (!opt) {
    local = make_optimizer(model.params(), cfg);
    opt = &local;
  }
  std::mt19937_64 batch_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  std::mt19937_64* drop = model.config().dropout > 0.0f ? &dropout_rng : nullptr;

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  auto window_start = start;
  std::size_t window_tokens = 0;
  std::vector<std::vector<std::size_t>> batches;
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    if (cursor == batches.size()) {
      batches = make_length_batches(examples, cfg.batch_tokens, batch_rng);
      cursor = 0;
    }
    const Batch batch = make_batch(examples, batches[cursor++]);
    const StepResult r = train_step(model, *opt, batch, cfg, drop);
    result.losses.push_back(r.loss);
    window_tokens += batch.target_tokens;
    const bool last = s + 1 == cfg.steps;
    if (logger && cfg.log_every > 0 && ((s + 1) % cfg.log_every == 0 || last)) {
      const auto now = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(now - window_start).count();
      logger({opt->step, r.loss, r.lr, r.grad_norm, secs > 0 ? static_cast<double>(window_tokens) / secs : 0.0});
      window_start = now;
      window_tokens = 0;
    }
  }
  result.steps = cfg.steps;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace MAT_REAL_NS
}  // namespace mat
