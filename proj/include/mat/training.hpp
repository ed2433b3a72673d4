#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mat/data.hpp"
#include "mat/model.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

struct TrainingConfig {
  // lr(step) = base_lr * min(step^-0.5, step * warmup^-1.5)
  double base_lr = 0.04;
  std::size_t warmup = 400;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  float label_smoothing = 0.1f;
  std::size_t steps = 1000;
  std::size_t batch_tokens = 1024;  // padded target+source tokens per batch
  std::size_t log_every = 50;
  std::uint64_t seed = 1;
};

void validate_training(const TrainingConfig& cfg);

// Step multiplier of the inverse square-root schedule; step >= 1.
double schedule_factor(std::size_t step, std::size_t warmup);
double learning_rate(const TrainingConfig& cfg, std::size_t step);

struct OptimizerState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double base_lr = 0.04;
  double weight_decay = 0.01;
  std::size_t warmup = 400;
};

OptimizerState make_optimizer(const Parameters& params, const TrainingConfig& cfg);

// AdamW with the decay decoupled from the gradient step:
//   p -= s * (base_lr * mhat / (sqrt(vhat) + eps) + weight_decay * p)
// with s the schedule factor. Uses whatever gradients the parameters hold.
void adamw_update(std::span<const NamedTensor> params, OptimizerState& opt);

struct Batch {
  PaddedBatch src;
  PaddedBatch tgt_in;
  std::vector<TokenId> tgt_out;  // tgt_in.batch * tgt_in.width, PAD-filled
  std::size_t target_tokens = 0;
};

Batch make_batch(std::span<const Example> examples);
Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> indices);

// Mean smoothed negative log-likelihood over non-pad target tokens.
Tensor nll_loss(const Model& model, const Batch& batch, float label_smoothing, const ForwardContext& ctx = {});

// Per-example sum of token losses, no smoothing, no dropout.
std::vector<double> sentence_losses(const Model& model, std::span<const Example> examples);

// sqrt of the summed squared gradients; scales them down to max_norm when larger.
double clip_grad_norm(std::span<const NamedTensor> params, double max_norm);

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// zero grads, forward, backward, clip, update. Throws NumericError on a
// non-finite loss or gradient.
StepResult train_step(Model& model, OptimizerState& opt, const Batch& batch, const TrainingConfig& cfg,
                      std::mt19937_64* dropout_rng);

// Length-bucketed index batches. Examples are sorted by (target, source)
// length after a seeded shuffle, cut so padded tokens stay within the
// budget, then the batch order is shuffled.
std::vector<std::vector<std::size_t>> make_length_batches(std::span<const Example> examples,
                                                          std::size_t batch_tokens, std::mt19937_64& rng);

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double tokens_per_sec = 0.0;
};

struct TrainResult {
  std::vector<double> losses;  // one per step
  std::size_t steps = 0;
  double seconds = 0.0;
};

using TrainLogger = std::function<void(const TrainLogEntry&)>;

// Runs cfg.steps updates cycling over reshuffled length buckets.
TrainResult train(Model& model, std::span<const Example> examples, const TrainingConfig& cfg,
                  OptimizerState* opt = nullptr, const TrainLogger& logger = {});

}  // namespace MAT_REAL_NS
}  // namespace mat
