#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mat/data.hpp"
#include "mat/decoding.hpp"
#include "mat/model.hpp"
#include "mat/run_config.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

struct BleuStats {
  std::vector<std::size_t> matches;  // clipped n-gram matches, n = 1..max_n
  std::vector<std::size_t> totals;   // hypothesis n-grams
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  std::vector<double> precisions() const;
  double brevity_penalty() const;
  double bleu() const;
};

BleuStats bleu_stats(std::span<const TokenList> hyps, std::span<const TokenList> refs, std::size_t max_n = 4);
// Corpus BLEU in [0, 1] without smoothing.
double corpus_bleu(std::span<const TokenList> hyps, std::span<const TokenList> refs, std::size_t max_n = 4);

struct BleuBucket {
  std::size_t lo = 0;
  std::optional<std::size_t> hi;  // exclusive; none for the last bucket
  double bleu = 0.0;
  std::size_t count = 0;
  std::string label() const;
};

inline const std::vector<std::size_t> kDefaultBucketEdges{10, 20, 30, 40, 50, 60};

// Buckets by reference length: [0,e0), [e0,e1), ..., [e_last, inf).
std::vector<BleuBucket> bucketed_bleu(std::span<const TokenList> hyps, std::span<const TokenList> refs,
                                      std::span<const std::size_t> edges = kDefaultBucketEdges);

// True when target index `pos` of `example` should be scored.
using PositionFilter = std::function<bool(const Example& example, std::size_t pos)>;

struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const;
};

// Argmax-vs-gold over non-pad target positions under teacher forcing.
AccuracyCount teacher_forced_counts(const Model& model, std::span<const Example> examples,
                                    const PositionFilter& filter = {});
// Throws InputError when the filter selects nothing.
double teacher_forced_accuracy(const Model& model, std::span<const Example> examples,
                               const PositionFilter& filter = {});

PositionFilter mode_position_filter(std::size_t period);

// Fraction of examples whose greedy output equals the reference exactly.
double sequence_accuracy(const Model& model, std::span<const Example> examples, std::size_t max_len,
                         const DecoderOptions& options = {});

struct TranslationSet {
  std::vector<TokenList> hyps;
  std::vector<TokenList> refs;
};

TranslationSet translate_examples(const Model& model, const Vocab& tgt_vocab, std::span<const Example> examples,
                                  std::size_t beam, double alpha, std::size_t max_len,
                                  const DecoderOptions& options = {});

// ---- order sweep ----------------------------------------------------------

struct SweepRow {
  std::string k;  // window order, or "full" for the AT / TAT reference rows
  std::uint64_t seed = 0;
  std::string variant;
  double metric = 0.0;
  std::size_t n_sentences = 0;
  bool failed = false;
  std::string error;
};

struct SweepOptions {
  std::vector<int> k_list;
  std::vector<std::uint64_t> seeds{1};
  bool include_at = true;
  bool include_tat = true;
  std::size_t jobs = 1;
  // "mode_accuracy" (periodic_mode), "token_accuracy", "sequence_accuracy" or "bleu".
  std::string metric;
};

std::string default_metric(const RunConfig& config);

struct PreparedData {
  Vocab vocab;  // shared source/target vocabulary
  std::vector<Example> train;
  std::vector<Example> test;
  std::size_t dropped = 0;
};

// Loads or generates the configured corpus, builds the vocabulary and
// numericalizes both splits.
PreparedData prepare_data(const RunConfig& config);

// Trains one model per cell with the template's budget.
std::vector<SweepRow> order_sweep(const RunConfig& base, const SweepOptions& options);
double evaluate_metric(const Model& model, const PreparedData& data, const RunConfig& config,
                       const std::string& metric);

std::string sweep_csv(std::span<const SweepRow> rows);

}  // namespace MAT_REAL_NS
}  // namespace mat
