#include "mat/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "mat/errors.hpp"
#include "mat/training.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const TokenList& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

std::vector<double> BleuStats::precisions() const {
  std::vector<double> p;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    p.push_back(totals[i] == 0 ? 0.0 : static_cast<double>(matches[i]) / static_cast<double>(totals[i]));
  }
  return p;
}

double BleuStats::brevity_penalty() const {
  if (hyp_len == 0) return 0.0;
  return std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
}

double BleuStats::bleu() const {
  double log_sum = 0.0;
  for (double p : precisions()) {
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  return brevity_penalty() * std::exp(log_sum / static_cast<double>(matches.size()));
}

BleuStats bleu_stats(std::span<const TokenList> hyps, std::span<const TokenList> refs, std::size_t max_n) {
  if (hyps.size() != refs.size()) throw InputError("BLEU: hypothesis and reference counts differ");
  if (max_n == 0) throw ConfigError("BLEU: max_n must be >= 1");
  BleuStats s;
  s.matches.assign(max_n, 0);
  s.totals.assign(max_n, 0);
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    s.hyp_len += hyps[i].size();
    s.ref_len += refs[i].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto h = count_ngrams(hyps[i], n);
      const auto r = count_ngrams(refs[i], n);
      for (const auto& [gram, c] : h) {
        s.totals[n - 1] += c;
        auto it = r.find(gram);
        if (it != r.end()) s.matches[n - 1] += std::min(c, it->second);
      }
    }
  }
  return s;
}

double corpus_bleu(std::span<const TokenList> hyps, std::span<const TokenList> refs, std::size_t max_n) {
  if (hyps.empty()) throw InputError("BLEU: empty corpus");
  return bleu_stats(hyps, refs, max_n).bleu();
}

std::string BleuBucket::label() const {
  return "[" + std::to_string(lo) + "," + (hi ? std::to_string(*hi) : std::string("inf")) + ")";
}

std::vector<BleuBucket> bucketed_bleu(std::span<const TokenList> hyps, std::span<const TokenList> refs,
                                      std::span<const std::size_t> edges) {
  if (hyps.size() != refs.size()) throw InputError("BLEU: hypothesis and reference counts differ");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) throw ConfigError("bucket edges must be strictly increasing");
  }
  if (!edges.empty() && edges[0] == 0) throw ConfigError("first bucket edge must be > 0");
  std::vector<BleuBucket> buckets(edges.size() + 1);
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    buckets[b].lo = b == 0 ? 0 : edges[b - 1];
    if (b < edges.size()) buckets[b].hi = edges[b];
  }
  std::vector<std::vector<TokenList>> bh(buckets.size()), br(buckets.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), refs[i].size()) - edges.begin());
    bh[b].push_back(hyps[i]);
    br[b].push_back(refs[i]);
  }
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    buckets[b].count = bh[b].size();
    if (!bh[b].empty()) buckets[b].bleu = corpus_bleu(bh[b], br[b]);
  }
  return buckets;
}

double AccuracyCount::value() const {
  if (total == 0) throw InputError("accuracy: no positions selected");
  return static_cast<double>(correct) / static_cast<double>(total);
}

AccuracyCount teacher_forced_counts(const Model& model, std::span<const Example> examples,
                                    const PositionFilter& filter) {
  NoGradGuard no_grad;
  AccuracyCount acc;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    const std::size_t end = std::min(examples.size(), start + kChunk);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const Batch batch = make_batch(examples, idx);
    const Tensor memory = encode_batch(model, batch.src);
    const Tensor logits = decode_batch(model, memory, batch.src, batch.tgt_in);
    const auto lv = logits.data();
    const std::size_t vocab = logits.cols(), width = batch.tgt_in.width;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const Example& ex = examples[idx[r]];
      for (std::size_t t = 0; t < ex.tgt_out.size(); ++t) {
        if (ex.tgt_out[t] == kPadId) continue;
        if (filter && !filter(ex, t)) continue;
        const Real* row = lv.data() + (r * width + t) * vocab;
        const auto best = static_cast<TokenId>(std::max_element(row, row + vocab) - row);
        acc.correct += best == ex.tgt_out[t];
        ++acc.total;
      }
    }
  }
  return acc;
}

double teacher_forced_accuracy(const Model& model, std::span<const Example> examples, const PositionFilter& filter) {
  return teacher_forced_counts(model, examples, filter).value();
}

PositionFilter mode_position_filter(std::size_t period) {
  if (period < 2) throw ConfigError("mode filter needs period >= 2");
  return [period](const Example& ex, std::size_t pos) {
    // Last tgt_out entry is EOS.
    return pos + 1 < ex.tgt_out.size() && pos > period && pos % period == 1;
  };
}

double sequence_accuracy(const Model& model, std::span<const Example> examples, std::size_t max_len,
                         const DecoderOptions& options) {
  if (examples.empty()) throw InputError("sequence accuracy: empty corpus");
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    const auto out = greedy_decode(model, ex.src, max_len, options);
    correct += std::equal(out.begin(), out.end(), ex.tgt_out.begin(), ex.tgt_out.end() - 1) &&
               out.size() + 1 == ex.tgt_out.size();
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

TranslationSet translate_examples(const Model& model, const Vocab& tgt_vocab, std::span<const Example> examples,
                                  std::size_t beam, double alpha, std::size_t max_len,
                                  const DecoderOptions& options) {
  TranslationSet set;
  for (const auto& ex : examples) {
    const auto out = beam <= 1 && alpha == 0.0 ? greedy_decode(model, ex.src, max_len, options)
                                               : beam_decode(model, ex.src, beam, max_len, alpha, options);
    set.hyps.push_back(detokenize(tgt_vocab, out));
    set.refs.push_back(detokenize(tgt_vocab, ex.tgt_out));
  }
  return set;
}

std::string default_metric(const RunConfig& config) {
  if (config.data.synthetic && config.data.synthetic->task == SyntheticTask::PeriodicMode) return "mode_accuracy";
  if (config.data.synthetic) return "sequence_accuracy";
  return "bleu";
}

PreparedData prepare_data(const RunConfig& config) {
  ParallelCorpus train, test;
  if (config.data.synthetic) {
    const auto all = gen_synthetic(*config.data.synthetic);
    auto split = split_corpus(all, config.data.test_fraction, config.data.synthetic->seed);
    train = std::move(split.train);
    test = std::move(split.test);
  } else {
    if (config.data.train_path.empty()) throw ConfigError("data: neither synthetic nor train path given");
    train = parse_corpus(config.data.train_path, config.data.tokenizer);
    if (!config.data.test_path.empty()) test = parse_corpus(config.data.test_path, config.data.tokenizer);
  }
  PreparedData out;
  out.vocab = build_vocab(train, config.data.min_freq, config.data.max_vocab);
  const auto max_len = static_cast<std::size_t>(config.model.max_len);
  auto tr = numericalize(out.vocab, out.vocab, train, max_len);
  auto te = numericalize(out.vocab, out.vocab, test, max_len);
  out.train = std::move(tr.examples);
  out.test = std::move(te.examples);
  out.dropped = tr.dropped + te.dropped;
  if (out.train.empty()) throw InputError("no usable training pairs");
  return out;
}

double evaluate_metric(const Model& model, const PreparedData& data, const RunConfig& config,
                       const std::string& metric) {
  const auto& eval = data.test.empty() ? data.train : data.test;
  const std::size_t max_len = std::min(config.decoding.max_len, static_cast<std::size_t>(config.model.max_len));
  const DecoderOptions opts{config.decoding.cache_projected_kv};
  if (metric == "mode_accuracy") {
    if (!config.data.synthetic || config.data.synthetic->task != SyntheticTask::PeriodicMode) {
      throw ConfigError("mode_accuracy needs the periodic_mode task");
    }
    return teacher_forced_accuracy(model, eval, mode_position_filter(config.data.synthetic->period));
  }
  if (metric == "token_accuracy") return teacher_forced_accuracy(model, eval);
  if (metric == "sequence_accuracy") return sequence_accuracy(model, eval, max_len, opts);
  if (metric == "bleu") {
    const auto set =
        translate_examples(model, data.vocab, eval, config.decoding.beam, config.decoding.alpha, max_len, opts);
    return corpus_bleu(set.hyps, set.refs);
  }
  throw ConfigError("unknown metric '" + metric + "'");
}

std::vector<SweepRow> order_sweep(const RunConfig& base, const SweepOptions& options) {
  if (options.k_list.empty() && !options.include_at && !options.include_tat) {
    throw ConfigError("sweep: nothing to run");
  }
  for (int k : options.k_list) {
    if (k < 1) throw ConfigError("sweep: every k must be >= 1");
  }
  if (options.seeds.empty()) throw ConfigError("sweep: no seeds");
  const std::string metric = options.metric.empty() ? default_metric(base) : options.metric;
  const PreparedData data = prepare_data(base);
  const auto& eval = data.test.empty() ? data.train : data.test;

  struct Cell {
    Variant variant;
    int k;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto seed : options.seeds) {
    for (int k : options.k_list) cells.push_back({Variant::MAT, k, seed});
    if (options.include_at) cells.push_back({Variant::AT, 0, seed});
    if (options.include_tat) cells.push_back({Variant::TAT, 0, seed});
  }

  std::vector<SweepRow> rows(cells.size());
  auto run_cell = [&](std::size_t i) {
    const Cell& c = cells[i];
    RunConfig cfg = base;
    cfg.seed = c.seed;
    cfg.model.seed = c.seed;
    cfg.training.seed = c.seed;
    cfg.model.variant = c.variant;
    if (c.variant == Variant::MAT) cfg.model.order = c.k;
    cfg.model.src_vocab = cfg.model.tgt_vocab = static_cast<int>(data.vocab.size());
    cfg.model.shared_vocab = true;
    SweepRow& row = rows[i];
    row.k = c.variant == Variant::MAT ? std::to_string(c.k) : "full";
    row.seed = c.seed;
    row.variant = to_string(c.variant);
    row.n_sentences = eval.size();
    try {
      Model model = Model::create(cfg.model);
      train(model, data.train, cfg.training);
      row.metric = evaluate_metric(model, data, cfg, metric);
    } catch (const Error& e) {
      row.failed = true;
      row.error = e.what();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, cells.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << "k,seed,variant,metric,n_sentences\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& r : rows) {
    os << r.k << ',' << r.seed << ',' << r.variant << ',';
    if (r.failed) {
      os << "failed";
    } else {
      os << r.metric;
    }
    os << ',' << r.n_sentences << '\n';
  }
  return os.str();
}

}  // namespace MAT_REAL_NS
}  // namespace mat
