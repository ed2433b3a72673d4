#include "mat/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mat/audit.hpp"
#include "mat/checkpoint.hpp"
#include "mat/decoding.hpp"
#include "mat/errors.hpp"
#include "mat/evaluation.hpp"
#include "mat/run_config.hpp"
#include "mat/training.hpp"

namespace fs = std::filesystem;

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  Json j = Json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path);
    try {
      j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  for (const auto& s : sets) apply_override(j, s);
  RunConfig c = run_config_from_json(j);
  const auto errors = validate_run_config(c);
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return c;
}

Json leakage_json(const LeakageReport& r) {
  Json first = Json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(r.findings.size(), 10); ++i) {
    const auto& f = r.findings[i];
    first.push_back(Json{{"j", f.perturbed}, {"t", f.affected}, {"max_abs_diff", f.max_abs_diff}});
  }
  return Json{{"model", r.model},
              {"n", r.n},
              {"window", r.window},
              {"perturbations", r.perturbations},
              {"rows_compared", r.rows_compared},
              {"violations", r.findings.size()},
              {"first_violations", first},
              {"markov_holds", r.markov_holds()}};
}

Json ops_json(const DecodeOpsReport& r, const ModelConfig& cfg) {
  return Json{{"variant", r.variant},
              {"k", cfg.variant == Variant::MAT ? Json(r.order) : Json(nullptr)},
              {"n", r.n},
              {"layers", r.layers},
              {"heads", r.heads},
              {"self_attn_scores", r.self_attn_scores},
              {"self_attn_scores_total", r.self_attn_scores_total},
              {"closed_form", closed_form_self_attn_scores(cfg, r.n)},
              {"kv_bytes_resident", r.kv_bytes_resident},
              {"retained_floats_final", r.retained_floats_final}};
}

// ---- commands ---------------------------------------------------------------

struct GenDataArgs {
  std::string task;
  std::size_t size = 0;
  std::uint64_t seed = 1;
  std::size_t min_len = 4, max_len = 10, symbols = 8, period = 4;
  double test_fraction = 0.0;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  SyntheticSpec spec;
  spec.task = parse_task(a.task);
  spec.n_pairs = a.size;
  spec.seed = a.seed;
  spec.min_len = a.min_len;
  spec.max_len = a.max_len;
  spec.symbols = a.symbols;
  spec.period = a.period;
  const ParallelCorpus corpus = gen_synthetic(spec);
  const fs::path base = a.out.empty() ? fs::path(a.task + ".tsv") : fs::path(a.out);

  auto sidecar = [&](const std::string& split, std::size_t n) {
    Json j{{"task", to_string(spec.task)},
           {"d", spec.task == SyntheticTask::PeriodicMode ? Json(spec.period) : Json(nullptr)},
           {"seed", spec.seed},
           {"split", split},
           {"n_pairs", n},
           {"min_len", spec.min_len},
           {"max_len", spec.max_len},
           {"symbols", spec.symbols},
           {"tokenizer", "whitespace"}};
    if (split != "all") j["test_fraction"] = a.test_fraction;
    return j.dump(2) + "\n";
  };
  auto emit = [&](const fs::path& p, const ParallelCorpus& c, const std::string& split) {
    write_text(p, format_corpus(c, Tokenizer::Whitespace));
    fs::path side = p;
    side += ".json";
    write_text(side, sidecar(split, c.size()));
    out << p.string() << " (" << c.size() << " pairs)\n";
  };
  if (a.test_fraction > 0.0) {
    const auto split = split_corpus(corpus, a.test_fraction, spec.seed);
    fs::path train = base, test = base;
    train.replace_extension(".train.tsv");
    test.replace_extension(".test.tsv");
    emit(train, split.train, "train");
    emit(test, split.test, "test");
  } else {
    emit(base, corpus, "all");
  }
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string runs_dir = "runs";
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(a.config, a.sets);
  const fs::path dir = fs::path(a.runs_dir) / config_hash(cfg);
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

  const PreparedData data = prepare_data(cfg);
  if (data.dropped > 0) err << "note: dropped " << data.dropped << " over-length pair(s)\n";
  cfg.model.src_vocab = cfg.model.tgt_vocab = static_cast<int>(data.vocab.size());
  cfg.model.shared_vocab = true;
  Model model = Model::create(cfg.model);
  OptimizerState opt = make_optimizer(model.params(), cfg.training);

  std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
  if (!log) throw InputError("cannot write training log in " + dir.string());
  const TrainResult result = train(model, data.train, cfg.training, &opt, [&](const TrainLogEntry& e) {
    const Json line{{"step", e.step},
                    {"loss", e.loss},
                    {"lr", e.lr},
                    {"grad_norm", e.grad_norm},
                    {"tokens_per_sec", std::round(e.tokens_per_sec)}};
    log << line.dump() << "\n";
    log.flush();
    if (!a.quiet) err << line.dump() << "\n";
  });
  save_checkpoint(dir / "checkpoint.bin", model, data.vocab, data.vocab, cfg.data.tokenizer, &opt);

  const std::string metric = default_metric(cfg);
  const double value = evaluate_metric(model, data, cfg, metric);
  const Json metrics{{"metric", metric},
                     {"value", value},
                     {"n_eval", data.test.empty() ? data.train.size() : data.test.size()},
                     {"eval_split", data.test.empty() ? "train" : "test"},
                     {"steps", result.steps},
                     {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()},
                     {"vocab_size", data.vocab.size()},
                     {"parameters", model.params().count()}};
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  out << dir.string() << "\n";
  return kExitOk;
}

struct TranslateArgs {
  std::string checkpoint, input, output;
  std::size_t beam = 1;
  double alpha = 0.0;
  std::size_t max_len = 64;
  bool cache_kv = false;
};

int cmd_translate(const TranslateArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto lines = read_lines(a.input);
  const DecoderOptions opts{a.cache_kv};
  const auto src_cap = static_cast<std::size_t>(ck.model.config().max_len);
  std::string text;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto ids = to_ids(ck.src_vocab, tokenize(lines[i], ck.tokenizer));
    ids.push_back(kEosId);
    if (ids.size() > src_cap) {
      throw InputError(a.input + ":" + std::to_string(i + 1) + ": sentence longer than the model's max_len");
    }
    const auto hyp = a.beam <= 1 && a.alpha == 0.0 ? greedy_decode(ck.model, ids, a.max_len, opts)
                                                   : beam_decode(ck.model, ids, a.beam, a.max_len, a.alpha, opts);
    text += join_tokens(detokenize(ck.tgt_vocab, hyp), ck.tokenizer) + "\n";
  }
  write_text(a.output, text);
  out << "translated " << lines.size() << " line(s) -> " << a.output << "\n";
  return kExitOk;
}

struct EvaluateArgs {
  std::string hyp, ref, tokenizer = "whitespace", csv;
  std::vector<std::size_t> edges = kDefaultBucketEdges;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const Tokenizer tok = parse_tokenizer(a.tokenizer);
  const auto h = read_lines(a.hyp), r = read_lines(a.ref);
  if (h.size() != r.size()) {
    throw InputError("hypothesis file has " + std::to_string(h.size()) + " lines, reference file " +
                     std::to_string(r.size()));
  }
  std::vector<TokenList> hyps, refs;
  for (const auto& l : h) hyps.push_back(tokenize(l, tok));
  for (const auto& l : r) refs.push_back(tokenize(l, tok));
  const double bleu = corpus_bleu(hyps, refs);
  const auto buckets = bucketed_bleu(hyps, refs, a.edges);
  std::ostringstream csv;
  csv << "bucket,lo,hi,bleu,count\n" << std::fixed << std::setprecision(6);
  for (const auto& b : buckets) {
    csv << b.label() << ',' << b.lo << ',' << (b.hi ? std::to_string(*b.hi) : std::string("inf")) << ',' << b.bleu
        << ',' << b.count << '\n';
  }
  out << "bleu=" << std::fixed << std::setprecision(6) << bleu << " sentences=" << hyps.size() << "\n";
  if (a.csv.empty()) {
    out << csv.str();
  } else {
    write_text(a.csv, csv.str());
  }
  return kExitOk;
}

struct SweepArgs {
  std::string config;
  std::vector<std::string> sets;
  std::vector<int> k_list;
  std::vector<std::uint64_t> seeds{1};
  std::size_t jobs = 1;
  std::string metric, out_csv;
  bool no_baselines = false;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_config(a.config, a.sets);
  SweepOptions opts;
  opts.k_list = a.k_list;
  opts.seeds = a.seeds;
  opts.jobs = a.jobs;
  opts.metric = a.metric;
  opts.include_at = opts.include_tat = !a.no_baselines;
  const auto rows = order_sweep(cfg, opts);
  const std::string csv = sweep_csv(rows);
  for (const auto& r : rows) {
    if (r.failed) err << "cell k=" << r.k << " seed=" << r.seed << " " << r.variant << " failed: " << r.error << "\n";
  }
  if (a.out_csv.empty()) {
    out << csv;
  } else {
    write_text(a.out_csv, csv);
    out << a.out_csv << "\n";
  }
  return kExitOk;
}

struct AuditArgs {
  std::string config, checkpoint, report;
  std::vector<std::string> sets;
  std::size_t n = 12, trials = 2, vocab = 16;
  std::uint64_t seed = 1;
};

int cmd_audit(const AuditArgs& a, std::ostream& out) {
  std::optional<Model> model;
  if (!a.checkpoint.empty()) {
    model.emplace(load_checkpoint(a.checkpoint).model);
  } else {
    RunConfig cfg = load_config(a.config, a.sets);
    cfg.model.src_vocab = cfg.model.tgt_vocab = static_cast<int>(a.vocab);
    cfg.model.shared_vocab = true;
    model.emplace(Model::create(cfg.model));
  }
  const auto& mc = model->config();
  const std::size_t n = std::min(a.n, static_cast<std::size_t>(mc.max_len));
  const LeakageReport target = random_perturbation_audit(*model, n, a.trials, a.seed);
  Json report{{"target", leakage_json(target)}};
  bool pass = true;
  if (mc.variant != Variant::MAT) {
    report["note"] = "full-history variant: every earlier token is in reach, nothing to audit";
  } else {
    pass = target.markov_holds();
    // Same weights, keys/values taken from the current layer instead.
    ModelConfig control_cfg = mc;
    control_cfg.disable_transparency = !mc.disable_transparency;
    const Model control(control_cfg, clone_params(model->params(), mc));
    const LeakageReport ctl = random_perturbation_audit(control, n, a.trials, a.seed);
    Json c = leakage_json(ctl);
    c["leaks"] = !ctl.markov_holds();
    c["expected_to_leak"] = !control_cfg.transparent() && control_cfg.dec_layers >= 2;
    report["counterpart"] = c;
  }
  report["status"] = pass ? "pass" : "fail";
  const std::string text = report.dump(2) + "\n";
  if (!a.report.empty()) write_text(a.report, text);
  out << text;
  return pass ? kExitOk : kExitFailure;
}

struct CountOpsArgs {
  std::string config, variant = "MAT";
  std::vector<std::string> sets;
  std::size_t n = 25, vocab = 16;
  int k = 5, d_model = 64, layers = 2, heads = 4;
  bool cache_kv = false;
};

int cmd_count_ops(const CountOpsArgs& a, std::ostream& out) {
  ModelConfig mc;
  if (!a.config.empty() || !a.sets.empty()) {
    mc = load_config(a.config, a.sets).model;
  } else {
    mc.variant = parse_variant(a.variant);
    mc.order = a.k;
    mc.d_model = a.d_model;
    mc.d_ff = 2 * a.d_model;
    mc.enc_layers = mc.dec_layers = a.layers;
    mc.heads = a.heads;
    mc.max_len = static_cast<int>(std::max<std::size_t>(a.n, 64));
  }
  mc.src_vocab = mc.tgt_vocab = static_cast<int>(a.vocab);
  mc.shared_vocab = true;
  mc.dropout = 0.0f;
  if (a.n > static_cast<std::size_t>(mc.max_len)) {
    throw ConfigError("n=" + std::to_string(a.n) + " exceeds model.max_len=" + std::to_string(mc.max_len));
  }
  const Model model = Model::create(mc);
  out << ops_json(count_decode_ops(model, a.n, DecoderOptions{a.cache_kv}), mc).dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Markov autoregressive transformer toolkit", "mat"};
  app.require_subcommand(1);
  app.fallthrough(false);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic parallel corpus (TSV + JSON sidecar)");
  g->add_option("task", gen.task, "copy, reverse or periodic_mode")
      ->required()
      ->check(CLI::IsMember({"copy", "reverse", "periodic_mode"}));
  g->add_option("size", gen.size, "Number of sentence pairs")->required();
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--min-len", gen.min_len, "Shortest source sentence")->capture_default_str();
  g->add_option("--max-len", gen.max_len, "Longest source sentence")->capture_default_str();
  g->add_option("--symbols", gen.symbols, "Alphabet size w (symbols s1..sw)")->capture_default_str();
  g->add_option("--period", gen.period, "Dependency distance d for periodic_mode")->capture_default_str();
  g->add_option("--test-fraction", gen.test_fraction, "Hold out this fraction into a .test.tsv file")
      ->capture_default_str();
  g->add_option("-o,--out", gen.out, "Output TSV path (default <task>.tsv)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model; writes checkpoint, JSON-lines log and metrics");
  t->add_option("-c,--config", tr.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  t->add_option("--set", tr.sets, "Override a config key, e.g. --set model.order=5");
  t->add_option("--runs-dir", tr.runs_dir, "Parent of the per-config run directories")->capture_default_str();
  t->add_flag("-q,--quiet", tr.quiet, "Do not echo log lines to stderr");

  TranslateArgs tl;
  auto* x = app.add_subcommand("translate", "Decode one source sentence per input line");
  x->add_option("--checkpoint", tl.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  x->add_option("-i,--input", tl.input, "Source sentences, one per line")->required()->check(CLI::ExistingFile);
  x->add_option("-o,--output", tl.output, "Output file")->required();
  x->add_option("--beam", tl.beam, "Beam size (1 = greedy)")->capture_default_str()->check(CLI::PositiveNumber);
  x->add_option("--alpha", tl.alpha, "Length penalty exponent")->capture_default_str();
  x->add_option("--max-len", tl.max_len, "Maximum output tokens")->capture_default_str();
  x->add_flag("--cache-kv", tl.cache_kv, "Keep projected keys/values of the window between steps");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Corpus BLEU and reference-length bucketed BLEU");
  e->add_option("--hyp", ev.hyp, "Hypotheses, one per line")->required()->check(CLI::ExistingFile);
  e->add_option("--ref", ev.ref, "References, one per line")->required()->check(CLI::ExistingFile);
  e->add_option("--tokenizer", ev.tokenizer, "whitespace or char")->capture_default_str();
  e->add_option("--edges", ev.edges, "Bucket edges, comma separated")->delimiter(',')->capture_default_str();
  e->add_option("--csv", ev.csv, "Write the bucket table here instead of stdout");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Train one model per (k, seed) plus AT/TAT references; CSV out");
  s->add_option("-c,--config", sw.config, "Template run config JSON")->required()->check(CLI::ExistingFile);
  s->add_option("--set", sw.sets, "Override a config key");
  s->add_option("--k", sw.k_list, "Markov orders, comma separated")->delimiter(',')->required();
  s->add_option("--seeds", sw.seeds, "Seeds, comma separated")->delimiter(',')->capture_default_str();
  s->add_option("-j,--jobs", sw.jobs, "Cells trained concurrently")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--metric", sw.metric, "mode_accuracy, token_accuracy, sequence_accuracy or bleu");
  s->add_option("-o,--out", sw.out_csv, "CSV path (default stdout)");
  s->add_flag("--no-baselines", sw.no_baselines, "Skip the AT and TAT reference rows");

  AuditArgs au;
  auto* a = app.add_subcommand("audit-leakage", "Perturbation test of the Markov property, with counterpart");
  auto* a_cfg = a->add_option("-c,--config", au.config, "Run config JSON (random weights)");
  auto* a_ck = a->add_option("--checkpoint", au.checkpoint, "Audit a trained checkpoint");
  a_cfg->excludes(a_ck);
  a->add_option("--set", au.sets, "Override a config key");
  a->add_option("--n", au.n, "Decoder input length")->capture_default_str();
  a->add_option("--trials", au.trials, "Random sentences to perturb")->capture_default_str();
  a->add_option("--seed", au.seed, "Seed for the random sentences")->capture_default_str();
  a->add_option("--vocab", au.vocab, "Vocabulary size for config mode")->capture_default_str();
  a->add_option("--report", au.report, "Also write the JSON report here");

  CountOpsArgs co;
  auto* c = app.add_subcommand("count-ops", "Instrumented self-attention score count and resident decoder state");
  c->add_option("-c,--config", co.config, "Run config JSON (model section used)");
  c->add_option("--set", co.sets, "Override a config key");
  c->add_option("--n", co.n, "Tokens to generate")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--variant", co.variant, "AT, TAT or MAT (without --config)")->capture_default_str();
  c->add_option("--k", co.k, "Markov order (without --config)")->capture_default_str();
  c->add_option("--d-model", co.d_model, "Model width (without --config)")->capture_default_str();
  c->add_option("--layers", co.layers, "Layers (without --config)")->capture_default_str();
  c->add_option("--heads", co.heads, "Attention heads (without --config)")->capture_default_str();
  c->add_option("--vocab", co.vocab, "Vocabulary size")->capture_default_str();
  c->add_flag("--cache-kv", co.cache_kv, "Count with projected key/value caching enabled");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, out, err);
    if (x->parsed()) return cmd_translate(tl, out);
    if (e->parsed()) return cmd_evaluate(ev, out);
    if (s->parsed()) return cmd_sweep(sw, out, err);
    if (a->parsed()) {
      if (au.config.empty() && au.checkpoint.empty() && au.sets.empty()) {
        err << "audit-leakage: give --config or --checkpoint\n";
        return kExitUsage;
      }
      return cmd_audit(au, out);
    }
    if (c->parsed()) return cmd_count_ops(co, out);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace MAT_REAL_NS
}  // namespace mat
