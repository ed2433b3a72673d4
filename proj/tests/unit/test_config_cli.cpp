#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mat/checkpoint.hpp"
#include "mat/cli.hpp"
#include "mat/errors.hpp"
#include "mat/run_config.hpp"

using namespace mat;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mat_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

const char* kTinyConfig = R"({
  "model": {"variant": "MAT", "order": 2, "enc_layers": 1, "dec_layers": 1, "heads": 2, "d_model": 8,
            "d_ff": 16, "max_len": 16, "dropout": 0.0},
  "training": {"steps": 3, "batch_tokens": 128, "log_every": 1, "warmup": 2},
  "data": {"synthetic": {"task": "copy", "n_pairs": 40, "min_len": 2, "max_len": 4, "symbols": 4, "seed": 3},
           "test_fraction": 0.2},
  "decoding": {"max_len": 8},
  "seed": 5
})";

}  // namespace

TEST_CASE("run config parsing is strict") {
  const RunConfig c = run_config_from_json(Json::parse(kTinyConfig));
  CHECK(c.model.order == 2);
  CHECK(c.model.seed == 5);
  CHECK(c.training.seed == 5);
  REQUIRE(c.data.synthetic.has_value());
  CHECK(c.data.synthetic->n_pairs == 40);
  CHECK(validate_run_config(c).empty());

  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"model": {"ordr": 3}})")), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"training": {"steps": "many"}})")), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"model": {"seed": 3}})")), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"extra": 1})")), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"model": {"variant": "RNN"}})")), ConfigError);
}

TEST_CASE("run config validation collects every problem") {
  RunConfig c = run_config_from_json(Json::parse(kTinyConfig));
  c.model.heads = 3;
  c.decoding.beam = 0;
  c.data.test_fraction = 1.0;
  const auto errors = validate_run_config(c);
  CHECK(errors.size() == 3);
}

TEST_CASE("overrides and hashing") {
  Json j = Json::parse(kTinyConfig);
  const std::string h0 = config_hash(run_config_from_json(j));
  CHECK(h0.size() == 16);
  CHECK(config_hash(run_config_from_json(j)) == h0);
  apply_override(j, "model.order=5");
  apply_override(j, "data.tokenizer=char");
  const RunConfig c = run_config_from_json(j);
  CHECK(c.model.order == 5);
  CHECK(c.data.tokenizer == Tokenizer::Character);
  CHECK(config_hash(c) != h0);
  CHECK_THROWS_AS(apply_override(j, "model.order"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "model..order=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "seed.x=1"), ConfigError);
  // round trip through the JSON form
  CHECK(config_hash(run_config_from_json(to_json(c))) == config_hash(c));
  const ModelConfig m = model_config_from_json(model_config_to_json(c.model));
  CHECK(m.order == 5);
  CHECK(m.seed == 5);
}

TEST_CASE("cli usage errors and help") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"gen-data"}).code == kExitUsage);
  const auto help = cli({"--help"});
  CHECK(help.code == kExitOk);
  CHECK(help.out.find("count-ops") != std::string::npos);
  CHECK(cli({"count-ops", "--n", "0"}).code == kExitUsage);
  CHECK(cli({"translate", "--checkpoint", "/nonexistent", "-i", "x", "-o", "y"}).code == kExitUsage);
}

TEST_CASE("cli gen-data") {
  const auto dir = scratch_dir("gen");
  const auto out = (dir / "p.tsv").string();
  const auto r = cli({"gen-data", "periodic_mode", "30", "--period", "3", "--seed", "4", "-o", out});
  REQUIRE(r.code == kExitOk);
  const auto corpus = parse_corpus(out, Tokenizer::Whitespace);
  CHECK(corpus.size() == 30);
  const Json side = Json::parse(slurp(out + ".json"));
  CHECK(side["task"] == "periodic_mode");
  CHECK(side["d"] == 3);
  CHECK(side["seed"] == 4);
  // same arguments, same bytes
  const auto again = (dir / "q.tsv").string();
  cli({"gen-data", "periodic_mode", "30", "--period", "3", "--seed", "4", "-o", again});
  CHECK(slurp(again) == slurp(out));

  const auto split = cli({"gen-data", "copy", "200", "--test-fraction", "0.25", "-o", (dir / "c.tsv").string()});
  REQUIRE(split.code == kExitOk);
  const auto tr = parse_corpus(dir / "c.train.tsv", Tokenizer::Whitespace);
  const auto te = parse_corpus(dir / "c.test.tsv", Tokenizer::Whitespace);
  CHECK(tr.size() + te.size() == 200);
  CHECK(te.size() > 0);

  CHECK(cli({"gen-data", "unknown_task", "10", "-o", out}).code != kExitOk);
  CHECK(cli({"gen-data", "periodic_mode", "10", "--period", "1", "-o", out}).code == kExitFailure);
}

TEST_CASE("cli count-ops") {
  const auto mat = cli({"count-ops", "--variant", "MAT", "--k", "5", "--n", "25"});
  REQUIRE(mat.code == kExitOk);
  const Json m = Json::parse(mat.out);
  CHECK(m["self_attn_scores"] == 115);
  CHECK(m["closed_form"] == 115);
  const Json a = Json::parse(cli({"count-ops", "--variant", "AT", "--n", "25"}).out);
  CHECK(a["self_attn_scores"] == 325);
  CHECK(cli({"count-ops", "--variant", "XYZ"}).code == kExitFailure);
}

TEST_CASE("cli audit-leakage") {
  const auto dir = scratch_dir("audit");
  spit(dir / "cfg.json", kTinyConfig);
  const auto report = (dir / "report.json").string();
  const auto ok = cli({"audit-leakage", "-c", (dir / "cfg.json").string(), "--set", "model.dec_layers=2", "--n", "8",
                       "--trials", "1", "--report", report});
  CHECK(ok.code == kExitOk);
  const Json j = Json::parse(slurp(report));
  CHECK(j["status"] == "pass");
  CHECK(j["counterpart"]["leaks"] == true);

  const auto bad = cli({"audit-leakage", "-c", (dir / "cfg.json").string(), "--set", "model.dec_layers=2", "--set",
                        "model.disable_transparency=true", "--n", "8", "--trials", "1"});
  CHECK(bad.code == kExitFailure);
}

TEST_CASE("cli train, translate and evaluate end to end") {
  const auto dir = scratch_dir("e2e");
  spit(dir / "cfg.json", kTinyConfig);
  const auto runs = (dir / "runs").string();
  const auto tr = cli({"train", "-c", (dir / "cfg.json").string(), "--runs-dir", runs, "-q"});
  REQUIRE_MESSAGE(tr.code == kExitOk, tr.err);
  const fs::path run_dir = tr.out.substr(0, tr.out.find('\n'));
  CHECK(fs::exists(run_dir / "config.json"));
  CHECK(fs::exists(run_dir / "checkpoint.bin"));
  const Json metrics = Json::parse(slurp(run_dir / "metrics.json"));
  CHECK(metrics["metric"] == "sequence_accuracy");
  CHECK(metrics["steps"] == 3);
  std::istringstream log(slurp(run_dir / "train_log.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    const Json e = Json::parse(line);
    CHECK(e.contains("loss"));
    CHECK(e.contains("lr"));
    CHECK(e.contains("grad_norm"));
    CHECK(e.contains("tokens_per_sec"));
    ++n;
  }
  CHECK(n == 3);

  // Overrides change the run directory.
  const auto tr2 = cli({"train", "-c", (dir / "cfg.json").string(), "--runs-dir", runs, "-q", "--set", "seed=6"});
  REQUIRE(tr2.code == kExitOk);
  CHECK(tr2.out != tr.out);

  spit(dir / "src.txt", "s1 s2 s3\ns4 s4\n");
  spit(dir / "ref.txt", "s1 s2 s3 s4 s1\ns4 s4 s2 s3\n");
  const auto hyp = (dir / "hyp.txt").string();
  const auto ck = (run_dir / "checkpoint.bin").string();
  for (const std::string beam : {"1", "3"}) {
    const auto t = cli({"translate", "--checkpoint", ck, "-i", (dir / "src.txt").string(), "-o", hyp, "--beam", beam,
                        "--max-len", "6"});
    REQUIRE_MESSAGE(t.code == kExitOk, t.err);
    std::istringstream lines(slurp(hyp));
    int count = 0;
    while (std::getline(lines, line)) ++count;
    CHECK(count == 2);
  }

  const auto self = cli({"evaluate", "--hyp", (dir / "ref.txt").string(), "--ref", (dir / "ref.txt").string(),
                         "--edges", "2,3"});
  REQUIRE(self.code == kExitOk);
  CHECK(self.out.find("bleu=1.000000") != std::string::npos);
  CHECK(self.out.find("bucket,lo,hi,bleu,count") != std::string::npos);

  spit(dir / "short.txt", "s1\n");
  CHECK(cli({"evaluate", "--hyp", (dir / "short.txt").string(), "--ref", (dir / "ref.txt").string()}).code ==
        kExitFailure);

  // A truncated checkpoint is a failure, not a crash.
  const std::string bytes = slurp(ck);
  spit(dir / "broken.bin", bytes.substr(0, bytes.size() / 2));
  CHECK(cli({"translate", "--checkpoint", (dir / "broken.bin").string(), "-i", (dir / "src.txt").string(), "-o",
             hyp})
            .code == kExitFailure);
}

TEST_CASE("cli sweep") {
  const auto dir = scratch_dir("sweep");
  spit(dir / "cfg.json", kTinyConfig);
  const auto csv = (dir / "out.csv").string();
  const auto r = cli({"sweep", "-c", (dir / "cfg.json").string(), "--k", "1,2", "--no-baselines", "-o", csv,
                      "--set", "training.steps=2"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const std::string text = slurp(csv);
  CHECK(text.rfind("k,seed,variant,metric,n_sentences\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}
