#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mat/audit.hpp"
#include "mat/checkpoint.hpp"
#include "mat/cli.hpp"
#include "mat/decoding.hpp"
#include "mat/errors.hpp"
#include "mat/evaluation.hpp"
#include "mat/training.hpp"

namespace py = pybind11;
using namespace mat;

namespace {

// Rows of a [n x V] tensor as nested lists.
std::vector<std::vector<float>> rows_of(const Tensor& t) {
  std::vector<std::vector<float>> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    out[i].resize(t.cols());
    for (std::size_t j = 0; j < t.cols(); ++j) out[i][j] = t.at(i, j);
  }
  return out;
}

std::vector<std::vector<float>> teacher_forced_logits(const Model& m, const std::vector<TokenId>& src,
                                                      const std::vector<TokenId>& tgt_in) {
  NoGradGuard ng;
  return rows_of(decode_forward(m, encode(m, src), tgt_in));
}

std::vector<std::vector<float>> incremental_logits(const Model& m, const std::vector<TokenId>& src,
                                                   const std::vector<TokenId>& tgt_in) {
  if (tgt_in.empty() || tgt_in.front() != kBosId) throw InputError("tgt_in must start with BOS");
  DecoderState st = init_state(m, src);
  std::vector<std::vector<float>> out;
  for (std::size_t t = 0; t < tgt_in.size(); ++t) {
    if (t > 0) push_token(m, st, tgt_in[t]);
    out.push_back(incremental_step(m, st));
  }
  return out;
}

py::dict audit(const Model& m, std::size_t n, std::size_t trials, std::uint64_t seed) {
  const auto r = random_perturbation_audit(m, n, trials, seed);
  py::list findings;
  for (const auto& f : r.findings) findings.append(py::make_tuple(f.perturbed, f.affected, f.max_abs_diff));
  py::dict d;
  d["model"] = r.model;
  d["window"] = r.window;
  d["rows_compared"] = r.rows_compared;
  d["perturbations"] = r.perturbations;
  d["findings"] = findings;
  d["markov_holds"] = r.markov_holds();
  return d;
}

py::dict ops(const Model& m, std::size_t n) {
  const auto r = count_decode_ops(m, n);
  py::dict d;
  d["variant"] = r.variant;
  d["order"] = r.order;
  d["n"] = r.n;
  d["self_attn_scores"] = r.self_attn_scores;
  d["self_attn_scores_total"] = r.self_attn_scores_total;
  d["kv_bytes_resident"] = r.kv_bytes_resident;
  d["retained_floats_final"] = r.retained_floats_final;
  d["closed_form"] = closed_form_self_attn_scores(m.config(), n);
  return d;
}

std::vector<std::pair<TokenList, TokenList>> synthetic(const std::string& task, std::size_t n_pairs,
                                                       std::size_t min_len, std::size_t max_len,
                                                       std::size_t symbols, std::size_t period, std::uint64_t seed) {
  SyntheticSpec s;
  s.task = parse_task(task);
  s.n_pairs = n_pairs;
  s.min_len = min_len;
  s.max_len = max_len;
  s.symbols = symbols;
  s.period = period;
  s.seed = seed;
  std::vector<std::pair<TokenList, TokenList>> out;
  for (const auto& p : gen_synthetic(s).pairs) out.emplace_back(p.src, p.tgt);
  return out;
}

py::tuple cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Markov autoregressive transformer core";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.attr("PAD") = kPadId;
  m.attr("BOS") = kBosId;
  m.attr("EOS") = kEosId;
  m.attr("UNK") = kUnkId;

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_property(
          "variant", [](const ModelConfig& c) { return to_string(c.variant); },
          [](ModelConfig& c, const std::string& v) { c.variant = parse_variant(v); })
      .def_readwrite("order", &ModelConfig::order)
      .def_readwrite("enc_layers", &ModelConfig::enc_layers)
      .def_readwrite("dec_layers", &ModelConfig::dec_layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("src_vocab", &ModelConfig::src_vocab)
      .def_readwrite("tgt_vocab", &ModelConfig::tgt_vocab)
      .def_readwrite("shared_vocab", &ModelConfig::shared_vocab)
      .def_readwrite("max_len", &ModelConfig::max_len)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def_readwrite("post_layernorm", &ModelConfig::post_layernorm)
      .def_readwrite("static_includes_position", &ModelConfig::static_includes_position)
      .def_readwrite("disable_transparency", &ModelConfig::disable_transparency)
      .def_readwrite("seed", &ModelConfig::seed)
      .def("window_at", &ModelConfig::window_at)
      .def("validate", &validate_config)
      .def("describe", &ModelConfig::describe)
      .def("__repr__", &ModelConfig::describe);

  py::class_<Model>(m, "Model")
      .def(py::init(&Model::create), py::arg("config"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", [](const Model& x) { return x.params().count(); })
      .def("parameter_names", [](const Model& x) {
        std::vector<std::string> names;
        for (const auto& p : x.params().named()) names.push_back(p.name);
        return names;
      });

  m.def("teacher_forced_logits", &teacher_forced_logits, py::arg("model"), py::arg("src"), py::arg("tgt_in"),
        "Parallel decoder logits, one row per decoder input.");
  m.def("incremental_logits", &incremental_logits, py::arg("model"), py::arg("src"), py::arg("tgt_in"),
        "Same rows computed one step at a time through the decoder state.");
  m.def(
      "greedy_decode",
      [](const Model& x, const std::vector<TokenId>& src, std::size_t max_len) { return greedy_decode(x, src, max_len); },
      py::arg("model"), py::arg("src"), py::arg("max_len") = 64);
  m.def(
      "beam_decode",
      [](const Model& x, const std::vector<TokenId>& src, std::size_t beam, std::size_t max_len, double alpha) {
        return beam_decode(x, src, beam, max_len, alpha);
      },
      py::arg("model"), py::arg("src"), py::arg("beam") = 4, py::arg("max_len") = 64, py::arg("alpha") = 0.0);
  m.def("count_decode_ops", &ops, py::arg("model"), py::arg("n"));
  m.def("audit_leakage", &audit, py::arg("model"), py::arg("n") = 12, py::arg("trials") = 1, py::arg("seed") = 1);
  m.def(
      "corpus_bleu",
      [](const std::vector<TokenList>& hyps, const std::vector<TokenList>& refs, std::size_t max_n) {
        return corpus_bleu(hyps, refs, max_n);
      },
      py::arg("hyps"), py::arg("refs"), py::arg("max_n") = 4);
  m.def("gen_synthetic", &synthetic, py::arg("task"), py::arg("n_pairs"), py::arg("min_len") = 4,
        py::arg("max_len") = 10, py::arg("symbols") = 8, py::arg("period") = 4, py::arg("seed") = 1);
  m.def("mode_positions", &mode_positions, py::arg("period"), py::arg("target_length"));
  m.def(
      "load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p).model; }, py::arg("path"));
  m.def("run_cli", &cli, py::arg("args"), "Runs the command-line tool in process; returns (code, stdout, stderr).");
}
