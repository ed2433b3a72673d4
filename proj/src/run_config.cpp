#include "mat/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "mat/errors.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

// Reads known keys of one JSON object and rejects everything else.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const Json& v = j_.at(key);
    const std::string path = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
    }
    out = v.get<T>();
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) unknown.push_back(k);
    }
    if (unknown.empty()) return;
    std::string msg = where_ + ": unknown key(s)";
    for (const auto& k : unknown) msg += " '" + k + "'";
    throw ConfigError(msg);
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

Json synthetic_to_json(const SyntheticSpec& s) {
  return Json{{"task", to_string(s.task)}, {"n_pairs", s.n_pairs}, {"min_len", s.min_len}, {"max_len", s.max_len},
              {"symbols", s.symbols},      {"period", s.period},   {"seed", s.seed}};
}

SyntheticSpec synthetic_from_json(const Json& j) {
  SyntheticSpec s;
  StrictObject o(j, "data.synthetic");
  std::string task = to_string(s.task);
  o.read("task", task);
  s.task = parse_task(task);
  o.read("n_pairs", s.n_pairs);
  o.read("min_len", s.min_len);
  o.read("max_len", s.max_len);
  o.read("symbols", s.symbols);
  o.read("period", s.period);
  o.read("seed", s.seed);
  o.finish();
  return s;
}

Json training_to_json(const TrainingConfig& t) {
  return Json{{"base_lr", t.base_lr},
              {"warmup", t.warmup},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"eps", t.eps},
              {"weight_decay", t.weight_decay},
              {"clip_norm", t.clip_norm},
              {"label_smoothing", t.label_smoothing},
              {"steps", t.steps},
              {"batch_tokens", t.batch_tokens},
              {"log_every", t.log_every}};
}

TrainingConfig training_from_json(const Json& j) {
  TrainingConfig t;
  StrictObject o(j, "training");
  o.read("base_lr", t.base_lr);
  o.read("warmup", t.warmup);
  o.read("beta1", t.beta1);
  o.read("beta2", t.beta2);
  o.read("eps", t.eps);
  o.read("weight_decay", t.weight_decay);
  o.read("clip_norm", t.clip_norm);
  o.read("label_smoothing", t.label_smoothing);
  o.read("steps", t.steps);
  o.read("batch_tokens", t.batch_tokens);
  o.read("log_every", t.log_every);
  o.finish();
  return t;
}

}  // namespace

Json model_config_to_json(const ModelConfig& c) {
  return Json{{"variant", to_string(c.variant)},
              {"order", c.order},
              {"enc_layers", c.enc_layers},
              {"dec_layers", c.dec_layers},
              {"heads", c.heads},
              {"d_model", c.d_model},
              {"d_ff", c.d_ff},
              {"src_vocab", c.src_vocab},
              {"tgt_vocab", c.tgt_vocab},
              {"shared_vocab", c.shared_vocab},
              {"max_len", c.max_len},
              {"dropout", c.dropout},
              {"post_layernorm", c.post_layernorm},
              {"static_includes_position", c.static_includes_position},
              {"disable_transparency", c.disable_transparency},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  StrictObject o(j, "model");
  std::string variant = to_string(c.variant);
  o.read("variant", variant);
  c.variant = parse_variant(variant);
  o.read("order", c.order);
  o.read("enc_layers", c.enc_layers);
  o.read("dec_layers", c.dec_layers);
  o.read("heads", c.heads);
  o.read("d_model", c.d_model);
  o.read("d_ff", c.d_ff);
  o.read("src_vocab", c.src_vocab);
  o.read("tgt_vocab", c.tgt_vocab);
  o.read("shared_vocab", c.shared_vocab);
  o.read("max_len", c.max_len);
  o.read("dropout", c.dropout);
  o.read("post_layernorm", c.post_layernorm);
  o.read("static_includes_position", c.static_includes_position);
  o.read("disable_transparency", c.disable_transparency);
  o.read("seed", c.seed);
  o.finish();
  return c;
}

Json to_json(const RunConfig& c) {
  Json model = model_config_to_json(c.model);
  // Vocabulary sizes and the seed come from the data and the run.
  model.erase("src_vocab");
  model.erase("tgt_vocab");
  model.erase("seed");
  Json data{{"train", c.data.train_path},
            {"test", c.data.test_path},
            {"test_fraction", c.data.test_fraction},
            {"tokenizer", to_string(c.data.tokenizer)},
            {"min_freq", c.data.min_freq},
            {"max_vocab", c.data.max_vocab}};
  if (c.data.synthetic) data["synthetic"] = synthetic_to_json(*c.data.synthetic);
  Json decoding{{"beam", c.decoding.beam},
                {"alpha", c.decoding.alpha},
                {"max_len", c.decoding.max_len},
                {"cache_projected_kv", c.decoding.cache_projected_kv}};
  return Json{{"model", model},
              {"training", training_to_json(c.training)},
              {"data", data},
              {"decoding", decoding},
              {"seed", c.seed}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  StrictObject top(j, "config");
  top.read("seed", c.seed);
  if (const Json* m = top.child("model")) {
    if (m->is_object() && (m->contains("src_vocab") || m->contains("tgt_vocab") || m->contains("seed"))) {
      throw ConfigError("model: src_vocab, tgt_vocab and seed are derived; set data and the top-level seed instead");
    }
    c.model = model_config_from_json(*m);
  }
  if (const Json* t = top.child("training")) c.training = training_from_json(*t);
  if (const Json* d = top.child("data")) {
    StrictObject o(*d, "data");
    o.read("train", c.data.train_path);
    o.read("test", c.data.test_path);
    o.read("test_fraction", c.data.test_fraction);
    std::string tok = to_string(c.data.tokenizer);
    o.read("tokenizer", tok);
    c.data.tokenizer = parse_tokenizer(tok);
    o.read("min_freq", c.data.min_freq);
    o.read("max_vocab", c.data.max_vocab);
    if (const Json* s = o.child("synthetic")) c.data.synthetic = synthetic_from_json(*s);
    o.finish();
  }
  if (const Json* d = top.child("decoding")) {
    StrictObject o(*d, "decoding");
    o.read("beam", c.decoding.beam);
    o.read("alpha", c.decoding.alpha);
    o.read("max_len", c.decoding.max_len);
    o.read("cache_projected_kv", c.decoding.cache_projected_kv);
    o.finish();
  }
  top.finish();
  c.model.seed = c.seed;
  c.training.seed = c.seed;
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::vector<std::string> validate_run_config(const RunConfig& c) {
  std::vector<std::string> errors;
  ModelConfig m = c.model;
  // Vocabulary sizes are only known after the data is read.
  m.src_vocab = std::max(m.src_vocab, 5);
  m.tgt_vocab = std::max(m.tgt_vocab, 5);
  for (auto& e : validate_config(m)) errors.push_back("model: " + e);
  try {
    validate_training(c.training);
  } catch (const ConfigError& e) {
    errors.emplace_back(e.what());
  }
  if (c.data.synthetic) {
    try {
      validate_synthetic(*c.data.synthetic);
    } catch (const ConfigError& e) {
      errors.push_back(std::string("data.synthetic: ") + e.what());
    }
    if (!c.data.train_path.empty()) errors.emplace_back("data: give either synthetic or train, not both");
  }
  if (!(c.data.test_fraction >= 0.0 && c.data.test_fraction < 1.0)) {
    errors.emplace_back("data.test_fraction must be in [0, 1)");
  }
  if (c.decoding.beam == 0) errors.emplace_back("decoding.beam must be >= 1");
  if (c.decoding.max_len == 0) errors.emplace_back("decoding.max_len must be >= 1");
  return errors;
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = Json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override key '" + key + "': '" + part + "' is not an object");
    start = dot + 1;
  }
}

std::string config_hash(const RunConfig& c) {
  const auto h = fnv1a(to_json(c).dump());
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace MAT_REAL_NS
}  // namespace mat
