#include "mat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mat/errors.hpp"
#include "mat/run_config.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr const char* kMagic = "MATCKPT";

Json vocab_json(const Vocab& v) {
  Json arr = Json::array();
  for (std::size_t i = 4; i < v.size(); ++i) arr.push_back(v.tokens()[i]);
  return arr;
}

Vocab vocab_from_json(const Json& j, const char* what) {
  if (!j.is_array()) throw FormatError(std::string("checkpoint: ") + what + " must be an array");
  std::vector<std::string> tokens;
  for (const auto& t : j) {
    if (!t.is_string()) throw FormatError(std::string("checkpoint: ") + what + " holds a non-string token");
    tokens.push_back(t.get<std::string>());
  }
  return Vocab(tokens);
}

// The payload is float32 whatever Real is.
void append_floats(std::string& out, std::span<const Real> values) {
  const std::vector<float> f32(values.begin(), values.end());
  const auto old = out.size();
  out.resize(old + f32.size() * sizeof(float));
  std::memcpy(out.data() + old, f32.data(), f32.size() * sizeof(float));
}

template <class T>
T field(const Json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("checkpoint manifest: missing '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("checkpoint manifest: bad type for '") + key + "'");
  }
}

}  // namespace

std::string serialize_checkpoint(const Model& model, const Vocab& src_vocab, const Vocab& tgt_vocab,
                                 Tokenizer tokenizer, const OptimizerState* optimizer) {
  const auto& cfg = model.config();
  if (tgt_vocab.size() != static_cast<std::size_t>(cfg.tgt_vocab)) {
    throw ConfigError("checkpoint: target vocabulary size does not match the model");
  }
  const auto named = model.params().named();
  Json tensors = Json::array();
  std::string payload;
  std::size_t offset = 0;
  auto add = [&](const std::string& name, const Shape& shape, std::span<const Real> values) {
    tensors.push_back(Json{{"name", name}, {"shape", shape}, {"offset", offset}, {"count", values.size()}});
    append_floats(payload, values);
    offset += values.size();
  };
  for (const auto& p : named) add(p.name, p.tensor.shape(), p.tensor.data());
  Json manifest{{"format", kMagic},
                {"version", kCheckpointVersion},
                {"config", model_config_to_json(cfg)},
                {"tokenizer", to_string(tokenizer)},
                {"src_vocab", vocab_json(src_vocab)},
                {"tgt_vocab", vocab_json(tgt_vocab)}};
  if (optimizer) {
    if (optimizer->m.size() != named.size()) throw DimensionError("checkpoint: optimizer does not match parameters");
    manifest["optimizer"] = Json{{"step", optimizer->step},       {"beta1", optimizer->beta1},
                                 {"beta2", optimizer->beta2},     {"eps", optimizer->eps},
                                 {"base_lr", optimizer->base_lr}, {"weight_decay", optimizer->weight_decay},
                                 {"warmup", optimizer->warmup}};
    for (std::size_t i = 0; i < named.size(); ++i) add("adam.m." + named[i].name, named[i].tensor.shape(), optimizer->m[i]);
    for (std::size_t i = 0; i < named.size(); ++i) add("adam.v." + named[i].name, named[i].tensor.shape(), optimizer->v[i]);
  }
  manifest["tensors"] = tensors;
  manifest["payload_floats"] = offset;
  std::string out = std::string(kMagic) + " " + std::to_string(kCheckpointVersion) + "\n" + manifest.dump() + "\n";
  out += payload;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const auto nl1 = bytes.find('\n');
  if (nl1 == std::string::npos) throw FormatError("checkpoint: missing header line");
  std::istringstream header(bytes.substr(0, nl1));
  std::string magic;
  int version = 0;
  header >> magic >> version;
  if (magic != kMagic) throw FormatError("checkpoint: bad magic '" + magic + "'");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) throw FormatError("checkpoint: manifest is truncated");
  Json manifest;
  try {
    manifest = Json::parse(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint: corrupt manifest: ") + e.what());
  }
  if (field<int>(manifest, "version") != version) throw FormatError("checkpoint: header and manifest versions differ");

  ModelConfig cfg;
  try {
    cfg = model_config_from_json(field<Json>(manifest, "config"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const auto payload_floats = field<std::size_t>(manifest, "payload_floats");
  const std::size_t payload_start = nl2 + 1;
  const std::size_t available = bytes.size() - payload_start;
  if (available != payload_floats * sizeof(float)) {
    throw FormatError("checkpoint: payload holds " + std::to_string(available) + " bytes, manifest expects " +
                      std::to_string(payload_floats * sizeof(float)));
  }

  std::map<std::string, std::pair<Shape, std::size_t>> table;
  const auto tensors = field<Json>(manifest, "tensors");
  if (!tensors.is_array()) throw FormatError("checkpoint: tensor table must be an array");
  for (const auto& t : tensors) {
    const auto name = field<std::string>(t, "name");
    const auto shape = field<Shape>(t, "shape");
    const auto offset = field<std::size_t>(t, "offset");
    const auto count = field<std::size_t>(t, "count");
    if (shape_numel(shape) != count || offset + count > payload_floats) {
      throw FormatError("checkpoint: tensor '" + name + "' has inconsistent extent");
    }
    if (!table.emplace(name, std::make_pair(shape, offset)).second) {
      throw FormatError("checkpoint: duplicate tensor '" + name + "'");
    }
  }
  const char* payload = bytes.data() + payload_start;
  auto copy_into = [&](const std::string& name, const Shape& expect, std::span<Real> dst) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (it->second.first != expect) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_to_string(it->second.first) +
                        ", config implies " + shape_to_string(expect));
    }
    std::vector<float> f32(dst.size());
    std::memcpy(f32.data(), payload + it->second.second * sizeof(float), f32.size() * sizeof(float));
    std::copy(f32.begin(), f32.end(), dst.begin());
  };

  Parameters params;
  try {
    params = init_params(cfg);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const auto named = params.named();
  for (const auto& p : named) {
    Tensor t = p.tensor;
    copy_into(p.name, t.shape(), t.data());
  }
  std::optional<OptimizerState> opt;
  std::size_t expected_tensors = named.size();
  if (manifest.contains("optimizer")) {
    const auto& o = manifest["optimizer"];
    OptimizerState s;
    s.step = field<std::size_t>(o, "step");
    s.beta1 = field<double>(o, "beta1");
    s.beta2 = field<double>(o, "beta2");
    s.eps = field<double>(o, "eps");
    s.base_lr = field<double>(o, "base_lr");
    s.weight_decay = field<double>(o, "weight_decay");
    s.warmup = field<std::size_t>(o, "warmup");
    for (const auto& p : named) {
      s.m.emplace_back(p.tensor.numel());
      copy_into("adam.m." + p.name, p.tensor.shape(), s.m.back());
      s.v.emplace_back(p.tensor.numel());
      copy_into("adam.v." + p.name, p.tensor.shape(), s.v.back());
    }
    opt = std::move(s);
    expected_tensors *= 3;
  }
  if (table.size() != expected_tensors) throw FormatError("checkpoint: unexpected extra tensors");

  Vocab tgt = vocab_from_json(field<Json>(manifest, "tgt_vocab"), "tgt_vocab");
  Vocab src = vocab_from_json(field<Json>(manifest, "src_vocab"), "src_vocab");
  if (tgt.size() != static_cast<std::size_t>(cfg.tgt_vocab)) {
    throw FormatError("checkpoint: target vocabulary does not match config.tgt_vocab");
  }
  Tokenizer tok;
  try {
    tok = parse_tokenizer(field<std::string>(manifest, "tokenizer"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return Checkpoint{Model(cfg, std::move(params)), std::move(src), std::move(tgt), tok, std::move(opt)};
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& src_vocab,
                     const Vocab& tgt_vocab, Tokenizer tokenizer, const OptimizerState* optimizer) {
  const std::string bytes = serialize_checkpoint(model, src_vocab, tgt_vocab, tokenizer, optimizer);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace MAT_REAL_NS
}  // namespace mat
