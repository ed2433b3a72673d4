#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mat/data.hpp"
#include "mat/model.hpp"
#include "mat/training.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

using Json = nlohmann::ordered_json;

struct DataConfig {
  // Either TSV files or a synthetic generator.
  std::string train_path;
  std::string test_path;
  std::optional<SyntheticSpec> synthetic;
  double test_fraction = 0.1;  // synthetic only: held out by seeded hashing
  Tokenizer tokenizer = Tokenizer::Whitespace;
  std::size_t min_freq = 1;
  std::size_t max_vocab = 0;
};

struct DecodingConfig {
  std::size_t beam = 1;
  double alpha = 0.0;
  std::size_t max_len = 64;
  bool cache_projected_kv = false;
};

struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
  DataConfig data;
  DecodingConfig decoding;
  // Seeds model initialization, dropout and batch order.
  std::uint64_t seed = 1;
};

Json model_config_to_json(const ModelConfig& c);
// Strict: unknown keys and wrong types throw ConfigError. Missing keys keep defaults.
ModelConfig model_config_from_json(const Json& j);

Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::string& path);

// Every problem found, without throwing; empty when the config is runnable.
std::vector<std::string> validate_run_config(const RunConfig& c);

// "section.key=value"; value parsed as JSON, falling back to a string.
void apply_override(Json& j, const std::string& assignment);

// Hex FNV-1a of the canonical JSON form.
std::string config_hash(const RunConfig& c);

}  // namespace MAT_REAL_NS
}  // namespace mat
