#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "mat/data.hpp"
#include "mat/model.hpp"
#include "mat/training.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

// Container layout:
//   line 1: "MATCKPT <version>"
//   line 2: JSON manifest (config, vocabularies, tensor table)
//   rest:   little-endian float32 payload, tensors back to back
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  Vocab src_vocab;
  Vocab tgt_vocab;
  Tokenizer tokenizer = Tokenizer::Whitespace;
  std::optional<OptimizerState> optimizer;
};

std::string serialize_checkpoint(const Model& model, const Vocab& src_vocab, const Vocab& tgt_vocab,
                                 Tokenizer tokenizer, const OptimizerState* optimizer = nullptr);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& src_vocab,
                     const Vocab& tgt_vocab, Tokenizer tokenizer, const OptimizerState* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace MAT_REAL_NS
}  // namespace mat
