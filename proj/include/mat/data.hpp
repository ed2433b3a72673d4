#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mat/model.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

using TokenList = std::vector<std::string>;

// Token <-> id bijection. Ids 0..3 are always <pad>, <s>, </s>, <unk>.
class Vocab {
 public:
  Vocab();
  explicit Vocab(std::span<const std::string> non_reserved);

  // Returns the existing id when the token is already present.
  TokenId add(const std::string& token);
  TokenId id(std::string_view token) const;  // kUnkId when absent
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct SentencePair {
  TokenList src;
  TokenList tgt;
  bool operator==(const SentencePair&) const = default;
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
};

enum class Tokenizer { Whitespace, Character };
std::string to_string(Tokenizer t);
Tokenizer parse_tokenizer(std::string_view name);

TokenList tokenize(std::string_view text, Tokenizer tokenizer);
std::string join_tokens(std::span<const std::string> tokens, Tokenizer tokenizer);

struct CorpusIssue {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct ParseReport {
  ParallelCorpus corpus;
  std::vector<CorpusIssue> errors;
  std::vector<std::string> warnings;
};

// Source TAB target per line. Malformed lines are listed, the rest kept.
ParseReport parse_corpus_text(std::string_view text, Tokenizer tokenizer);
ParseReport parse_corpus_report(const std::filesystem::path& path, Tokenizer tokenizer);
// Throws FormatError naming every malformed line.
ParallelCorpus parse_corpus(const std::filesystem::path& path, Tokenizer tokenizer);

std::string format_corpus(const ParallelCorpus& corpus, Tokenizer tokenizer);
void write_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus, Tokenizer tokenizer);

enum class VocabSide { Both, Source, Target };

// Frequency descending, ties lexicographic. max_size bounds the total size
// including the reserved ids (0 = unbounded).
Vocab build_vocab(const ParallelCorpus& corpus, std::size_t min_freq = 1, std::size_t max_size = 0,
                  VocabSide side = VocabSide::Both);

struct Example {
  std::vector<TokenId> src;      // ids + EOS
  std::vector<TokenId> tgt_in;   // BOS + ids
  std::vector<TokenId> tgt_out;  // ids + EOS
};

struct NumericalizedCorpus {
  std::vector<Example> examples;
  std::size_t dropped = 0;  // pairs longer than max_len - 2 on either side
  std::size_t unk_tokens = 0;
};

Example numericalize_pair(const Vocab& src_vocab, const Vocab& tgt_vocab, const SentencePair& pair);
NumericalizedCorpus numericalize(const Vocab& src_vocab, const Vocab& tgt_vocab, const ParallelCorpus& corpus,
                                 std::size_t max_len);
std::vector<TokenId> to_ids(const Vocab& vocab, std::span<const std::string> tokens);

// Tokens up to the first EOS; PAD and BOS are skipped.
TokenList detokenize(const Vocab& vocab, std::span<const TokenId> ids);

enum class SyntheticTask { Copy, Reverse, PeriodicMode };
std::string to_string(SyntheticTask t);
SyntheticTask parse_task(std::string_view name);

struct SyntheticSpec {
  SyntheticTask task = SyntheticTask::Copy;
  std::size_t n_pairs = 1000;
  std::size_t min_len = 4;
  std::size_t max_len = 10;
  std::size_t symbols = 8;  // s1..sw
  std::size_t period = 4;   // d, periodic_mode only
  std::uint64_t seed = 1;
};

void validate_synthetic(const SyntheticSpec& spec);
std::string symbol_name(std::size_t index);  // 0 -> "s1"
// Cyclic successor on the symbol alphabet: s_i -> s_{i+1}, s_w -> s_1.
std::string successor(std::string_view symbol, std::size_t symbols);
ParallelCorpus gen_synthetic(const SyntheticSpec& spec);
// Applies the task definition to one source sentence.
TokenList synthetic_target(const SyntheticSpec& spec, const TokenList& src, std::string_view mode);

// Indices into Y (0 = the mode token, EOS excluded) whose token depends on
// the mode and whose nearest evidence lies exactly `period` steps back.
// target_length is |Y| without EOS.
std::vector<std::size_t> mode_positions(std::size_t period, std::size_t target_length);

struct CorpusSplit {
  ParallelCorpus train;
  ParallelCorpus test;
};

// Assignment depends only on the pair's content and the seed, so identical
// pairs never straddle the split.
CorpusSplit split_corpus(const ParallelCorpus& corpus, double test_fraction, std::uint64_t seed);

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0);

}  // namespace MAT_REAL_NS
}  // namespace mat
