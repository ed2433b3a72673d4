#include "mat/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "mat/errors.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

const std::string kReserved[] = {"<pad>", "<s>", "</s>", "<unk>"};
// Stand-in for a space under character tokenization.
const std::string kSpaceMark = "\xE2\x96\x81";

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // stray continuation byte: keep it as its own token
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Vocab::Vocab() {
  for (const auto& t : kReserved) add(t);
}

Vocab::Vocab(std::span<const std::string> non_reserved) : Vocab() {
  for (const auto& t : non_reserved) {
    if (contains(t)) throw FormatError("duplicate vocabulary entry '" + t + "'");
    add(t);
  }
}

TokenId Vocab::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string to_string(Tokenizer t) { return t == Tokenizer::Whitespace ? "whitespace" : "char"; }

Tokenizer parse_tokenizer(std::string_view name) {
  if (name == "whitespace") return Tokenizer::Whitespace;
  if (name == "char") return Tokenizer::Character;
  throw ConfigError("unknown tokenizer '" + std::string(name) + "' (expected whitespace or char)");
}

TokenList tokenize(std::string_view text, Tokenizer tokenizer) {
  TokenList out;
  if (tokenizer == Tokenizer::Whitespace) {
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      if (j > i) out.emplace_back(text.substr(i, j - i));
      i = j;
    }
    return out;
  }
  // Character mode: one token per code point, runs of blanks collapse to one mark.
  std::size_t i = 0;
  while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  bool pending_space = false;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      pending_space = true;
      ++i;
      continue;
    }
    if (pending_space) out.push_back(kSpaceMark);
    pending_space = false;
    const std::size_t n = std::min(utf8_length(c), text.size() - i);
    out.emplace_back(text.substr(i, n));
    i += n;
  }
  return out;
}

std::string join_tokens(std::span<const std::string> tokens, Tokenizer tokenizer) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokenizer == Tokenizer::Whitespace) {
      if (i) out += ' ';
      out += tokens[i];
    } else {
      out += tokens[i] == kSpaceMark ? std::string(" ") : tokens[i];
    }
  }
  return out;
}

ParseReport parse_corpus_text(std::string_view text, Tokenizer tokenizer) {
  ParseReport report;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos && line.find('\t') == std::string_view::npos) {
      report.warnings.push_back("line " + std::to_string(line_no) + ": blank line skipped");
      continue;
    }
    const auto tabs = std::count(line.begin(), line.end(), '\t');
    if (tabs != 1) {
      report.errors.push_back({line_no, tabs == 0 ? "missing tab separator"
                                                  : "expected exactly one tab, found " + std::to_string(tabs)});
      continue;
    }
    const auto tab = line.find('\t');
    SentencePair pair{tokenize(line.substr(0, tab), tokenizer), tokenize(line.substr(tab + 1), tokenizer)};
    if (pair.src.empty() || pair.tgt.empty()) {
      report.errors.push_back({line_no, pair.src.empty() ? "empty source side" : "empty target side"});
      continue;
    }
    report.corpus.pairs.push_back(std::move(pair));
  }
  if (line_no == 0) report.warnings.push_back("empty corpus");
  return report;
}

ParseReport parse_corpus_report(const std::filesystem::path& path, Tokenizer tokenizer) {
  return parse_corpus_text(read_file(path), tokenizer);
}

ParallelCorpus parse_corpus(const std::filesystem::path& path, Tokenizer tokenizer) {
  auto report = parse_corpus_report(path, tokenizer);
  if (!report.errors.empty()) {
    std::string msg = path.string() + ": " + std::to_string(report.errors.size()) + " malformed line(s)";
    for (const auto& e : report.errors) msg += "\n  line " + std::to_string(e.line) + ": " + e.message;
    throw FormatError(msg);
  }
  return std::move(report.corpus);
}

std::string format_corpus(const ParallelCorpus& corpus, Tokenizer tokenizer) {
  std::string out;
  for (const auto& p : corpus.pairs) {
    out += join_tokens(p.src, tokenizer);
    out += '\t';
    out += join_tokens(p.tgt, tokenizer);
    out += '\n';
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus, Tokenizer tokenizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << format_corpus(corpus, tokenizer);
}

Vocab build_vocab(const ParallelCorpus& corpus, std::size_t min_freq, std::size_t max_size, VocabSide side) {
  std::map<std::string, std::size_t> freq;
  for (const auto& p : corpus.pairs) {
    if (side != VocabSide::Target)
      for (const auto& t : p.src) ++freq[t];
    if (side != VocabSide::Source)
      for (const auto& t : p.tgt) ++freq[t];
  }
  std::vector<std::pair<std::string, std::size_t>> items;
  Vocab reserved;
  for (auto& [tok, n] : freq) {
    if (n >= std::max<std::size_t>(min_freq, 1) && !reserved.contains(tok)) items.emplace_back(tok, n);
  }
  // std::map iteration is lexicographic, so a stable sort keeps ties ordered.
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (max_size > 0) {
    const std::size_t room = max_size > reserved.size() ? max_size - reserved.size() : 0;
    if (items.size() > room) items.resize(room);
  }
  Vocab v;
  for (const auto& item : items) v.add(item.first);
  return v;
}

std::vector<TokenId> to_ids(const Vocab& vocab, std::span<const std::string> tokens) {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

Example numericalize_pair(const Vocab& src_vocab, const Vocab& tgt_vocab, const SentencePair& pair) {
  Example ex;
  ex.src = to_ids(src_vocab, pair.src);
  ex.src.push_back(kEosId);
  const auto tgt = to_ids(tgt_vocab, pair.tgt);
  ex.tgt_in.push_back(kBosId);
  ex.tgt_in.insert(ex.tgt_in.end(), tgt.begin(), tgt.end());
  ex.tgt_out = tgt;
  ex.tgt_out.push_back(kEosId);
  return ex;
}

NumericalizedCorpus numericalize(const Vocab& src_vocab, const Vocab& tgt_vocab, const ParallelCorpus& corpus,
                                 std::size_t max_len) {
  if (max_len < 3) throw ConfigError("numericalize: max_len must be >= 3");
  NumericalizedCorpus out;
  for (const auto& p : corpus.pairs) {
    if (p.src.size() > max_len - 2 || p.tgt.size() > max_len - 2) {
      ++out.dropped;
      continue;
    }
    out.examples.push_back(numericalize_pair(src_vocab, tgt_vocab, p));
    const auto& ex = out.examples.back();
    out.unk_tokens += static_cast<std::size_t>(std::count(ex.src.begin(), ex.src.end(), kUnkId) +
                                               std::count(ex.tgt_out.begin(), ex.tgt_out.end(), kUnkId));
  }
  return out;
}

TokenList detokenize(const Vocab& vocab, std::span<const TokenId> ids) {
  TokenList out;
  for (auto id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kBosId) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

std::string to_string(SyntheticTask t) {
  switch (t) {
    case SyntheticTask::Copy:
      return "copy";
    case SyntheticTask::Reverse:
      return "reverse";
    case SyntheticTask::PeriodicMode:
      return "periodic_mode";
  }
  return "?";
}

SyntheticTask parse_task(std::string_view name) {
  if (name == "copy") return SyntheticTask::Copy;
  if (name == "reverse") return SyntheticTask::Reverse;
  if (name == "periodic_mode") return SyntheticTask::PeriodicMode;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected copy, reverse or periodic_mode)");
}

void validate_synthetic(const SyntheticSpec& spec) {
  if (spec.min_len == 0 || spec.min_len > spec.max_len) throw ConfigError("synthetic: need 1 <= min_len <= max_len");
  if (spec.task == SyntheticTask::PeriodicMode) {
    if (spec.period < 2) throw ConfigError("periodic_mode: d must be >= 2");
    if (spec.symbols < 4) throw ConfigError("periodic_mode: need at least 4 symbols");
  } else if (spec.symbols < 1) {
    throw ConfigError("synthetic: need at least one symbol");
  }
}

std::string symbol_name(std::size_t index) { return "s" + std::to_string(index + 1); }

std::string successor(std::string_view symbol, std::size_t symbols) {
  if (symbol.size() < 2 || symbol[0] != 's') throw InputError("not a symbol: " + std::string(symbol));
  const std::size_t i = std::stoul(std::string(symbol.substr(1)));
  if (i == 0 || i > symbols) throw InputError("symbol out of range: " + std::string(symbol));
  return symbol_name(i % symbols);
}

TokenList synthetic_target(const SyntheticSpec& spec, const TokenList& src, std::string_view mode) {
  switch (spec.task) {
    case SyntheticTask::Copy:
      return src;
    case SyntheticTask::Reverse:
      return {src.rbegin(), src.rend()};
    case SyntheticTask::PeriodicMode: {
      TokenList y{std::string(mode)};
      for (std::size_t j = 1; j <= src.size(); ++j) {
        const auto& x = src[j - 1];
        y.push_back(mode == "B" && j % spec.period == 1 % spec.period ? successor(x, spec.symbols) : x);
      }
      return y;
    }
  }
  return {};
}

ParallelCorpus gen_synthetic(const SyntheticSpec& spec) {
  validate_synthetic(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::size_t> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<std::size_t> sym_dist(0, spec.symbols - 1);
  std::bernoulli_distribution mode_dist(0.5);
  ParallelCorpus corpus;
  corpus.pairs.reserve(spec.n_pairs);
  for (std::size_t i = 0; i < spec.n_pairs; ++i) {
    const std::size_t len = len_dist(rng);
    TokenList src;
    for (std::size_t j = 0; j < len; ++j) src.push_back(symbol_name(sym_dist(rng)));
    const char* mode = "A";
    if (spec.task == SyntheticTask::PeriodicMode && mode_dist(rng)) mode = "B";
    corpus.pairs.push_back({src, synthetic_target(spec, src, mode)});
  }
  return corpus;
}

std::vector<std::size_t> mode_positions(std::size_t period, std::size_t target_length) {
  std::vector<std::size_t> out;
  for (std::size_t j = period + 1; j < target_length; j += period) out.push_back(j);
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

CorpusSplit split_corpus(const ParallelCorpus& corpus, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw ConfigError("test fraction must be in [0, 1]");
  CorpusSplit split;
  const auto threshold = static_cast<std::uint64_t>(test_fraction * 1'000'000.0);
  for (const auto& p : corpus.pairs) {
    std::string key = join_tokens(p.src, Tokenizer::Whitespace) + '\t' + join_tokens(p.tgt, Tokenizer::Whitespace);
    if (fnv1a(key, seed) % 1'000'000 < threshold) {
      split.test.pairs.push_back(p);
    } else {
      split.train.pairs.push_back(p);
    }
  }
  return split;
}

}  // namespace MAT_REAL_NS
}  // namespace mat
