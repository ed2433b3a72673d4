#include "mat/mask.hpp"

#include <algorithm>

#include "mat/errors.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::None:
      return "none";
    case MaskKind::Causal:
      return "causal";
    case MaskKind::Banded:
      return "banded";
  }
  return "?";
}

AttentionMask::AttentionMask(MaskKind kind, std::size_t rows, std::size_t cols, std::size_t order)
    : kind_(kind), rows_(rows), cols_(cols), order_(order), key_limit_(cols) {}

AttentionMask AttentionMask::unmasked(std::size_t rows, std::size_t cols) {
  return AttentionMask(MaskKind::None, rows, cols, 0);
}

AttentionMask AttentionMask::causal(std::size_t n) { return AttentionMask(MaskKind::Causal, n, n, 0); }

AttentionMask AttentionMask::banded(std::size_t n, std::size_t k) {
  if (k == 0) throw ConfigError("banded mask order must be >= 1");
  return AttentionMask(MaskKind::Banded, n, n, k);
}

std::pair<std::size_t, std::size_t> AttentionMask::row_range(std::size_t i) const {
  std::size_t lo = 0;
  std::size_t hi = cols_;
  switch (kind_) {
    case MaskKind::None:
      break;
    case MaskKind::Causal:
      hi = i + 1;
      break;
    case MaskKind::Banded:
      hi = i + 1;
      lo = i + 1 > order_ ? i + 1 - order_ : 0;
      break;
  }
  hi = std::min(hi, key_limit_);
  lo = std::min(lo, hi);
  return {lo, hi};
}

bool AttentionMask::allows(std::size_t i, std::size_t j) const {
  const auto [lo, hi] = row_range(i);
  return j >= lo && j < hi;
}

std::size_t AttentionMask::allowed_count() const {
  std::size_t total = 0;
  for (std::size_t i = 0; i < rows_; ++i) {
    const auto [lo, hi] = row_range(i);
    total += hi - lo;
  }
  return total;
}

std::vector<std::uint8_t> AttentionMask::allow_matrix() const {
  std::vector<std::uint8_t> m(rows_ * cols_, 0);
  for (std::size_t i = 0; i < rows_; ++i) {
    const auto [lo, hi] = row_range(i);
    for (std::size_t j = lo; j < hi; ++j) m[i * cols_ + j] = 1;
  }
  return m;
}

AttentionMask AttentionMask::with_key_limit(std::size_t limit) const {
  AttentionMask m = *this;
  m.key_limit_ = std::min(limit, cols_);
  return m;
}

AttentionMask build_mask(MaskKind kind, std::size_t n, long order) {
  if (n == 0) throw ConfigError("mask length must be >= 1");
  switch (kind) {
    case MaskKind::None:
      return AttentionMask::unmasked(n, n);
    case MaskKind::Causal:
      return AttentionMask::causal(n);
    case MaskKind::Banded:
      if (order <= 0) throw ConfigError("banded mask order must be >= 1, got " + std::to_string(order));
      return AttentionMask::banded(n, static_cast<std::size_t>(order));
  }
  throw ConfigError("unknown mask kind");
}

std::size_t masked_score_count(const AttentionMask& mask) { return mask.allowed_count(); }

}  // namespace MAT_REAL_NS
}  // namespace mat
