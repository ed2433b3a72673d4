#pragma once

#include "mat/real.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mat {
inline namespace MAT_REAL_NS {

enum class MaskKind { None, Causal, Banded };

std::string to_string(MaskKind kind);

// Which key positions each query may attend to. Every kind allows a
// contiguous key range per query row:
//   none      [0, key_limit)
//   causal    [0, i]
//   banded(k) [max(0, i-k+1), i]     (k positions including self)
// clipped to key_limit, which models right-padding of the key sequence.
class AttentionMask {
 public:
  AttentionMask() = default;

  MaskKind kind() const noexcept { return kind_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t order() const noexcept { return order_; }
  std::size_t key_limit() const noexcept { return key_limit_; }

  // Half-open allowed key range [first, second) for query row i.
  std::pair<std::size_t, std::size_t> row_range(std::size_t i) const;
  bool allows(std::size_t i, std::size_t j) const;
  std::size_t allowed_count() const;
  // Row-major rows() x cols() matrix of 0/1.
  std::vector<std::uint8_t> allow_matrix() const;

  AttentionMask with_key_limit(std::size_t limit) const;

  static AttentionMask unmasked(std::size_t rows, std::size_t cols);
  static AttentionMask causal(std::size_t n);
  static AttentionMask banded(std::size_t n, std::size_t k);

 private:
  AttentionMask(MaskKind kind, std::size_t rows, std::size_t cols, std::size_t order);

  MaskKind kind_ = MaskKind::None;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t order_ = 0;
  std::size_t key_limit_ = 0;
};

// Square n x n mask. `order` is only read for banded masks and must be >= 1.
AttentionMask build_mask(MaskKind kind, std::size_t n, long order = 0);

// Number of (query, key) pairs the mask allows; the score count of one
// attention head over the sequence.
std::size_t masked_score_count(const AttentionMask& mask);

}  // namespace MAT_REAL_NS
}  // namespace mat
