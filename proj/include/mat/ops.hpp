#pragma once

#include <random>
#include <span>

#include "mat/mask.hpp"
#include "mat/tensor.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

// All ops take rank-2 [rows x cols] views of their inputs (rank-3 tensors
// are treated as stacked rows) unless stated otherwise.

Tensor matmul(const Tensor& a, const Tensor& b);
// a[m x p] * b[q x p]^T -> [m x q]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
// x[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x);

// Inverted dropout. Identity when p == 0 or rng is null.
Tensor dropout(const Tensor& x, Real p, std::mt19937_64* rng);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps);

// Rows of table[V x d] selected by ids, multiplied by `factor`.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids, Real factor);

// Row softmax of scores[n x m] restricted to the mask's allowed entries.
// Disallowed entries get -1e9 before the softmax and are then forced to
// exactly 0 with the row renormalized.
Tensor softmax_masked(const Tensor& scores, const AttentionMask& mask);

// Mean over non-pad positions of the label-smoothed negative log-likelihood.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, Real smoothing, TokenId pad_id);

}  // namespace MAT_REAL_NS
}  // namespace mat
