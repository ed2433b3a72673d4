#pragma once

// Row-stable numeric kernels. Every output row is computed from its own input
// row with a loop order that does not depend on how many rows are processed
// together, so a single-row call reproduces the matching row of a batched
// call bit for bit. The incremental decoder relies on this.

#include <cmath>
#include <cstddef>

#include "mat/real.hpp"

namespace mat::inline MAT_REAL_NS::kernels {

// c[m x q] = a[m x p] * b[p x q]
inline void gemm(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * q;
    for (std::size_t j = 0; j < q; ++j) crow[j] = 0.0f;
    const Real* arow = a + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const Real av = arow[k];
      const Real* brow = b + k * q;
      for (std::size_t j = 0; j < q; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x q] += a[m x p] * b[p x q]
inline void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * q;
    const Real* arow = a + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const Real av = arow[k];
      const Real* brow = b + k * q;
      for (std::size_t j = 0; j < q; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[p x q] += a[m x p]^T * b[m x q]
inline void gemm_tn_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * p;
    const Real* brow = b + i * q;
    for (std::size_t k = 0; k < p; ++k) {
      const Real av = arow[k];
      if (av == 0.0f) continue;
      Real* crow = c + k * q;
      for (std::size_t j = 0; j < q; ++j) crow[j] += av * brow[j];
    }
  }
}

// dst[q x p] = src[p x q]^T
inline void transpose(const Real* src, Real* dst, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) dst[j * p + i] = src[i * q + j];
}

inline Real dot(const Real* a, const Real* b, std::size_t n) {
  Real s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// In-place softmax over v[0..n).
inline void softmax_inplace(Real* v, std::size_t n) {
  Real mx = v[0];
  for (std::size_t i = 1; i < n; ++i) mx = v[i] > mx ? v[i] : mx;
  Real sum = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - mx);
    sum += v[i];
  }
  const Real inv = 1.0f / sum;
  for (std::size_t i = 0; i < n; ++i) v[i] *= inv;
}

// One query row of one head against `count` consecutive key/value rows.
// weights[count] receives the attention distribution, out[head_dim] the
// weighted value sum. Keys outside the given range are never touched, which
// is what makes disallowed positions contribute exactly zero.
inline void attend_row(const Real* q, const Real* keys, std::size_t key_stride, const Real* values,
                       std::size_t value_stride, std::size_t count, std::size_t head_dim, Real scale,
                       Real* weights, Real* out) {
  for (std::size_t j = 0; j < count; ++j) weights[j] = dot(q, keys + j * key_stride, head_dim) * scale;
  softmax_inplace(weights, count);
  for (std::size_t e = 0; e < head_dim; ++e) out[e] = 0.0f;
  for (std::size_t j = 0; j < count; ++j) {
    const Real w = weights[j];
    const Real* vrow = values + j * value_stride;
    for (std::size_t e = 0; e < head_dim; ++e) out[e] += w * vrow[e];
  }
}

// Per-row layer normalization. mean/rstd receive the statistics if non-null.
inline void layer_norm_row(const Real* x, const Real* gain, const Real* bias, Real eps, std::size_t d, Real* y,
                           Real* mean_out, Real* rstd_out) {
  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const Real m = static_cast<Real>(mean);
  const Real rstd = static_cast<Real>(1.0 / std::sqrt(var + eps));
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - m) * rstd * gain[i] + bias[i];
  if (mean_out) *mean_out = m;
  if (rstd_out) *rstd_out = rstd;
}

}  // namespace mat::kernels
