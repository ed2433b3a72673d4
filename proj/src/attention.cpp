#include "mat/attention.hpp"

#include <cmath>

#include "kernels.hpp"
#include "mat/errors.hpp"
#include "mat/ops.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

struct SavedRow {
  std::size_t segment;
  std::size_t query;
  std::size_t weights_offset;
};

}  // namespace

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const AttentionSegment> segments) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) throw ConfigError("attention: d_model must be divisible by heads");
  if (k.cols() != d || v.cols() != d) throw DimensionError("attention: q/k/v widths differ");
  if (k.rows() != v.rows()) throw DimensionError("attention: key and value row counts differ");
  const std::size_t head_dim = d / heads;
  const Real scale = 1.0f / std::sqrt(static_cast<Real>(head_dim));
  const std::size_t nq = q.rows(), nk = k.rows();

  for (const auto& seg : segments) {
    if (seg.query_offset + seg.mask.rows() > nq || seg.key_offset + seg.mask.cols() > nk) {
      throw DimensionError("attention: segment exceeds tensor rows");
    }
  }

  const auto qv = q.data(), kv = k.data(), vv = v.data();
  std::vector<Real> out(nq * d, 0.0f);
  std::vector<Real> weights;
  std::vector<SavedRow> saved;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    for (std::size_t i = 0; i < seg.mask.rows(); ++i) {
      const auto [lo, hi] = seg.mask.row_range(i);
      if (lo == hi) throw ConfigError("attention: query row " + std::to_string(i) + " has no allowed keys");
      const std::size_t count = hi - lo;
      const std::size_t qrow = seg.query_offset + i;
      const std::size_t krow = seg.key_offset + lo;
      saved.push_back({s, i, weights.size()});
      weights.resize(weights.size() + heads * count);
      Real* w = weights.data() + saved.back().weights_offset;
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t col = h * head_dim;
        kernels::attend_row(qv.data() + qrow * d + col, kv.data() + krow * d + col, d, vv.data() + krow * d + col, d,
                            count, head_dim, scale, w + h * count, out.data() + qrow * d + col);
      }
    }
  }

  Tensor cq = q, ck = k, cv = v;
  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  return make_op_result(
      "attention", {nq, d}, std::move(out), {q, k, v},
      [cq, ck, cv, heads, head_dim, scale, d, segs = std::move(segs), saved = std::move(saved),
       weights = std::move(weights)](std::span<const Real> g) mutable {
        const auto qv = cq.data(), kv = ck.data(), vv = cv.data();
        Real* dq = cq.requires_grad() ? cq.grad().data() : nullptr;
        Real* dk = ck.requires_grad() ? ck.grad().data() : nullptr;
        Real* dv = cv.requires_grad() ? cv.grad().data() : nullptr;
        std::vector<Real> dscore;
        for (const auto& row : saved) {
          const auto& seg = segs[row.segment];
          const auto [lo, hi] = seg.mask.row_range(row.query);
          const std::size_t count = hi - lo;
          const std::size_t qrow = seg.query_offset + row.query;
          const std::size_t krow = seg.key_offset + lo;
          dscore.resize(count);
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t col = h * head_dim;
            const Real* p = weights.data() + row.weights_offset + h * count;
            const Real* go = g.data() + qrow * d + col;
            double weighted = 0.0;
            for (std::size_t j = 0; j < count; ++j) {
              const Real dp = kernels::dot(go, vv.data() + (krow + j) * d + col, head_dim);
              dscore[j] = dp;
              weighted += static_cast<double>(p[j]) * dp;
            }
            for (std::size_t j = 0; j < count; ++j) {
              dscore[j] = static_cast<Real>(p[j] * (dscore[j] - weighted)) * scale;
            }
            const Real* qr = qv.data() + qrow * d + col;
            for (std::size_t j = 0; j < count; ++j) {
              const std::size_t kr = (krow + j) * d + col;
              if (dq) {
                for (std::size_t e = 0; e < head_dim; ++e) dq[qrow * d + col + e] += dscore[j] * kv[kr + e];
              }
              if (dk) {
                for (std::size_t e = 0; e < head_dim; ++e) dk[kr + e] += dscore[j] * qr[e];
              }
              if (dv) {
                for (std::size_t e = 0; e < head_dim; ++e) dv[kr + e] += p[j] * go[e];
              }
            }
          }
        }
      });
}

Tensor multi_head_attention(const Tensor& queries_src, const Tensor& keys_values_src, const AttentionParams& params,
                            std::size_t heads, std::span<const AttentionSegment> segments) {
  const Tensor q = matmul(queries_src, params.w_q);
  const Tensor k = matmul(keys_values_src, params.w_k);
  const Tensor v = matmul(keys_values_src, params.w_v);
  return matmul(scaled_dot_attention(q, k, v, heads, segments), params.w_o);
}

Tensor multi_head_attention(const Tensor& queries_src, const Tensor& keys_values_src,
                            const std::optional<AttentionMask>& mask, const AttentionParams& params,
                            std::size_t heads) {
  const std::size_t n = queries_src.rows(), m = keys_values_src.rows();
  AttentionSegment seg{0, 0, mask ? *mask : AttentionMask::unmasked(n, m)};
  if (seg.mask.rows() != n || seg.mask.cols() != m) throw DimensionError("attention: mask does not match inputs");
  return multi_head_attention(queries_src, keys_values_src, params, heads, std::span(&seg, 1));
}

Tensor transparent_self_attention(const Tensor& hidden, const Tensor& static_emb, const AttentionMask& mask,
                                  const AttentionParams& params, std::size_t heads) {
  if (hidden.shape() != static_emb.shape()) {
    throw DimensionError("transparent attention: hidden " + shape_to_string(hidden.shape()) + " vs static " +
                         shape_to_string(static_emb.shape()));
  }
  return multi_head_attention(hidden, static_emb, std::optional<AttentionMask>(mask), params, heads);
}

}  // namespace MAT_REAL_NS
}  // namespace mat
