#include "mat/ops.hpp"

#include <cmath>
#include <vector>

#include "kernels.hpp"
#include "mat/errors.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

Shape with_last_dim(const Shape& s, std::size_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}

void accumulate(Tensor& dst, std::span<const Real> g) {
  if (!dst.requires_grad()) return;
  auto d = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2) throw DimensionError("matmul: right operand must be rank 2");
  const std::size_t m = a.rows(), p = a.cols(), q = b.cols();
  if (b.rows() != p) {
    throw DimensionError("matmul: inner dims " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  std::vector<Real> out(m * q);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, p, q);
  Tensor ca = a, cb = b;
  return make_op_result("matmul", with_last_dim(a.shape(), q), std::move(out), {a, b},
                        [ca, cb, m, p, q](std::span<const Real> g) mutable {
                          if (ca.requires_grad()) {
                            std::vector<Real> bt(q * p);
                            kernels::transpose(cb.data().data(), bt.data(), p, q);
                            kernels::gemm_acc(g.data(), bt.data(), ca.grad().data(), m, q, p);
                          }
                          if (cb.requires_grad()) {
                            kernels::gemm_tn_acc(ca.data().data(), g.data(), cb.grad().data(), m, p, q);
                          }
                        });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2) throw DimensionError("matmul_nt: right operand must be rank 2");
  const std::size_t m = a.rows(), p = a.cols(), q = b.rows();
  if (b.cols() != p) {
    throw DimensionError("matmul_nt: inner dims " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()) + "^T");
  }
  std::vector<Real> bt(p * q);
  kernels::transpose(b.data().data(), bt.data(), q, p);
  std::vector<Real> out(m * q);
  kernels::gemm(a.data().data(), bt.data(), out.data(), m, p, q);
  Tensor ca = a, cb = b;
  return make_op_result("matmul_nt", with_last_dim(a.shape(), q), std::move(out), {a, b},
                        [ca, cb, m, p, q](std::span<const Real> g) mutable {
                          if (ca.requires_grad()) {
                            kernels::gemm_acc(g.data(), cb.data().data(), ca.grad().data(), m, q, p);
                          }
                          if (cb.requires_grad()) {
                            // dB[q x p] += g^T[q x m] * A[m x p]
                            kernels::gemm_tn_acc(g.data(), ca.data().data(), cb.grad().data(), m, q, p);
                          }
                        });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor ca = a, cb = b;
  return make_op_result("add", a.shape(), std::move(out), {a, b}, [ca, cb](std::span<const Real> g) mutable {
    accumulate(ca, g);
    accumulate(cb, g);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n) throw DimensionError("add_bias: bias length " + std::to_string(bias.numel()));
  const auto xv = x.data(), bv = bias.data();
  std::vector<Real> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  Tensor cx = x, cb = bias;
  return make_op_result("add_bias", x.shape(), std::move(out), {x, bias},
                        [cx, cb, m, n](std::span<const Real> g) mutable {
                          accumulate(cx, g);
                          if (cb.requires_grad()) {
                            auto gb = cb.grad();
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                          }
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor ca = a, cb = b;
  return make_op_result("mul", a.shape(), std::move(out), {a, b}, [ca, cb](std::span<const Real> g) mutable {
    if (ca.requires_grad()) {
      auto d = ca.grad();
      const auto y = cb.data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i];
    }
    if (cb.requires_grad()) {
      auto d = cb.grad();
      const auto x = ca.data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& x, Real factor) {
  const auto v = x.data();
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor;
  Tensor cx = x;
  return make_op_result("scale", x.shape(), std::move(out), {x}, [cx, factor](std::span<const Real> g) mutable {
    auto d = cx.grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
  });
}

Tensor relu(const Tensor& x) {
  const auto v = x.data();
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0f ? v[i] : 0.0f;
  Tensor cx = x;
  return make_op_result("relu", x.shape(), std::move(out), {x}, [cx](std::span<const Real> g) mutable {
    auto d = cx.grad();
    const auto v = cx.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (v[i] > 0.0f) d[i] += g[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (Real v : x.data()) s += v;
  Tensor cx = x;
  return make_op_result("sum", {1}, {static_cast<Real>(s)}, {x}, [cx](std::span<const Real> g) mutable {
    auto d = cx.grad();
    for (auto& v : d) v += g[0];
  });
}

Tensor dropout(const Tensor& x, Real p, std::mt19937_64* rng) {
  if (p <= 0.0f || rng == nullptr) return x;
  if (p >= 1.0f) throw ConfigError("dropout probability must be < 1");
  const Real keep_scale = 1.0f / (1.0f - p);
  std::bernoulli_distribution keep(1.0 - p);
  const auto v = x.data();
  std::vector<Real> mask(v.size());
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = keep(*rng) ? keep_scale : 0.0f;
    out[i] = v[i] * mask[i];
  }
  Tensor cx = x;
  return make_op_result("dropout", x.shape(), std::move(out), {x},
                        [cx, mask = std::move(mask)](std::span<const Real> g) mutable {
                          auto d = cx.grad();
                          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
                        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  if (!(eps > 0.0f)) throw ConfigError("layer_norm eps must be > 0");
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) throw DimensionError("layer_norm: gain/bias length mismatch");
  const auto xv = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<Real> out(m * d);
  std::vector<Real> rstd(m);
  std::vector<Real> mean(m);
  for (std::size_t i = 0; i < m; ++i) {
    kernels::layer_norm_row(xv.data() + i * d, gv.data(), bv.data(), eps, d, out.data() + i * d, &mean[i], &rstd[i]);
  }
  Tensor cx = x, cg = gain, cb = bias;
  return make_op_result(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [cx, cg, cb, m, d, rstd = std::move(rstd), mean = std::move(mean)](std::span<const Real> g) mutable {
        const auto xv = cx.data(), gv = cg.data();
        std::vector<Real> xhat(d), dxhat(d);
        for (std::size_t i = 0; i < m; ++i) {
          const Real* xr = xv.data() + i * d;
          const Real* gr = g.data() + i * d;
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mean[i]) * rstd[i];
            dxhat[j] = gr[j] * gv[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += static_cast<double>(dxhat[j]) * xhat[j];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          if (cx.requires_grad()) {
            Real* dx = cx.grad().data() + i * d;
            for (std::size_t j = 0; j < d; ++j) {
              dx[j] += static_cast<Real>(rstd[i] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
            }
          }
          if (cg.requires_grad()) {
            auto dg = cg.grad();
            for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xhat[j];
          }
          if (cb.requires_grad()) {
            auto db = cb.grad();
            for (std::size_t j = 0; j < d; ++j) db[j] += gr[j];
          }
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids, Real factor) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2");
  const std::size_t vocab = table.rows(), d = table.cols(), n = ids.size();
  if (n == 0) throw DimensionError("embedding: empty id list");
  const auto tv = table.data();
  std::vector<Real> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " + std::to_string(vocab));
    }
    const Real* row = tv.data() + static_cast<std::size_t>(ids[i]) * d;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = row[j] * factor;
  }
  Tensor ct = table;
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return make_op_result("embedding", {n, d}, std::move(out), {table},
                        [ct, d, factor, saved = std::move(saved)](std::span<const Real> g) mutable {
                          auto dt = ct.grad();
                          for (std::size_t i = 0; i < saved.size(); ++i) {
                            Real* row = dt.data() + static_cast<std::size_t>(saved[i]) * d;
                            for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j] * factor;
                          }
                        });
}

Tensor softmax_masked(const Tensor& scores, const AttentionMask& mask) {
  const std::size_t n = scores.rows(), m = scores.cols();
  if (mask.rows() != n || mask.cols() != m) {
    throw DimensionError("softmax_masked: mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         " vs scores " + shape_to_string(scores.shape()));
  }
  constexpr Real kMasked = -1e9f;
  const auto sv = scores.data();
  std::vector<Real> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [lo, hi] = mask.row_range(i);
    if (lo == hi) throw ConfigError("softmax_masked: row " + std::to_string(i) + " has no allowed entries");
    Real* row = out.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) row[j] = (j >= lo && j < hi) ? sv[i * m + j] : sv[i * m + j] + kMasked;
    kernels::softmax_inplace(row, m);
    Real total = 0.0f;
    for (std::size_t j = 0; j < m; ++j) {
      if (j < lo || j >= hi) row[j] = 0.0f;
      total += row[j];
    }
    for (std::size_t j = lo; j < hi; ++j) row[j] /= total;
  }
  Tensor cs = scores;
  std::vector<Real> probs = out;
  return make_op_result("softmax_masked", scores.shape(), std::move(out), {scores},
                        [cs, n, m, probs = std::move(probs)](std::span<const Real> g) mutable {
                          auto d = cs.grad();
                          for (std::size_t i = 0; i < n; ++i) {
                            const Real* p = probs.data() + i * m;
                            const Real* gr = g.data() + i * m;
                            double dotp = 0.0;
                            for (std::size_t j = 0; j < m; ++j) dotp += static_cast<double>(p[j]) * gr[j];
                            for (std::size_t j = 0; j < m; ++j) {
                              d[i * m + j] += static_cast<Real>(p[j] * (gr[j] - dotp));
                            }
                          }
                        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, Real smoothing, TokenId pad_id) {
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: target count does not match logits rows");
  if (smoothing < 0.0f || smoothing >= 1.0f) throw ConfigError("label smoothing must be in [0, 1)");
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == pad_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw InputError("cross_entropy: target id " + std::to_string(targets[i]) + " out of range");
    }
    ++count;
  }
  if (count == 0) throw InputError("cross_entropy: every position is padding");

  const auto lv = logits.data();
  const double eps = smoothing;
  const double uniform = eps / static_cast<double>(vocab);
  std::vector<Real> grad_rows(n * vocab, 0.0f);
  double total = 0.0;
  const double inv_count = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == pad_id) continue;
    const Real* row = lv.data() + i * vocab;
    double mx = row[0];
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max<double>(mx, row[v]);
    double z = 0.0, mean_logit = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      z += std::exp(row[v] - mx);
      mean_logit += row[v];
    }
    mean_logit /= static_cast<double>(vocab);
    const double lse = mx + std::log(z);
    const auto t = static_cast<std::size_t>(targets[i]);
    total += (1.0 - eps) * (lse - row[t]) + eps * (lse - mean_logit);
    Real* gr = grad_rows.data() + i * vocab;
    for (std::size_t v = 0; v < vocab; ++v) {
      const double p = std::exp(row[v] - lse);
      const double target_mass = (v == t ? 1.0 - eps : 0.0) + uniform;
      gr[v] = static_cast<Real>((p - target_mass) * inv_count);
    }
  }
  Tensor cl = logits;
  return make_op_result("cross_entropy", {1}, {static_cast<Real>(total * inv_count)}, {logits},
                        [cl, grad_rows = std::move(grad_rows)](std::span<const Real> g) mutable {
                          auto d = cl.grad();
                          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * grad_rows[i];
                        });
}

}  // namespace MAT_REAL_NS
}  // namespace mat
