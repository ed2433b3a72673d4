#include "mat/audit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mat/errors.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

LeakageReport perturbation_audit(const Model& model, std::span<const TokenId> src, std::span<const TokenId> tgt_in) {
  const auto& cfg = model.config();
  if (tgt_in.empty() || tgt_in[0] != kBosId) throw InputError("audit: decoder input must start with BOS");
  NoGradGuard no_grad;
  LeakageReport report;
  report.model = cfg.describe();
  report.n = tgt_in.size();
  report.window = cfg.variant == Variant::MAT ? static_cast<std::size_t>(cfg.order) : 0;
  if (report.window == 0) return report;  // full history: nothing is out of reach

  const Tensor memory = encode(model, src);
  const Tensor base = decode_forward(model, memory, tgt_in);
  const std::size_t vocab = base.cols(), n = tgt_in.size();
  std::vector<TokenId> ids(tgt_in.begin(), tgt_in.end());
  for (std::size_t j = 1; j < n; ++j) {
    if (j + report.window >= n) break;  // no row outside the window
    std::vector<Real> row_diff(n, 0.0f);
    for (TokenId alt = 0; alt < static_cast<TokenId>(vocab); ++alt) {
      if (alt == tgt_in[j]) continue;
      ids[j] = alt;
      const Tensor out = decode_forward(model, memory, ids);
      ++report.perturbations;
      const auto a = base.data(), b = out.data();
      for (std::size_t t = j + report.window; t < n; ++t) {
        ++report.rows_compared;
        Real diff = 0.0f;
        bool changed = false;
        for (std::size_t v = 0; v < vocab; ++v) {
          const Real x = a[t * vocab + v], y = b[t * vocab + v];
          if (x != y) changed = true;
          diff = std::max(diff, std::fabs(x - y));
        }
        if (changed) row_diff[t] = std::max(row_diff[t], std::max(diff, std::numeric_limits<Real>::min()));
      }
    }
    ids[j] = tgt_in[j];
    for (std::size_t t = j + report.window; t < n; ++t) {
      if (row_diff[t] > 0.0f) report.findings.push_back({j, t, row_diff[t]});
    }
  }
  return report;
}

LeakageReport random_perturbation_audit(const Model& model, std::size_t n, std::size_t trials, std::uint64_t seed) {
  const auto& cfg = model.config();
  if (n < 2 || n > static_cast<std::size_t>(cfg.max_len)) throw ConfigError("audit: n must be in [2, max_len]");
  if (trials == 0) throw ConfigError("audit: trials must be >= 1");
  std::mt19937_64 rng(seed);
  const int src_vocab = cfg.shared_vocab ? cfg.tgt_vocab : cfg.src_vocab;
  std::uniform_int_distribution<TokenId> src_tok(4, src_vocab - 1), tgt_tok(4, cfg.tgt_vocab - 1);
  LeakageReport total;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::vector<TokenId> src(std::min<std::size_t>(n, static_cast<std::size_t>(cfg.max_len)));
    for (auto& t : src) t = src_tok(rng);
    std::vector<TokenId> tgt{kBosId};
    while (tgt.size() < n) tgt.push_back(tgt_tok(rng));
    auto r = perturbation_audit(model, src, tgt);
    total.model = r.model;
    total.n = r.n;
    total.window = r.window;
    total.perturbations += r.perturbations;
    total.rows_compared += r.rows_compared;
    total.findings.insert(total.findings.end(), r.findings.begin(), r.findings.end());
  }
  return total;
}

}  // namespace MAT_REAL_NS
}  // namespace mat
