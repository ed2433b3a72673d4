#include "mat/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mat/errors.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::span<const NamedTensor> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0f)) throw ConfigError("grad_check step must be > 0");
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (!t.requires_grad()) throw ConfigError("grad_check: parameter '" + p.name + "' does not require grad");
    t.zero_grad();
  }
  backward(loss_fn());

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(std::min(coords.size(), options.samples_per_tensor));

    auto data = t.data();
    auto central = [&](std::size_t idx, Real h) {
      const Real original = data[idx];
      const Real plus = original + h;
      const Real minus = original - h;
      double f_plus = 0.0, f_minus = 0.0;
      {
        NoGradGuard guard;
        data[idx] = plus;
        f_plus = loss_fn().item();
        data[idx] = minus;
        f_minus = loss_fn().item();
      }
      data[idx] = original;
      return (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
    };
    for (std::size_t idx : coords) {
      const double a = analytic[idx];
      auto rel = [&](double x, double y) {
        return std::abs(x - y) / std::max({std::abs(x), std::abs(y), options.denominator_floor});
      };
      Real h = options.step;
      double numeric = central(idx, h);
      for (int r = 0; r < options.kink_refinements && rel(a, numeric) > options.tolerance; ++r) {
        if (rel(numeric, central(idx, h / 2)) <= options.tolerance) break;
        h /= 10;
        numeric = central(idx, h);
      }
      if (h != options.step) ++report.refined;
      GradCheckEntry e{p.name, idx, a, numeric, rel(a, numeric), static_cast<double>(h)};
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      report.entries.push_back(std::move(e));
    }
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace MAT_REAL_NS
}  // namespace mat
