#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mat/tensor.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

struct GradCheckOptions {
  Real step = 1e-3f;
  double tolerance = 1e-3;
  // Coordinates sampled per tensor (all of them if the tensor is smaller).
  std::size_t samples_per_tensor = 6;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  // The floor keeps float32 rounding noise on near-zero gradients from
  // dominating the report.
  double denominator_floor = 1e-2;
  std::uint64_t seed = 0;
  // A ReLU kink inside [x-h, x+h] makes the central difference meaningless at
  // any precision. When a coordinate fails and D(h) and D(h/2) disagree by
  // more than the tolerance, retry with h/10, up to this many times. A wrong
  // backward rule gives consistent D(h) and D(h/2), so it is not retried.
  // Only useful in the double build; float noise alone trips the test.
  int kink_refinements = 0;
};

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  double step = 0.0;  // step actually used for `numeric`
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t refined = 0;  // entries that needed a smaller step
  bool passed = false;
};

// Compares reverse-mode gradients of the scalar returned by `loss_fn` with
// central differences (f(x+h) - f(x-h)) / 2h on sampled coordinates of each
// parameter. `loss_fn` must be deterministic.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::span<const NamedTensor> params,
                           const GradCheckOptions& options = {});

}  // namespace MAT_REAL_NS
}  // namespace mat
