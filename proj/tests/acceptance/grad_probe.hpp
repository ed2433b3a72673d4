#pragma once

#include <cstddef>
#include <string>

// The gradient criterion is computed in both precisions. The double copy of
// the core lives in a different inline namespace, so this interface only
// uses standard types.
namespace acceptance {

struct GradProbe {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::size_t refined = 0;
  bool passed = false;
};

struct GradProbeSetup {
  std::string variant;  // "AT", "TAT" or "MAT"
  int order = 2;
  double step = 1e-3;
  double tolerance = 1e-3;
  int kink_refinements = 0;
};

GradProbe grad_probe_f32(const GradProbeSetup& setup);
GradProbe grad_probe_f64(const GradProbeSetup& setup);

}  // namespace acceptance
