#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mat/model.hpp"

namespace mat {
inline namespace MAT_REAL_NS {

struct LeakageFinding {
  std::size_t perturbed = 0;  // decoder input position j
  std::size_t affected = 0;   // logit row t with t - j >= window
  Real max_abs_diff = 0.0f;
};

struct LeakageReport {
  std::string model;
  std::size_t n = 0;
  // Rows t >= j + window must not move when input j changes; 0 = full history.
  std::size_t window = 0;
  std::size_t perturbations = 0;
  std::size_t rows_compared = 0;
  std::vector<LeakageFinding> findings;
  bool markov_holds() const { return findings.empty(); }
};

// Replaces each decoder input j >= 1 by every other vocabulary entry in turn
// and compares logits bitwise at every row outside the window.
LeakageReport perturbation_audit(const Model& model, std::span<const TokenId> src, std::span<const TokenId> tgt_in);

// Runs the audit on `trials` random source/target pairs of length n.
LeakageReport random_perturbation_audit(const Model& model, std::size_t n, std::size_t trials, std::uint64_t seed);

}  // namespace MAT_REAL_NS
}  // namespace mat
