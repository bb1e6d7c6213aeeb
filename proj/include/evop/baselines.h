#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "evop/core.h"
#include "evop/oracle.h"
#include "evop/report.h"

namespace evop {

inline constexpr std::uint64_t kDefaultMaxEvals = 200'000;

/// Greedy layer dropping: k rounds, each trying every still-retained layer
/// and committing the one whose removal gives the lowest loss (ties go to
/// the lowest layer index). Makes m + (m-1) + ... + (m-k+1) oracle calls.
SearchReport greedy_layer_drop(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                               const SparsityConfig& sparsity, std::size_t workers = 1);

/// Evaluates every k-subset in lexicographic mask order and returns the
/// global minimum (ties to the lexicographically smallest mask). Throws
/// BudgetExceeded if C(m, k) > max_evals.
SearchReport exhaustive_ideal(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                              const SparsityConfig& sparsity,
                              std::uint64_t max_evals = kDefaultMaxEvals, std::size_t workers = 1);

/// Best of `trials` uniformly random valid patterns. With `deduplicate`, a
/// mask drawn twice is only sent to the oracle once.
SearchReport random_search(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                           const SparsityConfig& sparsity, std::size_t trials, std::uint64_t seed,
                           bool deduplicate = true, std::size_t workers = 1);

}  // namespace evop
