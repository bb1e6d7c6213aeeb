#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "evop/core.h"
#include "evop/oracle.h"

namespace evop {

/// Batch front-end to an oracle that skips repeated masks. Duplicates within
/// a batch and masks seen earlier in the same search are answered from the
/// memo; only distinct unseen masks reach the oracle, in first-seen order.
class MemoizedEvaluator {
public:
    MemoizedEvaluator(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                      std::size_t workers = 1, bool memoize = true);

    /// Losses in input order. Oracle failures surface as OracleError naming
    /// the pattern being evaluated.
    std::vector<double> evaluate(std::span<const PruningPattern> patterns);

    std::size_t oracle_calls() const { return oracle_calls_; }
    FitnessOracle& oracle() { return oracle_; }

private:
    FitnessOracle& oracle_;
    std::span<const CalibrationSample> samples_;
    std::size_t workers_;
    bool memoize_;
    std::map<PruningPattern, double> memo_;
    std::size_t oracle_calls_ = 0;
};

/// Evaluates a batch directly on the oracle (no memo), attaching the pattern
/// to non-oracle failures.
std::vector<double> evaluate_checked(FitnessOracle& oracle, std::span<const PruningPattern> patterns,
                                     std::span<const CalibrationSample> samples, std::size_t workers);

}  // namespace evop
