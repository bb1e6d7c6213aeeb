#include "evop/evaluator.h"

#include "evop/error.h"

namespace evop {

std::vector<double> evaluate_checked(FitnessOracle& oracle, std::span<const PruningPattern> patterns,
                                     std::span<const CalibrationSample> samples, std::size_t workers) {
    if (samples.empty()) throw DatasetError("no calibration samples to evaluate on");
    for (const auto& p : patterns) check_pattern_shape(oracle, p);
    if (patterns.size() == 1) {
        try {
            return {oracle.evaluate(patterns.front(), samples)};
        } catch (const OracleError&) {
            throw;
        } catch (const std::exception& e) {
            throw OracleError("pattern " + patterns.front().to_string() + ": " + e.what());
        }
    }
    try {
        return oracle.evaluate_batch(patterns, samples, workers);
    } catch (const OracleError&) {
        throw;
    } catch (const std::exception& e) {
        // Retry one at a time to name the failing pattern.
        for (const auto& p : patterns) {
            try {
                oracle.evaluate(p, samples);
            } catch (const std::exception& inner) {
                throw OracleError("pattern " + p.to_string() + ": " + inner.what());
            }
        }
        throw OracleError(std::string("batch evaluation failed: ") + e.what());
    }
}

MemoizedEvaluator::MemoizedEvaluator(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                                     std::size_t workers, bool memoize)
    : oracle_(oracle), samples_(samples), workers_(workers), memoize_(memoize) {}

std::vector<double> MemoizedEvaluator::evaluate(std::span<const PruningPattern> patterns) {
    if (!memoize_) {
        auto out = evaluate_checked(oracle_, patterns, samples_, workers_);
        oracle_calls_ += patterns.size();
        return out;
    }
    std::vector<PruningPattern> pending;
    std::map<PruningPattern, std::size_t> pending_index;
    for (const auto& p : patterns) {
        if (memo_.count(p) || pending_index.count(p)) continue;
        pending_index.emplace(p, pending.size());
        pending.push_back(p);
    }
    if (!pending.empty()) {
        const auto losses = evaluate_checked(oracle_, pending, samples_, workers_);
        oracle_calls_ += pending.size();
        for (std::size_t i = 0; i < pending.size(); ++i) memo_.emplace(pending[i], losses[i]);
    }
    std::vector<double> out;
    out.reserve(patterns.size());
    for (const auto& p : patterns) out.push_back(memo_.at(p));
    return out;
}

}  // namespace evop
