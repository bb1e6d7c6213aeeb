#include "evop/baselines.h"

#include <algorithm>
#include <chrono>
#include <numeric>

#include "evop/error.h"
#include "evop/evaluator.h"
#include "evop/rng.h"

namespace evop {

namespace {

constexpr std::size_t kBatchSize = 256;

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point started) {
    return std::chrono::duration<double, std::milli>(Clock::now() - started).count();
}

void check_layers(const FitnessOracle& oracle, const SparsityConfig& sparsity) {
    sparsity.validate();
    if (oracle.layer_count() != sparsity.layers) {
        throw ShapeError("oracle has " + std::to_string(oracle.layer_count()) +
                         " layers, sparsity config expects " + std::to_string(sparsity.layers));
    }
}

nlohmann::json sparsity_json(const SparsityConfig& s) {
    return {{"theta", s.theta}, {"layers", s.layers}, {"pruned", s.pruned}};
}

}  // namespace

SearchReport greedy_layer_drop(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                               const SparsityConfig& sparsity, std::size_t workers) {
    const auto started = Clock::now();
    check_layers(oracle, sparsity);
    SearchReport report;
    report.method = "greedy";
    report.config = sparsity_json(sparsity);

    PruningPattern current(sparsity.layers);
    for (std::size_t step = 1; step <= sparsity.pruned; ++step) {
        std::vector<PruningPattern> candidates;
        std::vector<std::size_t> layers;
        for (std::size_t l = 0; l < sparsity.layers; ++l) {
            if (current.pruned(l)) continue;
            PruningPattern p = current;
            p.set(l, true);
            candidates.push_back(std::move(p));
            layers.push_back(l);
        }
        const auto losses = evaluate_checked(oracle, candidates, samples, workers);
        report.oracle_calls += candidates.size();
        std::size_t pick = 0;
        for (std::size_t i = 1; i < losses.size(); ++i) {
            if (losses[i] < losses[pick]) pick = i;
        }
        current = candidates[pick];
        report.trace.push_back(TraceStep{step, FitnessRecord{current, losses[pick]}, losses[pick],
                                         std::nullopt, layers[pick], report.oracle_calls});
    }
    report.best = report.trace.back().best;
    report.wall_ms = elapsed_ms(started);
    return report;
}

SearchReport exhaustive_ideal(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                              const SparsityConfig& sparsity, std::uint64_t max_evals,
                              std::size_t workers) {
    const auto started = Clock::now();
    check_layers(oracle, sparsity);
    std::uint64_t space = 0;
    try {
        space = pps_size(sparsity.layers, sparsity.pruned);
    } catch (const OverflowError&) {
        throw BudgetExceeded("pattern space C(" + std::to_string(sparsity.layers) + ", " +
                             std::to_string(sparsity.pruned) + ") overflows 64 bits");
    }
    if (space > max_evals) {
        throw BudgetExceeded("pattern space has " + std::to_string(space) +
                             " members, budget is " + std::to_string(max_evals));
    }

    SearchReport report;
    report.method = "ideal";
    report.config = sparsity_json(sparsity);
    report.config["max_evals"] = max_evals;

    // Zeros first is the lexicographically smallest mask; next_permutation
    // walks the rest in increasing order.
    std::vector<std::uint8_t> bits(sparsity.layers, 0);
    std::fill(bits.end() - static_cast<std::ptrdiff_t>(sparsity.pruned), bits.end(), 1);
    bool more = true;
    bool have_best = false;
    std::size_t batch_index = 0;
    while (more) {
        std::vector<PruningPattern> batch;
        while (more && batch.size() < kBatchSize) {
            batch.emplace_back(bits);
            more = std::next_permutation(bits.begin(), bits.end());
        }
        const auto losses = evaluate_checked(oracle, batch, samples, workers);
        report.oracle_calls += batch.size();
        std::size_t pick = 0;
        for (std::size_t i = 1; i < losses.size(); ++i) {
            if (losses[i] < losses[pick]) pick = i;
        }
        const FitnessRecord batch_best{batch[pick], losses[pick]};
        if (!have_best || batch_best.loss < report.best.loss) {
            report.best = batch_best;
            have_best = true;
        }
        report.trace.push_back(TraceStep{batch_index++, batch_best, report.best.loss, std::nullopt,
                                         std::nullopt, report.oracle_calls});
    }
    report.wall_ms = elapsed_ms(started);
    return report;
}

SearchReport random_search(FitnessOracle& oracle, std::span<const CalibrationSample> samples,
                           const SparsityConfig& sparsity, std::size_t trials, std::uint64_t seed,
                           bool deduplicate, std::size_t workers) {
    const auto started = Clock::now();
    check_layers(oracle, sparsity);
    if (trials < 1) throw ConfigError("random search needs at least one trial");

    SearchReport report;
    report.method = "random";
    report.config = sparsity_json(sparsity);
    report.config["trials"] = trials;
    report.config["deduplicate"] = deduplicate;
    report.config["seed"] = seed;
    report.seeds = {seed};

    std::vector<std::size_t> all(sparsity.layers);
    std::iota(all.begin(), all.end(), std::size_t{0});
    MemoizedEvaluator evaluator(oracle, samples, workers, deduplicate);
    bool have_best = false;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < trials; start += kBatchSize) {
        const std::size_t end = std::min(trials, start + kBatchSize);
        std::vector<PruningPattern> batch;
        for (std::size_t t = start; t < end; ++t) {
            Rng rng(derive_seed(seed, {kStreamRandomSearch, t}));
            auto pool = all;
            for (std::size_t i = 0; i < sparsity.pruned; ++i) {
                std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
            }
            pool.resize(sparsity.pruned);
            batch.push_back(PruningPattern::from_indices(sparsity.layers, pool));
        }
        const auto losses = evaluator.evaluate(batch);
        FitnessRecord batch_best{batch[0], losses[0]};
        for (std::size_t i = 1; i < batch.size(); ++i) {
            const FitnessRecord r{batch[i], losses[i]};
            if (fitter(r, batch_best)) batch_best = r;
        }
        if (!have_best || fitter(batch_best, report.best)) {
            report.best = batch_best;
            have_best = true;
        }
        report.trace.push_back(TraceStep{batch_index++, batch_best, report.best.loss, std::nullopt,
                                         std::nullopt, evaluator.oracle_calls()});
    }
    report.oracle_calls = evaluator.oracle_calls();
    report.wall_ms = elapsed_ms(started);
    return report;
}

}  // namespace evop
