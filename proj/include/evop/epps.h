#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "evop/core.h"
#include "evop/evaluator.h"
#include "evop/oracle.h"
#include "evop/report.h"
#include "evop/rng.h"

namespace evop {

struct GAConfig {
    std::size_t generations = 100;
    std::size_t population = 64;
    /// Per-bit flip probability; 1/m when unset.
    std::optional<double> mutation_rate;
    double selection_fraction = 0.30;
    std::size_t elitism = 1;
    /// Stop after this many consecutive generations without improvement of
    /// the best-ever loss (beyond 1e-12). 0 disables.
    std::size_t patience = 0;
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    void validate() const;
    double mutation_rate_for(std::size_t layers) const;
    nlohmann::json to_json(std::size_t layers) const;
};

struct Population {
    std::vector<PruningPattern> members;
    std::size_t generation = 0;
};

/// S independent uniformly random k-subsets of m layers; member i uses
/// stream derive_seed(seed, {kStreamInit, i}).
Population init_population(std::size_t size, std::size_t layers, std::size_t pruned,
                           std::uint64_t seed);

std::vector<FitnessRecord> evaluate_population(const Population& population,
                                               MemoizedEvaluator& evaluator);
std::vector<FitnessRecord> evaluate_population(const Population& population, FitnessOracle& oracle,
                                               std::span<const CalibrationSample> samples,
                                               std::size_t workers = 1);

/// ceil(fraction * S) lowest-loss patterns (at least 2, at most S), ties
/// broken by lexicographic mask order.
std::vector<PruningPattern> select_top(std::span<const FitnessRecord> records, double fraction);

/// Uniform crossover: each bit comes from either parent with probability 1/2.
PruningPattern crossover(const PruningPattern& a, const PruningPattern& b, Rng& rng);

/// Flips each bit independently with probability `rate`.
PruningPattern mutate(const PruningPattern& pattern, double rate, Rng& rng);

/// Flips uniformly chosen surplus 1-bits (or missing 0-bits) until exactly
/// `pruned` bits are set. Bits on the correct side are never touched.
PruningPattern repair_sparsity(const PruningPattern& pattern, std::size_t pruned, Rng& rng);

/// Evolutionary search for the lowest-loss k-of-m pattern.
///
/// Generation 0 is the initial population. Each following generation keeps
/// the `elitism` best patterns and fills the rest with offspring: two parents
/// drawn uniformly (with replacement) from the selected pool, crossed over,
/// mutated and repaired. Offspring o of generation g draws from stream
/// derive_seed(seed, {kStreamOffspring, g, o}), and fitness is memoized by
/// mask, so the report does not depend on evaluation parallelism.
SearchReport epps_search(const GAConfig& ga, const SparsityConfig& sparsity, FitnessOracle& oracle,
                         std::span<const CalibrationSample> samples);

}  // namespace evop
