#include "evop/epps.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "evop/error.h"

namespace evop {

namespace {

constexpr double kConvergenceTolerance = 1e-12;

// Chooses `count` distinct entries of `pool` uniformly (partial Fisher-Yates).
std::vector<std::size_t> choose_distinct(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    return pool;
}

double mean_of(const std::vector<FitnessRecord>& records) {
    double sum = 0.0;
    for (const auto& r : records) sum += r.loss;
    return sum / static_cast<double>(records.size());
}

FitnessRecord best_of(const std::vector<FitnessRecord>& records) {
    return *std::min_element(records.begin(), records.end(), fitter);
}

}  // namespace

void GAConfig::validate() const {
    if (population < 2) throw ConfigError("population size must be at least 2");
    if (!(selection_fraction > 0.0 && selection_fraction <= 1.0)) {
        throw ConfigError("selection fraction must lie in (0, 1]");
    }
    if (mutation_rate && !(*mutation_rate >= 0.0 && *mutation_rate <= 1.0)) {
        throw ConfigError("mutation rate must lie in [0, 1]");
    }
    if (elitism > population) throw ConfigError("elitism cannot exceed the population size");
}

double GAConfig::mutation_rate_for(std::size_t layers) const {
    return mutation_rate ? *mutation_rate : 1.0 / static_cast<double>(layers);
}

nlohmann::json GAConfig::to_json(std::size_t layers) const {
    return {{"generations", generations},
            {"population", population},
            {"mutation_rate", mutation_rate_for(layers)},
            {"selection_fraction", selection_fraction},
            {"elitism", elitism},
            {"patience", patience},
            {"seed", seed}};
}

Population init_population(std::size_t size, std::size_t layers, std::size_t pruned,
                           std::uint64_t seed) {
    if (pruned > layers) throw ConfigError("cannot prune more layers than the model has");
    std::vector<std::size_t> all(layers);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Population pop;
    pop.members.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        Rng rng(derive_seed(seed, {kStreamInit, i}));
        pop.members.push_back(PruningPattern::from_indices(layers, choose_distinct(all, pruned, rng)));
    }
    return pop;
}

std::vector<FitnessRecord> evaluate_population(const Population& population,
                                               MemoizedEvaluator& evaluator) {
    const auto losses = evaluator.evaluate(population.members);
    std::vector<FitnessRecord> records;
    records.reserve(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i) {
        records.push_back(FitnessRecord{population.members[i], losses[i]});
    }
    return records;
}

std::vector<FitnessRecord> evaluate_population(const Population& population, FitnessOracle& oracle,
                                               std::span<const CalibrationSample> samples,
                                               std::size_t workers) {
    MemoizedEvaluator evaluator(oracle, samples, workers);
    return evaluate_population(population, evaluator);
}

std::vector<PruningPattern> select_top(std::span<const FitnessRecord> records, double fraction) {
    if (records.empty()) return {};
    std::vector<FitnessRecord> sorted(records.begin(), records.end());
    std::stable_sort(sorted.begin(), sorted.end(), fitter);
    // The epsilon keeps 0.3 * 10 = 3.0000000000000004 at 3.
    auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sorted.size()) - 1e-9));
    count = std::clamp<std::size_t>(count, std::min<std::size_t>(2, sorted.size()), sorted.size());
    std::vector<PruningPattern> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(sorted[i].pattern);
    return out;
}

PruningPattern crossover(const PruningPattern& a, const PruningPattern& b, Rng& rng) {
    if (a.size() != b.size()) throw ShapeError("crossover parents differ in length");
    PruningPattern child(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        // One draw per bit even where the parents agree keeps streams aligned.
        const bool from_a = (rng.next() >> 63) != 0;
        child.set(i, from_a ? a.pruned(i) : b.pruned(i));
    }
    return child;
}

PruningPattern mutate(const PruningPattern& pattern, double rate, Rng& rng) {
    PruningPattern out = pattern;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (rng.bernoulli(rate)) out.flip(i);
    }
    return out;
}

PruningPattern repair_sparsity(const PruningPattern& pattern, std::size_t pruned, Rng& rng) {
    if (pruned > pattern.size()) throw ConfigError("repair target exceeds pattern length");
    const std::size_t ones = pattern.popcount();
    if (ones == pruned) return pattern;
    const bool too_many = ones > pruned;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < pattern.size(); ++i) {
        if (pattern.pruned(i) == too_many) candidates.push_back(i);
    }
    const std::size_t flips = too_many ? ones - pruned : pruned - ones;
    PruningPattern out = pattern;
    for (auto i : choose_distinct(std::move(candidates), flips, rng)) out.flip(i);
    return out;
}

SearchReport epps_search(const GAConfig& ga, const SparsityConfig& sparsity, FitnessOracle& oracle,
                         std::span<const CalibrationSample> samples) {
    const auto started = std::chrono::steady_clock::now();
    ga.validate();
    sparsity.validate();
    if (oracle.layer_count() != sparsity.layers) {
        throw ShapeError("oracle has " + std::to_string(oracle.layer_count()) +
                         " layers, sparsity config expects " + std::to_string(sparsity.layers));
    }
    const std::size_t m = sparsity.layers;
    const std::size_t k = sparsity.pruned;
    const double mu = ga.mutation_rate_for(m);

    SearchReport report;
    report.method = "epps";
    report.config = ga.to_json(m);
    report.config["theta"] = sparsity.theta;
    report.config["layers"] = m;
    report.config["pruned"] = k;
    report.seeds = {ga.seed};

    MemoizedEvaluator evaluator(oracle, samples, ga.workers);
    Population pop = init_population(ga.population, m, k, ga.seed);
    auto records = evaluate_population(pop, evaluator);
    FitnessRecord best_ever = best_of(records);
    auto record_step = [&](std::size_t generation) {
        report.trace.push_back(TraceStep{generation, best_of(records), best_ever.loss, mean_of(records),
                                         std::nullopt, evaluator.oracle_calls()});
    };
    record_step(0);

    std::size_t stalled = 0;
    for (std::size_t g = 1; g <= ga.generations; ++g) {
        std::vector<FitnessRecord> ranked = records;
        std::stable_sort(ranked.begin(), ranked.end(), fitter);
        const auto parents = select_top(records, ga.selection_fraction);

        Population next;
        next.generation = g;
        next.members.reserve(ga.population);
        for (std::size_t e = 0; e < ga.elitism; ++e) next.members.push_back(ranked[e].pattern);
        for (std::size_t o = 0; next.members.size() < ga.population; ++o) {
            Rng rng(derive_seed(ga.seed, {kStreamOffspring, g, o}));
            const auto& a = parents[rng.below(parents.size())];
            const auto& b = parents[rng.below(parents.size())];
            next.members.push_back(repair_sparsity(mutate(crossover(a, b, rng), mu, rng), k, rng));
        }
        pop = std::move(next);
        records = evaluate_population(pop, evaluator);

        const double previous = best_ever.loss;
        const FitnessRecord generation_best = best_of(records);
        if (fitter(generation_best, best_ever)) best_ever = generation_best;
        record_step(g);

        if (ga.patience > 0) {
            stalled = std::abs(previous - best_ever.loss) <= kConvergenceTolerance ? stalled + 1 : 0;
            if (stalled >= ga.patience) break;
        }
    }

    report.best = best_ever;
    report.oracle_calls = evaluator.oracle_calls();
    report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    return report;
}

}  // namespace evop
