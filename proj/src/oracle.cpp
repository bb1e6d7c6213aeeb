#include "evop/oracle.h"

#include <cstdlib>

#include "evop/error.h"
#include "evop/parallel.h"

namespace evop {

std::size_t workers_from_env(std::size_t fallback) {
    const char* value = std::getenv("EVOP_WORKERS");
    if (!value || !*value) return fallback;
    char* end = nullptr;
    const long n = std::strtol(value, &end, 10);
    if (*end != '\0' || n < 1) return fallback;
    return static_cast<std::size_t>(n);
}

std::vector<double> FitnessOracle::evaluate_batch(std::span<const PruningPattern> patterns,
                                                  std::span<const CalibrationSample> samples,
                                                  std::size_t workers) {
    std::vector<double> out(patterns.size());
    parallel_for(patterns.size(), thread_safe() ? workers : 1,
                 [&](std::size_t i) { out[i] = evaluate(patterns[i], samples); });
    return out;
}

std::vector<std::vector<double>> FitnessOracle::embed(std::span<const std::string>) {
    throw CapabilityError("oracle " + describe() + " does not offer embeddings");
}

void check_pattern_shape(const FitnessOracle& oracle, const PruningPattern& pattern) {
    if (pattern.size() != oracle.layer_count()) {
        throw ShapeError("pattern has " + std::to_string(pattern.size()) + " bits but oracle " +
                         oracle.describe() + " has " + std::to_string(oracle.layer_count()) +
                         " layers");
    }
}

ToyOracle::ToyOracle(std::shared_ptr<const ToyLM> model, std::string label)
    : model_(std::move(model)), label_(std::move(label)) {
    if (!model_) throw ConfigError("ToyOracle needs a model");
}

double ToyOracle::evaluate(const PruningPattern& pattern,
                           std::span<const CalibrationSample> samples) {
    check_pattern_shape(*this, pattern);
    return average_loss(*model_, pattern, samples).loss;
}

double PopcountOracle::evaluate(const PruningPattern& pattern,
                                std::span<const CalibrationSample>) {
    check_pattern_shape(*this, pattern);
    return static_cast<double>(pattern.popcount()) / static_cast<double>(layers_);
}

}  // namespace evop
