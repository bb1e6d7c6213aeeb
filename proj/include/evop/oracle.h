#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evop/core.h"
#include "evop/toy_lm.h"

namespace evop {

/// Opaque evaluator of pruned-model quality: maps (pattern, samples) to the
/// mean per-token negative log-likelihood (natural log). evaluate() must be a
/// pure function of its arguments for the lifetime of the oracle.
class FitnessOracle {
public:
    virtual ~FitnessOracle() = default;

    virtual std::size_t layer_count() const = 0;
    virtual std::string describe() const = 0;

    virtual double evaluate(const PruningPattern& pattern,
                            std::span<const CalibrationSample> samples) = 0;

    /// Evaluates several patterns; result i belongs to patterns[i]. The
    /// default runs evaluate() on a worker pool, so it is only valid for
    /// oracles whose evaluate() is thread-safe (see thread_safe()).
    virtual std::vector<double> evaluate_batch(std::span<const PruningPattern> patterns,
                                               std::span<const CalibrationSample> samples,
                                               std::size_t workers);

    virtual bool thread_safe() const { return false; }

    virtual bool can_embed() const { return false; }
    /// Throws CapabilityError unless can_embed().
    virtual std::vector<std::vector<double>> embed(std::span<const std::string> texts);
};

/// In-process oracle over a shared, immutable ToyLM.
class ToyOracle : public FitnessOracle {
public:
    explicit ToyOracle(std::shared_ptr<const ToyLM> model, std::string label = "toy");

    std::size_t layer_count() const override { return model_->layer_count(); }
    std::string describe() const override { return label_; }
    double evaluate(const PruningPattern& pattern,
                    std::span<const CalibrationSample> samples) override;
    bool thread_safe() const override { return true; }

    const ToyLM& model() const { return *model_; }

private:
    std::shared_ptr<const ToyLM> model_;
    std::string label_;
};

/// Reference stub: loss = popcount(pattern) / m, samples ignored.
class PopcountOracle : public FitnessOracle {
public:
    explicit PopcountOracle(std::size_t layers) : layers_(layers) {}

    std::size_t layer_count() const override { return layers_; }
    std::string describe() const override { return "popcount/" + std::to_string(layers_); }
    double evaluate(const PruningPattern& pattern,
                    std::span<const CalibrationSample> samples) override;
    bool thread_safe() const override { return true; }

private:
    std::size_t layers_;
};

/// Checks pattern length against the oracle; throws ShapeError.
void check_pattern_shape(const FitnessOracle& oracle, const PruningPattern& pattern);

}  // namespace evop
