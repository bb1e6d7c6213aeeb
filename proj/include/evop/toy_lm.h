#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "evop/core.h"
#include "evop/tokenizer.h"

namespace evop {

struct ToyLMConfig {
    int vocab_size = kByteVocabSize;
    int d_model = 32;
    int n_heads = 4;
    int n_layers = 12;
    int d_ff = 128;
    int max_seq_len = 2048;
    std::uint64_t weight_seed = 0;

    /// Throws ConfigError on impossible dimension combinations.
    void validate() const;

    friend bool operator==(const ToyLMConfig&, const ToyLMConfig&) = default;
};

/// Parameters of one pre-norm decoder block. Matrices are row-major
/// [out][in]: y[o] = sum_i w[o * in + i] * x[i] + b[o].
struct BlockWeights {
    std::vector<float> ln1_gain, ln1_bias;
    std::vector<float> wq, bq, wk, bk, wv, bv;
    std::vector<float> wo, bo;
    std::vector<float> ln2_gain, ln2_bias;
    std::vector<float> w_up, b_up;      // [d_ff][d_model]
    std::vector<float> w_down, b_down;  // [d_model][d_ff]
};

struct ToyLMWeights {
    std::vector<float> token_embedding;  // [vocab][d_model]
    std::vector<BlockWeights> blocks;
    std::vector<float> final_ln_gain, final_ln_bias;
    std::vector<float> output_projection;  // [vocab][d_model], no bias
};

/// Tensors of a model in their fixed serialization (and initialization) order.
std::vector<const std::vector<float>*> weight_tensors(const ToyLMWeights& weights);
std::vector<std::vector<float>*> weight_tensors(ToyLMWeights& weights);

/// Double-precision, transposed copies of a block's matrices used by the forward pass.
struct PackedBlock {
    std::vector<double> wq, wk, wv, wo, w_up, w_down;
};

struct CalibrationSample {
    std::vector<Token> token_ids;

    friend bool operator==(const CalibrationSample&, const CalibrationSample&) = default;
};

/// Small decoder-only transformer with random (untrained) weights.
///
/// Pre-norm blocks (LN -> causal multi-head attention -> residual; LN -> GELU
/// FFN -> residual), sinusoidal positions, a final LN and an untied output
/// projection. A pruned block is skipped outright, so it acts as the identity
/// on the residual stream. Immutable after construction; concurrent forward
/// passes are safe because every pass allocates its own scratch.
class ToyLM {
public:
    /// Weights drawn from weight_seed; equal configs give bit-identical models.
    static ToyLM init(const ToyLMConfig& config);
    static ToyLM from_weights(const ToyLMConfig& config, ToyLMWeights weights);

    const ToyLMConfig& config() const { return config_; }
    const ToyLMWeights& weights() const { return weights_; }
    std::size_t layer_count() const { return static_cast<std::size_t>(config_.n_layers); }

    /// Mean next-token NLL (natural log) over positions 1..len-1.
    double forward_nll(const PruningPattern& pattern, std::span<const Token> tokens) const;

private:
    ToyLM(ToyLMConfig config, ToyLMWeights weights);

    ToyLMConfig config_;
    ToyLMWeights weights_;
    std::vector<PackedBlock> packed_;
    std::vector<double> packed_output_;
};

/// Sinusoidal position encoding for position `pos`, channel `channel`.
double position_encoding(int pos, int channel, int d_model);

double forward_nll(const ToyLM& model, const PruningPattern& pattern,
                   const CalibrationSample& sample);

/// Mean of forward_nll over `samples`. Per-sample losses are sorted before
/// summation, so the result is exactly invariant to sample order.
FitnessRecord average_loss(const ToyLM& model, const PruningPattern& pattern,
                           std::span<const CalibrationSample> samples, std::size_t workers = 1);

// Checkpoint: one JSON header line, then little-endian float32 tensors in
// weight_tensors() order. See docs/formats.md.
void save_checkpoint(const ToyLM& model, const std::filesystem::path& path);
ToyLM load_checkpoint(const std::filesystem::path& path);

}  // namespace evop
