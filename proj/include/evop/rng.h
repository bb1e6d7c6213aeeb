#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace evop {

/// SplitMix64 step: advances `state` and returns the mixed output.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derives an independent stream seed from a base seed and a path of tags,
/// e.g. derive_seed(seed, {kStreamOffspring, generation, index}). The result
/// depends only on the arguments, so tasks can be scheduled in any order.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path);

// Stream tags, kept distinct so unrelated streams never share a seed.
inline constexpr std::uint64_t kStreamInit = 0x494e4954;
inline constexpr std::uint64_t kStreamOffspring = 0x4f465350;
inline constexpr std::uint64_t kStreamRandomSearch = 0x524e4453;
inline constexpr std::uint64_t kStreamWeights = 0x57474854;
inline constexpr std::uint64_t kStreamSampling = 0x53414d50;
inline constexpr std::uint64_t kStreamKMeans = 0x4b4d4e53;

/// Seeded generator with platform-independent derived draws. Only the raw
/// engine output of std::mt19937_64 is used; the std distributions are
/// implementation-defined and would break cross-platform reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n);

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform();

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller.
    double normal();

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace evop
