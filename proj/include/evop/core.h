#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace evop {

/// Binary mask over the prunable layers of a model. Bit i set means layer i
/// is pruned (skipped); clear means it is retained.
class PruningPattern {
public:
    PruningPattern() = default;
    explicit PruningPattern(std::size_t layers) : bits_(layers, 0) {}
    explicit PruningPattern(std::vector<std::uint8_t> bits);

    /// Parses "0110..." (characters other than '0'/'1' are rejected).
    static PruningPattern from_string(std::string_view bits);
    static PruningPattern from_indices(std::size_t layers, const std::vector<std::size_t>& pruned);

    std::size_t size() const { return bits_.size(); }
    std::size_t popcount() const;
    bool pruned(std::size_t layer) const { return bits_[layer] != 0; }
    void set(std::size_t layer, bool pruned) { bits_[layer] = pruned ? 1 : 0; }
    void flip(std::size_t layer) { bits_[layer] ^= 1; }

    std::vector<std::size_t> pruned_layers() const;
    const std::vector<std::uint8_t>& bits() const { return bits_; }
    std::string to_string() const;

    // Lexicographic over bits with layer 0 most significant.
    friend auto operator<=>(const PruningPattern&, const PruningPattern&) = default;
    friend bool operator==(const PruningPattern&, const PruningPattern&) = default;

private:
    std::vector<std::uint8_t> bits_;
};

struct PruningPatternHash {
    std::size_t operator()(const PruningPattern& p) const;
};

/// Number of ways to pick k pruned layers out of m. Throws OverflowError when
/// the result does not fit in 64 bits.
std::uint64_t pps_size(std::uint64_t m, std::uint64_t k);

/// k = round_half_up(theta * m). Throws DegenerateSparsity unless 1 <= k <= m-1.
std::size_t derive_k(double theta, std::size_t m);

/// Fraction of layers to prune and the pruned-layer count it implies.
struct SparsityConfig {
    double theta = 0.0;
    std::size_t layers = 0;
    std::size_t pruned = 0;

    static SparsityConfig from_theta(double theta, std::size_t layers);
    /// Direct pruned-layer count; theta is recorded as k/m.
    static SparsityConfig from_count(std::size_t pruned, std::size_t layers);

    void validate() const;
};

/// A pattern and its mean per-token negative log-likelihood.
struct FitnessRecord {
    PruningPattern pattern;
    double loss = 0.0;

    double perplexity() const;
};

/// Lowest loss first; ties go to the lexicographically smaller mask.
bool fitter(const FitnessRecord& a, const FitnessRecord& b);

}  // namespace evop
