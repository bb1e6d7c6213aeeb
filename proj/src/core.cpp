#include "evop/core.h"

#include <cmath>
#include <limits>
#include <numeric>

#include "evop/error.h"

namespace evop {

PruningPattern::PruningPattern(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) {
        if (b > 1) throw ConfigError("pruning pattern bits must be 0 or 1");
    }
}

PruningPattern PruningPattern::from_string(std::string_view bits) {
    std::vector<std::uint8_t> out;
    out.reserve(bits.size());
    for (char c : bits) {
        if (c != '0' && c != '1') {
            throw ConfigError("invalid pattern string '" + std::string(bits) + "'");
        }
        out.push_back(c == '1' ? 1 : 0);
    }
    return PruningPattern(std::move(out));
}

PruningPattern PruningPattern::from_indices(std::size_t layers,
                                            const std::vector<std::size_t>& pruned) {
    PruningPattern p(layers);
    for (auto i : pruned) {
        if (i >= layers) throw ShapeError("pruned layer index out of range");
        p.set(i, true);
    }
    return p;
}

std::size_t PruningPattern::popcount() const {
    return static_cast<std::size_t>(std::accumulate(bits_.begin(), bits_.end(), std::size_t{0}));
}

std::vector<std::size_t> PruningPattern::pruned_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        if (bits_[i]) out.push_back(i);
    }
    return out;
}

std::string PruningPattern::to_string() const {
    std::string s;
    s.reserve(bits_.size());
    for (auto b : bits_) s.push_back(b ? '1' : '0');
    return s;
}

std::size_t PruningPatternHash::operator()(const PruningPattern& p) const {
    // FNV-1a over the bits.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : p.bits()) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    h ^= p.size();
    h *= 0x100000001b3ULL;
    return static_cast<std::size_t>(h);
}

std::uint64_t pps_size(std::uint64_t m, std::uint64_t k) {
    if (k > m) throw ConfigError("pps_size: k exceeds m");
    k = std::min(k, m - k);
    // C(m, i+1) = C(m, i) * (m - i) / (i + 1); the product is always divisible.
    unsigned __int128 result = 1;
    for (std::uint64_t i = 0; i < k; ++i) {
        result = result * (m - i) / (i + 1);
        if (result > std::numeric_limits<std::uint64_t>::max()) {
            throw OverflowError("C(" + std::to_string(m) + ", " + std::to_string(k) +
                                ") does not fit in 64 bits");
        }
    }
    return static_cast<std::uint64_t>(result);
}

std::size_t derive_k(double theta, std::size_t m) {
    if (!(theta > 0.0 && theta < 1.0)) {
        throw ConfigError("sparsity theta must lie in (0, 1)");
    }
    if (m < 2) throw ConfigError("at least 2 layers are required");
    // Half-up; the epsilon absorbs products like 0.35 * 10 = 3.4999999999999996.
    const auto k = static_cast<std::size_t>(std::floor(theta * static_cast<double>(m) + 0.5 + 1e-9));
    if (k == 0 || k >= m) {
        throw DegenerateSparsity("theta=" + std::to_string(theta) + " on " + std::to_string(m) +
                                 " layers prunes " + std::to_string(k) +
                                 " layers; need 1..m-1");
    }
    return k;
}

SparsityConfig SparsityConfig::from_theta(double theta, std::size_t layers) {
    return SparsityConfig{theta, layers, derive_k(theta, layers)};
}

SparsityConfig SparsityConfig::from_count(std::size_t pruned, std::size_t layers) {
    SparsityConfig cfg{layers ? static_cast<double>(pruned) / static_cast<double>(layers) : 0.0,
                       layers, pruned};
    cfg.validate();
    return cfg;
}

void SparsityConfig::validate() const {
    if (layers < 2) throw ConfigError("at least 2 layers are required");
    if (pruned < 1 || pruned >= layers) {
        throw DegenerateSparsity("pruned layer count " + std::to_string(pruned) +
                                 " outside [1, " + std::to_string(layers - 1) + "]");
    }
}

double FitnessRecord::perplexity() const { return std::exp(loss); }

bool fitter(const FitnessRecord& a, const FitnessRecord& b) {
    if (a.loss != b.loss) return a.loss < b.loss;
    return a.pattern < b.pattern;
}

}  // namespace evop
