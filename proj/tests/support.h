#pragma once

// Shared fixtures for the test binaries.

#include <bit>
#include <cmath>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "evop/ccds.h"
#include "evop/core.h"
#include "evop/oracle.h"
#include "evop/rng.h"
#include "evop/toy_lm.h"
#include "evop/transport.h"

namespace evop::testing {

inline std::string data_path(const std::string& rel) { return std::string(EVOP_TEST_DATA) + "/" + rel; }

// The committed landscape fixture: a 12-layer toy model (weight seed 2) and
// the calibration set built from tests/data/corpus with 4-sentence chunks and
// 32-token samples. Found by scanning weight seeds 0..11: on this one greedy
// matches the optimum at k = 1 and 2 but not at k = 6.
inline constexpr std::uint64_t kFixtureModelSeed = 2;
inline constexpr std::size_t kFixtureSampleLen = 32;
inline constexpr std::size_t kFixtureSentencesPerChunk = 4;

inline CcdsConfig fixture_ccds_config() {
    CcdsConfig c;
    c.sentences_per_chunk = kFixtureSentencesPerChunk;
    c.sample_len = kFixtureSampleLen;
    c.seed = 0;
    return c;
}

inline const std::vector<CalibrationSample>& fixture_samples() {
    static const std::vector<CalibrationSample> samples =
        build_calibration_dataset(read_corpus(data_path("corpus")), fixture_ccds_config()).flattened();
    return samples;
}

inline std::shared_ptr<const ToyLM> fixture_model() {
    static const auto model = [] {
        ToyLMConfig c;
        c.weight_seed = kFixtureModelSeed;
        return std::make_shared<const ToyLM>(ToyLM::init(c));
    }();
    return model;
}

inline std::shared_ptr<const ToyLM> small_model(std::uint64_t seed, int layers, int d_model = 16,
                                                int d_ff = 32) {
    ToyLMConfig c;
    c.weight_seed = seed;
    c.n_layers = layers;
    c.d_model = d_model;
    c.n_heads = 2;
    c.d_ff = d_ff;
    c.max_seq_len = 64;
    return std::make_shared<const ToyLM>(ToyLM::init(c));
}

inline std::vector<CalibrationSample> random_samples(std::uint64_t seed, std::size_t count,
                                                     std::size_t len, int vocab = kByteVocabSize) {
    Rng rng(seed);
    std::vector<CalibrationSample> out(count);
    for (auto& s : out) {
        s.token_ids.resize(len);
        for (auto& t : s.token_ids) t = static_cast<Token>(rng.below(static_cast<std::uint64_t>(vocab)));
    }
    return out;
}

inline PruningPattern random_pattern(std::size_t m, std::size_t k, Rng& rng) {
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(m - i)]);
    return PruningPattern::from_indices(m, std::vector<std::size_t>(idx.begin(), idx.begin() + k));
}

// Placeholder calibration set for oracles that ignore their samples.
inline const std::vector<CalibrationSample>& unused_samples() {
    static const std::vector<CalibrationSample> samples{CalibrationSample{{72, 105}}};
    return samples;
}

// Cheap landscape with pairwise layer interactions, so greedy can be fooled.
// loss = 3 + sum_i a_i p_i + sum_{i<j} b_ij p_i p_j, coefficients from `seed`.
class SyntheticOracle : public FitnessOracle {
public:
    SyntheticOracle(std::size_t layers, std::uint64_t seed) : layers_(layers) {
        Rng rng(seed);
        unary_.resize(layers);
        for (auto& a : unary_) a = rng.normal() * 0.1;
        pair_.resize(layers * layers);
        for (auto& b : pair_) b = rng.normal() * 0.05;
    }
    std::size_t layer_count() const override { return layers_; }
    std::string describe() const override { return "synthetic"; }
    double evaluate(const PruningPattern& p, std::span<const CalibrationSample>) override {
        check_pattern_shape(*this, p);
        double loss = 3.0;
        for (std::size_t i = 0; i < layers_; ++i) {
            if (!p.pruned(i)) continue;
            loss += unary_[i];
            for (std::size_t j = i + 1; j < layers_; ++j) {
                if (p.pruned(j)) loss += pair_[i * layers_ + j];
            }
        }
        return loss;
    }
    bool thread_safe() const override { return true; }

private:
    std::size_t layers_;
    std::vector<double> unary_, pair_;
};

// Wraps another oracle, records every submitted pattern and optionally
// rejects patterns with the wrong popcount.
class RecordingOracle : public FitnessOracle {
public:
    explicit RecordingOracle(FitnessOracle& inner, std::size_t required_popcount = 0)
        : inner_(inner), required_(required_popcount) {}
    std::size_t layer_count() const override { return inner_.layer_count(); }
    std::string describe() const override { return "recording(" + inner_.describe() + ")"; }
    double evaluate(const PruningPattern& p, std::span<const CalibrationSample> samples) override {
        {
            std::lock_guard lock(mutex_);
            submitted_.push_back(p);
            if (required_ != 0 && p.popcount() != required_) ++violations_;
        }
        return inner_.evaluate(p, samples);
    }
    bool thread_safe() const override { return inner_.thread_safe(); }

    std::vector<PruningPattern> submitted() const {
        std::lock_guard lock(mutex_);
        return submitted_;
    }
    std::size_t violations() const {
        std::lock_guard lock(mutex_);
        return violations_;
    }
    std::size_t calls() const {
        std::lock_guard lock(mutex_);
        return submitted_.size();
    }

private:
    FitnessOracle& inner_;
    std::size_t required_;
    mutable std::mutex mutex_;
    std::vector<PruningPattern> submitted_;
    std::size_t violations_ = 0;
};

// Every k-subset of m layers, by brute force over all 2^m masks.
inline std::vector<PruningPattern> all_patterns(std::size_t m, std::size_t k) {
    std::vector<PruningPattern> out;
    for (std::uint64_t bits = 0; bits < (std::uint64_t{1} << m); ++bits) {
        if (static_cast<std::size_t>(std::popcount(bits)) != k) continue;
        PruningPattern p(m);
        for (std::size_t i = 0; i < m; ++i) p.set(i, (bits >> i) & 1);
        out.push_back(p);
    }
    return out;
}

// Replays a conformance transcript ('>' requests, '<' expected replies)
// against a server started with `command`. Returns one line per mismatch.
inline std::vector<std::string> replay_transcript(const std::string& transcript, const std::string& command) {
    using nlohmann::json;
    std::ifstream in(transcript);
    if (!in) throw std::runtime_error("cannot read " + transcript);
    ChildProcessChannel server(command);
    std::vector<std::string> problems;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.rfind("> ", 0) == 0) {
            server.send_line(line.substr(2));
            continue;
        }
        if (line.rfind("< ", 0) != 0) continue;
        const std::string expected = line.substr(2);
        std::string actual;
        try {
            actual = server.receive_line(std::chrono::seconds(10));
        } catch (const std::exception& e) {
            problems.push_back("line " + std::to_string(line_no) + ": " + e.what());
            break;
        }
        std::string normalized = actual;
        const auto want = json::parse(expected);
        const auto got = json::parse(actual, nullptr, false);
        // Free-form fields take the expected value; everything else is byte-exact.
        const char* free_field = want["type"] == "hello" ? "agent" : want["type"] == "error" ? "message" : nullptr;
        if (free_field && got.is_object() && got.contains(free_field) && got[free_field].is_string() &&
            got.dump() == actual) {
            auto patched = got;
            patched[free_field] = want[free_field];
            normalized = patched.dump();
        }
        if (normalized != expected) {
            problems.push_back("line " + std::to_string(line_no) + ": expected " + expected + ", got " + actual);
        }
    }
    return problems;
}

}  // namespace evop::testing
