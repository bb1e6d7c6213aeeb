#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "evop/ccds.h"
#include "evop/oracle.h"
#include "evop/transport.h"

namespace evop {

struct RemoteOptions {
    std::chrono::milliseconds handshake_timeout{30'000};
    std::chrono::milliseconds response_timeout{600'000};
    /// Maximum requests in flight on the connection.
    std::size_t window = 8;
    /// Send raw text instead of token ids when the server offers "text-eval".
    bool prefer_text = false;

    /// Defaults overridden by EVOP_HANDSHAKE_TIMEOUT_MS, EVOP_EVAL_TIMEOUT_MS
    /// and EVOP_PIPELINE_WINDOW when set.
    static RemoteOptions from_env();
};

struct OracleDescriptor {
    int protocol_version = 0;
    std::size_t layer_count = 0;
    std::vector<std::string> capabilities;
    std::string agent;

    bool has(const std::string& capability) const;
};

/// Sends the client hello (id 0) and validates the server's reply. Throws
/// TimeoutError, HandshakeError (malformed reply or version mismatch).
OracleDescriptor handshake(LineChannel& channel, std::chrono::milliseconds timeout);

/// FitnessOracle served by another process over the line protocol.
///
/// Requests are pipelined up to `window` deep and matched to responses by id,
/// so servers may answer out of order. After a transport failure the oracle
/// is unusable and every later call throws TransportError immediately.
class RemoteOracle : public FitnessOracle {
public:
    RemoteOracle(std::unique_ptr<LineChannel> channel, RemoteOptions options = {});

    std::size_t layer_count() const override { return descriptor_.layer_count; }
    std::string describe() const override;

    double evaluate(const PruningPattern& pattern,
                    std::span<const CalibrationSample> samples) override;
    std::vector<double> evaluate_batch(std::span<const PruningPattern> patterns,
                                       std::span<const CalibrationSample> samples,
                                       std::size_t workers) override;

    bool can_embed() const override { return descriptor_.has("embed"); }
    std::vector<std::vector<double>> embed(std::span<const std::string> texts) override;

    const OracleDescriptor& descriptor() const { return descriptor_; }
    LineChannel& channel() { return *channel_; }

private:
    std::string receive(std::chrono::milliseconds timeout);
    void drain(std::size_t outstanding);

    std::unique_ptr<LineChannel> channel_;
    RemoteOptions options_;
    OracleDescriptor descriptor_;
    std::uint64_t next_id_ = 1;
    bool broken_ = false;
    std::mutex mutex_;
};

/// Embedder backed by an oracle's "embed" capability.
class OracleEmbedder : public Embedder {
public:
    explicit OracleEmbedder(FitnessOracle& oracle) : oracle_(oracle) {}

    std::string name() const override { return "oracle:" + oracle_.describe(); }
    std::vector<std::vector<double>> embed(std::span<const std::string> texts) const override {
        return oracle_.embed(texts);
    }

private:
    FitnessOracle& oracle_;
};

}  // namespace evop
