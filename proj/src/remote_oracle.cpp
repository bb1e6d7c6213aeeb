#include "evop/remote_oracle.h"

#include <algorithm>
#include <cstdlib>
#include <map>

#include "evop/error.h"
#include "evop/protocol.h"

namespace evop {

namespace {

long env_long(const char* name, long fallback) {
    const char* v = std::getenv(name);
    if (!v || !*v) return fallback;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    return (*end == '\0' && n > 0) ? n : fallback;
}

}  // namespace

RemoteOptions RemoteOptions::from_env() {
    RemoteOptions o;
    o.handshake_timeout =
        std::chrono::milliseconds(env_long("EVOP_HANDSHAKE_TIMEOUT_MS", o.handshake_timeout.count()));
    o.response_timeout =
        std::chrono::milliseconds(env_long("EVOP_EVAL_TIMEOUT_MS", o.response_timeout.count()));
    o.window = static_cast<std::size_t>(env_long("EVOP_PIPELINE_WINDOW", static_cast<long>(o.window)));
    return o;
}

bool OracleDescriptor::has(const std::string& capability) const {
    return std::find(capabilities.begin(), capabilities.end(), capability) != capabilities.end();
}

OracleDescriptor handshake(LineChannel& channel, std::chrono::milliseconds timeout) {
    protocol::Hello hello;
    hello.agent = "evop-client";
    try {
        channel.send_line(protocol::encode_hello(0, hello));
    } catch (const TimeoutError&) {
        throw;
    } catch (const TransportError& e) {
        throw HandshakeError(channel.describe() + ": cannot send hello: " + e.what());
    }

    protocol::Message msg;
    try {
        msg = protocol::parse(channel.receive_line(timeout));
    } catch (const TimeoutError&) {
        throw;
    } catch (const TransportError& e) {
        throw HandshakeError(channel.describe() + ": bad hello: " + e.what());
    }
    if (msg.type != protocol::MessageType::Hello || msg.id != 0) {
        throw HandshakeError(channel.describe() + ": expected hello with id 0, got " +
                             protocol::to_string(msg.type));
    }
    protocol::Hello reply;
    try {
        reply = protocol::decode_hello(msg);
    } catch (const TransportError& e) {
        throw HandshakeError(channel.describe() + ": " + e.what());
    }
    if (reply.protocol_version != protocol::kVersion) {
        throw HandshakeError(channel.describe() + ": protocol version mismatch (server " +
                             std::to_string(reply.protocol_version) + ", client " +
                             std::to_string(protocol::kVersion) + ")");
    }
    if (reply.layer_count < 1) throw HandshakeError(channel.describe() + ": hello lacks layer_count");
    OracleDescriptor d;
    d.protocol_version = reply.protocol_version;
    d.layer_count = reply.layer_count;
    d.capabilities = reply.capabilities;
    d.agent = reply.agent;
    if (!d.has("eval") && !d.has("text-eval")) {
        throw HandshakeError(channel.describe() + ": server offers neither eval nor text-eval");
    }
    return d;
}

RemoteOracle::RemoteOracle(std::unique_ptr<LineChannel> channel, RemoteOptions options)
    : channel_(std::move(channel)), options_(options) {
    if (!channel_) throw ConfigError("RemoteOracle needs a channel");
    if (options_.window == 0) options_.window = 1;
    descriptor_ = handshake(*channel_, options_.handshake_timeout);
}

std::string RemoteOracle::describe() const {
    return channel_->describe() + " (" + (descriptor_.agent.empty() ? "remote" : descriptor_.agent) + ")";
}

std::string RemoteOracle::receive(std::chrono::milliseconds timeout) {
    try {
        return channel_->receive_line(timeout);
    } catch (const TransportError&) {
        broken_ = true;
        throw;
    }
}

void RemoteOracle::drain(std::size_t outstanding) {
    // Leave the connection in sync after a remote error: consume the
    // responses still owed for this batch.
    for (std::size_t i = 0; i < outstanding; ++i) {
        try {
            protocol::parse(receive(options_.response_timeout));
        } catch (const TransportError&) {
            broken_ = true;
            return;
        }
    }
}

double RemoteOracle::evaluate(const PruningPattern& pattern,
                              std::span<const CalibrationSample> samples) {
    return evaluate_batch(std::span<const PruningPattern>(&pattern, 1), samples, 1).front();
}

std::vector<double> RemoteOracle::evaluate_batch(std::span<const PruningPattern> patterns,
                                                 std::span<const CalibrationSample> samples,
                                                 std::size_t) {
    std::lock_guard lock(mutex_);
    if (broken_) throw TransportError(describe() + ": connection is no longer usable");
    for (const auto& p : patterns) check_pattern_shape(*this, p);

    const bool use_text =
        descriptor_.has("text-eval") && (options_.prefer_text || !descriptor_.has("eval"));
    std::vector<std::string> texts;
    if (use_text) {
        for (const auto& s : samples) texts.push_back(decode_bytes(s.token_ids));
    }

    std::vector<double> results(patterns.size());
    std::map<std::uint64_t, std::size_t> in_flight;
    std::size_t next = 0;
    std::size_t done = 0;
    while (done < patterns.size()) {
        while (in_flight.size() < options_.window && next < patterns.size()) {
            const std::uint64_t id = next_id_++;
            const auto line = use_text ? protocol::encode_text_eval(id, patterns[next], texts)
                                       : protocol::encode_eval(id, patterns[next], samples);
            try {
                channel_->send_line(line);
            } catch (const TransportError&) {
                broken_ = true;
                throw;
            }
            in_flight.emplace(id, next++);
        }
        protocol::Message msg;
        try {
            msg = protocol::parse(receive(options_.response_timeout));
        } catch (const TransportError&) {
            broken_ = true;
            throw;
        }
        const auto it = in_flight.find(msg.id);
        if (it == in_flight.end()) {
            broken_ = true;
            throw TransportError(describe() + ": response for unknown request id " +
                                 std::to_string(msg.id));
        }
        const std::size_t index = it->second;
        in_flight.erase(it);
        if (msg.type == protocol::MessageType::Error) {
            drain(in_flight.size());
            throw RemoteError("pattern " + patterns[index].to_string() + ": " +
                              protocol::decode_error(msg));
        }
        if (msg.type != protocol::MessageType::Result) {
            broken_ = true;
            throw TransportError(describe() + ": expected result, got " + protocol::to_string(msg.type));
        }
        try {
            results[index] = protocol::decode_result(msg);
        } catch (const TransportError& e) {
            drain(in_flight.size());
            throw RemoteError("pattern " + patterns[index].to_string() + ": " + e.what());
        }
        ++done;
    }
    return results;
}

std::vector<std::vector<double>> RemoteOracle::embed(std::span<const std::string> texts) {
    if (!can_embed()) {
        throw CapabilityError(describe() + " did not advertise the embed capability");
    }
    std::lock_guard lock(mutex_);
    if (broken_) throw TransportError(describe() + ": connection is no longer usable");
    const std::uint64_t id = next_id_++;
    try {
        channel_->send_line(protocol::encode_embed(id, texts));
    } catch (const TransportError&) {
        broken_ = true;
        throw;
    }
    const auto msg = protocol::parse(receive(options_.response_timeout));
    if (msg.id != id) {
        broken_ = true;
        throw TransportError(describe() + ": response for unknown request id " + std::to_string(msg.id));
    }
    if (msg.type == protocol::MessageType::Error) throw RemoteError(protocol::decode_error(msg));
    if (msg.type != protocol::MessageType::Embedding) {
        throw TransportError(describe() + ": expected embedding, got " + protocol::to_string(msg.type));
    }
    return protocol::decode_embedding(msg);
}

}  // namespace evop
