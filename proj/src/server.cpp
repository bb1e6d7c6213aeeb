#include "evop/server.h"

#include <chrono>
#include <thread>
#include <vector>

#include "evop/ccds.h"
#include "evop/error.h"

namespace evop {

namespace {

constexpr std::chrono::milliseconds kIdleWait{24LL * 3600 * 1000};

std::string handle(FitnessOracle& oracle, const protocol::Message& msg, const ServeOptions& options) {
    using protocol::MessageType;
    try {
        switch (msg.type) {
            case MessageType::Eval: {
                auto req = protocol::decode_eval(msg);
                std::vector<CalibrationSample> samples;
                if (!req.texts.empty()) {
                    for (const auto& t : req.texts) samples.push_back({encode_bytes(t, false)});
                } else {
                    for (auto& s : req.samples) samples.push_back({std::move(s)});
                }
                return protocol::encode_result(msg.id, oracle.evaluate(req.pattern, samples));
            }
            case MessageType::Embed: {
                const auto texts = protocol::decode_embed(msg);
                if (options.embed_dimension > 0) {
                    return protocol::encode_embedding(
                        msg.id, HashedTrigramEmbedder(options.embed_dimension).embed(texts));
                }
                if (oracle.can_embed()) return protocol::encode_embedding(msg.id, oracle.embed(texts));
                return protocol::encode_error(msg.id, "embed capability not offered");
            }
            default:
                return protocol::encode_error(
                    msg.id, std::string("unexpected message type ") + protocol::to_string(msg.type));
        }
    } catch (const std::exception& e) {
        return protocol::encode_error(msg.id, e.what());
    }
}

// Id of a rejected line when it is still a JSON object with a usable id, else 0.
std::uint64_t salvage_id(const std::string& line) {
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_object() && j.contains("id") && j["id"].is_number_unsigned()) return j["id"].get<std::uint64_t>();
    return 0;
}

}  // namespace

void serve(FitnessOracle& oracle, LineChannel& channel, const ServeOptions& options) {
    protocol::Message hello_msg;
    try {
        hello_msg = protocol::parse(channel.receive_line(kIdleWait));
    } catch (const TransportError&) {
        return;
    }
    if (hello_msg.type != protocol::MessageType::Hello) {
        channel.send_line(protocol::encode_error(hello_msg.id, "expected hello"));
        return;
    }
    protocol::Hello reply;
    reply.protocol_version = options.protocol_version;
    reply.layer_count = oracle.layer_count();
    reply.capabilities = {"eval", "text-eval"};
    if (options.embed_dimension > 0 || oracle.can_embed()) reply.capabilities.push_back("embed");
    reply.agent = options.agent;
    channel.send_line(protocol::encode_hello(hello_msg.id, reply));

    std::vector<std::string> pending;
    auto flush = [&] {
        for (auto it = pending.rbegin(); it != pending.rend(); ++it) channel.send_line(*it);
        pending.clear();
    };
    for (;;) {
        std::string line;
        try {
            line = channel.receive_line(kIdleWait);
        } catch (const TransportError&) {
            break;
        }
        if (options.hang) continue;
        protocol::Message msg;
        try {
            msg = protocol::parse(line);
        } catch (const TransportError& e) {
            pending.push_back(protocol::encode_error(salvage_id(line), e.what()));
            flush();
            continue;
        }
        pending.push_back(handle(oracle, msg, options));
        if (pending.size() >= options.reorder_window || !channel.readable_now()) {
            try {
                flush();
            } catch (const TransportError&) {
                break;
            }
        }
    }
    try {
        flush();
    } catch (const TransportError&) {
    }
}

}  // namespace evop
