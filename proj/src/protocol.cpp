#include "evop/protocol.h"

#include <cmath>

#include "evop/error.h"

namespace evop::protocol {

namespace {

using nlohmann::json;

std::string dump(const json& j) {
    return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

json pattern_to_json(const PruningPattern& p) {
    json bits = json::array();
    for (auto b : p.bits()) bits.push_back(static_cast<int>(b));
    return bits;
}

PruningPattern pattern_from_json(const json& j) {
    std::vector<std::uint8_t> bits;
    for (const auto& b : j) {
        const int v = b.get<int>();
        if (v != 0 && v != 1) throw TransportError("pattern entries must be 0 or 1");
        bits.push_back(static_cast<std::uint8_t>(v));
    }
    return PruningPattern(std::move(bits));
}

template <typename Fn>
auto guarded(const char* what, Fn&& fn) {
    try {
        return fn();
    } catch (const json::exception& e) {
        throw TransportError(std::string("malformed ") + what + " message: " + e.what());
    }
}

}  // namespace

const char* to_string(MessageType type) {
    switch (type) {
        case MessageType::Hello: return "hello";
        case MessageType::Eval: return "eval";
        case MessageType::Result: return "result";
        case MessageType::Embed: return "embed";
        case MessageType::Embedding: return "embedding";
        case MessageType::Error: return "error";
    }
    return "?";
}

std::optional<MessageType> parse_type(const std::string& name) {
    for (auto t : {MessageType::Hello, MessageType::Eval, MessageType::Result, MessageType::Embed,
                   MessageType::Embedding, MessageType::Error}) {
        if (name == to_string(t)) return t;
    }
    return std::nullopt;
}

Message parse(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw TransportError("line is not JSON: " + std::string(e.what()));
    }
    if (!j.is_object()) throw TransportError("message is not a JSON object");
    if (!j.contains("type") || !j["type"].is_string()) throw TransportError("message lacks a type");
    if (!j.contains("id") || !j["id"].is_number_unsigned()) {
        throw TransportError("message lacks a non-negative integer id");
    }
    const auto type = parse_type(j["type"].get<std::string>());
    if (!type) throw TransportError("unknown message type '" + j["type"].get<std::string>() + "'");
    return Message{*type, j["id"].get<std::uint64_t>(), std::move(j)};
}

std::string encode_hello(std::uint64_t id, const Hello& hello) {
    json j = {{"type", "hello"}, {"id", id}, {"protocol_version", hello.protocol_version}};
    if (!hello.agent.empty()) j["agent"] = hello.agent;
    if (hello.layer_count > 0) j["layer_count"] = hello.layer_count;
    if (!hello.capabilities.empty()) j["capabilities"] = hello.capabilities;
    return dump(j);
}

Hello decode_hello(const Message& msg) {
    return guarded("hello", [&] {
        Hello h;
        h.protocol_version = msg.body.at("protocol_version").get<int>();
        h.layer_count = msg.body.value("layer_count", std::size_t{0});
        h.capabilities = msg.body.value("capabilities", std::vector<std::string>{});
        h.agent = msg.body.value("agent", std::string{});
        return h;
    });
}

std::string encode_eval(std::uint64_t id, const PruningPattern& pattern,
                        std::span<const CalibrationSample> samples) {
    json s = json::array();
    for (const auto& sample : samples) s.push_back(sample.token_ids);
    return dump({{"type", "eval"}, {"id", id}, {"pattern", pattern_to_json(pattern)}, {"samples", s}});
}

std::string encode_text_eval(std::uint64_t id, const PruningPattern& pattern,
                             std::span<const std::string> texts) {
    return dump({{"type", "eval"},
                 {"id", id},
                 {"pattern", pattern_to_json(pattern)},
                 {"texts", std::vector<std::string>(texts.begin(), texts.end())}});
}

EvalRequest decode_eval(const Message& msg) {
    return guarded("eval", [&] {
        EvalRequest r;
        r.pattern = pattern_from_json(msg.body.at("pattern"));
        if (msg.body.contains("samples")) {
            r.samples = msg.body.at("samples").get<std::vector<std::vector<Token>>>();
        } else if (msg.body.contains("texts")) {
            r.texts = msg.body.at("texts").get<std::vector<std::string>>();
        } else {
            throw TransportError("eval message carries neither samples nor texts");
        }
        return r;
    });
}

std::string encode_result(std::uint64_t id, double loss) {
    return dump({{"type", "result"}, {"id", id}, {"loss", loss}});
}

double decode_result(const Message& msg) {
    return guarded("result", [&] {
        const auto& v = msg.body.at("loss");
        if (!v.is_number()) throw TransportError("result loss is not a number");
        const double loss = v.get<double>();
        if (!std::isfinite(loss)) throw TransportError("result loss is not finite");
        return loss;
    });
}

std::string encode_embed(std::uint64_t id, std::span<const std::string> texts) {
    return dump({{"type", "embed"}, {"id", id}, {"texts", std::vector<std::string>(texts.begin(), texts.end())}});
}

std::vector<std::string> decode_embed(const Message& msg) {
    return guarded("embed", [&] { return msg.body.at("texts").get<std::vector<std::string>>(); });
}

std::string encode_embedding(std::uint64_t id, const std::vector<std::vector<double>>& vectors) {
    return dump({{"type", "embedding"}, {"id", id}, {"vectors", vectors}});
}

std::vector<std::vector<double>> decode_embedding(const Message& msg) {
    return guarded("embedding", [&] {
        return msg.body.at("vectors").get<std::vector<std::vector<double>>>();
    });
}

std::string encode_error(std::uint64_t id, const std::string& message) {
    return dump({{"type", "error"}, {"id", id}, {"message", message}});
}

std::string decode_error(const Message& msg) {
    return msg.body.value("message", std::string("(no detail)"));
}

}  // namespace evop::protocol
