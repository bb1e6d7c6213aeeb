#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evop/core.h"
#include "evop/toy_lm.h"

// Newline-delimited JSON oracle protocol. See docs/protocol.md for the
// byte-level description; every message is one JSON object on one line.
namespace evop::protocol {

inline constexpr int kVersion = 1;

enum class MessageType { Hello, Eval, Result, Embed, Embedding, Error };

const char* to_string(MessageType type);
std::optional<MessageType> parse_type(const std::string& name);

struct Hello {
    int protocol_version = kVersion;
    std::size_t layer_count = 0;              // 0 in the client's hello
    std::vector<std::string> capabilities;  // server only
    std::string agent;
};

struct EvalRequest {
    PruningPattern pattern;
    std::vector<std::vector<Token>> samples;  // "eval"
    std::vector<std::string> texts;            // "text-eval"
};

struct Message {
    MessageType type = MessageType::Error;
    std::uint64_t id = 0;
    nlohmann::json body;  // the full object, including "type" and "id"
};

/// Parses and validates one line. Throws TransportError on malformed input.
Message parse(const std::string& line);

std::string encode_hello(std::uint64_t id, const Hello& hello);
Hello decode_hello(const Message& msg);

std::string encode_eval(std::uint64_t id, const PruningPattern& pattern,
                        std::span<const CalibrationSample> samples);
std::string encode_text_eval(std::uint64_t id, const PruningPattern& pattern,
                             std::span<const std::string> texts);
EvalRequest decode_eval(const Message& msg);

std::string encode_result(std::uint64_t id, double loss);
double decode_result(const Message& msg);

std::string encode_embed(std::uint64_t id, std::span<const std::string> texts);
std::vector<std::string> decode_embed(const Message& msg);

std::string encode_embedding(std::uint64_t id, const std::vector<std::vector<double>>& vectors);
std::vector<std::vector<double>> decode_embedding(const Message& msg);

std::string encode_error(std::uint64_t id, const std::string& message);
std::string decode_error(const Message& msg);

}  // namespace evop::protocol
