#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace evop {

using Token = std::int32_t;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
inline constexpr Token kBosToken = 256;
inline constexpr Token kEosToken = 257;
inline constexpr Token kPadToken = 258;
inline constexpr int kByteVocabSize = 259;

/// One token per byte of `text`; BOS is prepended when `add_bos` is set.
std::vector<Token> encode_bytes(std::string_view text, bool add_bos = false);

/// Inverse of encode_bytes; special tokens are dropped.
std::string decode_bytes(std::span<const Token> tokens);

}  // namespace evop
