#include "evop/tokenizer.h"

namespace evop {

std::vector<Token> encode_bytes(std::string_view text, bool add_bos) {
    std::vector<Token> out;
    out.reserve(text.size() + (add_bos ? 1 : 0));
    if (add_bos) out.push_back(kBosToken);
    for (unsigned char c : text) out.push_back(static_cast<Token>(c));
    return out;
}

std::string decode_bytes(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (auto t : tokens) {
        if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
    }
    return out;
}

}  // namespace evop
