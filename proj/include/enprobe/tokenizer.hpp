#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "enprobe/model.hpp"

namespace enprobe {

// Splits text the way GPT-2's pre-tokenizer pattern does:
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// Throws std::invalid_argument on malformed UTF-8.
std::vector<std::string> pretokenize(std::string_view text);

// Byte-level BPE over a GPT-2 style vocab.json (token -> id) and merges.txt
// (one "left right" pair per line, ranked by line order).
class BpeTokenizer {
public:
    static BpeTokenizer from_files(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);
    static BpeTokenizer from_strings(std::string_view vocab_json, std::string_view merges_txt);

    TokenSequence encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

    std::size_t vocab_size() const { return id_to_token_.size(); }
    std::optional<TokenId> token_id(const std::string& token) const;

private:
    std::vector<std::string> bpe(const std::string& word) const;

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> merge_ranks_;
};

} // namespace enprobe
