#include "enprobe/tokenizer.hpp"

#include <array>
#include <climits>
#include <fstream>
#include <sstream>

#include <json.hpp>
#include <unicode/uchar.h>

#include "enprobe/archive.hpp"

namespace enprobe {

namespace {

std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
        out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
    return out;
}

struct CodePoint {
    char32_t cp;
    std::size_t offset; // byte offset in the source text
    std::size_t length;
};

std::vector<CodePoint> utf8_decode(std::string_view s) {
    std::vector<CodePoint> out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        std::size_t len;
        char32_t cp;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xe0) == 0xc0) {
            len = 2;
            cp = b0 & 0x1f;
        } else if ((b0 & 0xf0) == 0xe0) {
            len = 3;
            cp = b0 & 0x0f;
        } else if ((b0 & 0xf8) == 0xf0) {
            len = 4;
            cp = b0 & 0x07;
        } else {
            throw std::invalid_argument("malformed UTF-8 at byte " + std::to_string(i));
        }
        if (i + len > s.size()) throw std::invalid_argument("truncated UTF-8 at byte " + std::to_string(i));
        for (std::size_t k = 1; k < len; ++k) {
            const auto b = static_cast<unsigned char>(s[i + k]);
            if ((b & 0xc0) != 0x80) throw std::invalid_argument("malformed UTF-8 at byte " + std::to_string(i + k));
            cp = (cp << 6) | (b & 0x3f);
        }
        out.push_back({cp, i, len});
        i += len;
    }
    return out;
}

bool is_letter(char32_t c) { return (U_GET_GC_MASK(static_cast<UChar32>(c)) & U_GC_L_MASK) != 0; }
bool is_number(char32_t c) { return (U_GET_GC_MASK(static_cast<UChar32>(c)) & U_GC_N_MASK) != 0; }
bool is_space(char32_t c) { return u_isUWhiteSpace(static_cast<UChar32>(c)) != 0; }
bool is_other(char32_t c) { return !is_space(c) && !is_letter(c) && !is_number(c); }

// GPT-2's reversible byte -> printable code point table.
const std::array<std::string, 256>& byte_encoder() {
    static const std::array<std::string, 256> table = [] {
        std::array<std::string, 256> t;
        std::array<bool, 256> direct{};
        for (int b = '!'; b <= '~'; ++b) direct[b] = true;
        for (int b = 0xa1; b <= 0xac; ++b) direct[b] = true;
        for (int b = 0xae; b <= 0xff; ++b) direct[b] = true;
        char32_t next = 256;
        for (int b = 0; b < 256; ++b) t[b] = utf8_encode(direct[b] ? static_cast<char32_t>(b) : next++);
        return t;
    }();
    return table;
}

const std::unordered_map<std::string, unsigned char>& byte_decoder() {
    static const std::unordered_map<std::string, unsigned char> table = [] {
        std::unordered_map<std::string, unsigned char> t;
        const auto& enc = byte_encoder();
        for (int b = 0; b < 256; ++b) t[enc[b]] = static_cast<unsigned char>(b);
        return t;
    }();
    return table;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw LoadError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

std::vector<std::string> pretokenize(std::string_view text) {
    const auto cps = utf8_decode(text);
    const std::size_t n = cps.size();
    std::vector<std::string> out;
    auto emit = [&](std::size_t a, std::size_t b) {
        const std::size_t begin = cps[a].offset;
        const std::size_t end = cps[b - 1].offset + cps[b - 1].length;
        out.emplace_back(text.substr(begin, end - begin));
    };
    auto run_end = [&](std::size_t j, bool (*pred)(char32_t)) {
        while (j < n && pred(cps[j].cp)) ++j;
        return j;
    };

    std::size_t i = 0;
    while (i < n) {
        const char32_t c = cps[i].cp;
        const bool has_next = i + 1 < n;
        // contractions
        if (c == U'\'' && has_next) {
            const char32_t c1 = cps[i + 1].cp;
            if (c1 == U's' || c1 == U't' || c1 == U'm' || c1 == U'd') {
                emit(i, i + 2);
                i += 2;
                continue;
            }
            if (i + 2 < n) {
                const char32_t c2 = cps[i + 2].cp;
                if ((c1 == U'r' && c2 == U'e') || (c1 == U'v' && c2 == U'e') || (c1 == U'l' && c2 == U'l')) {
                    emit(i, i + 3);
                    i += 3;
                    continue;
                }
            }
        }
        // " ?X+" classes
        const std::size_t body = (c == U' ' && has_next) ? i + 1 : i;
        bool matched = false;
        for (auto pred : {&is_letter, &is_number, &is_other}) {
            if (pred(cps[body].cp) && (body == i + 1 || pred(c))) {
                const std::size_t j = run_end(body, pred);
                emit(i, j);
                i = j;
                matched = true;
                break;
            }
        }
        if (matched) continue;
        // whitespace: \s+(?!\S) then \s+
        const std::size_t j = run_end(i, &is_space);
        if (j == n || j - i == 1) {
            emit(i, j);
            i = j;
        } else {
            emit(i, j - 1);
            i = j - 1;
        }
    }
    return out;
}

BpeTokenizer BpeTokenizer::from_files(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
    return from_strings(read_file(vocab_json), read_file(merges_txt));
}

BpeTokenizer BpeTokenizer::from_strings(std::string_view vocab_json, std::string_view merges_txt) {
    BpeTokenizer tok;
    nlohmann::json vocab;
    try {
        vocab = nlohmann::json::parse(vocab_json);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("vocab.json is not valid JSON: ") + e.what());
    }
    if (!vocab.is_object() || vocab.empty()) throw LoadError("vocab.json must be a non-empty object");
    std::size_t max_id = 0;
    for (auto it = vocab.begin(); it != vocab.end(); ++it) {
        if (!it->is_number_integer() || it->get<long long>() < 0 || it->get<long long>() > INT_MAX) {
            throw LoadError("vocab.json: id for '" + it.key() + "' is not a valid token id");
        }
        const auto id = it->get<TokenId>();
        tok.token_to_id_[it.key()] = id;
        max_id = std::max(max_id, static_cast<std::size_t>(id));
    }
    tok.id_to_token_.assign(max_id + 1, std::string());
    for (const auto& [token, id] : tok.token_to_id_) tok.id_to_token_[static_cast<std::size_t>(id)] = token;

    std::size_t line_no = 0;
    std::size_t pos = 0;
    int rank = 0;
    while (pos <= merges_txt.size()) {
        std::size_t end = merges_txt.find('\n', pos);
        if (end == std::string_view::npos) end = merges_txt.size();
        std::string_view line = merges_txt.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        if (line_no == 1 && line.starts_with("#version")) continue;
        const std::size_t sp = line.find(' ');
        if (sp == std::string_view::npos || sp == 0 || sp + 1 >= line.size() ||
            line.find(' ', sp + 1) != std::string_view::npos) {
            throw LoadError("merges.txt line " + std::to_string(line_no) + ": expected two space-separated symbols");
        }
        tok.merge_ranks_.emplace(std::string(line), rank++);
    }
    return tok;
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& word) const {
    std::vector<std::string> parts;
    for (const auto& cp : utf8_decode(word)) parts.push_back(word.substr(cp.offset, cp.length));
    while (parts.size() > 1) {
        int best_rank = INT_MAX;
        std::size_t best = 0;
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
            auto it = merge_ranks_.find(parts[i] + " " + parts[i + 1]);
            if (it != merge_ranks_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = i;
            }
        }
        if (best_rank == INT_MAX) break;
        const std::string left = parts[best];
        const std::string right = parts[best + 1];
        std::vector<std::string> merged;
        merged.reserve(parts.size());
        for (std::size_t i = 0; i < parts.size();) {
            if (i + 1 < parts.size() && parts[i] == left && parts[i + 1] == right) {
                merged.push_back(left + right);
                i += 2;
            } else {
                merged.push_back(parts[i]);
                ++i;
            }
        }
        parts = std::move(merged);
    }
    return parts;
}

TokenSequence BpeTokenizer::encode(std::string_view text) const {
    TokenSequence ids;
    const auto& enc = byte_encoder();
    for (const auto& piece : pretokenize(text)) {
        std::string mapped;
        for (unsigned char b : piece) mapped += enc[b];
        for (const auto& sym : bpe(mapped)) {
            auto it = token_to_id_.find(sym);
            if (it == token_to_id_.end()) throw std::invalid_argument("tokenizer: symbol '" + sym + "' not in vocabulary");
            ids.push_back(it->second);
        }
    }
    return ids;
}

std::string BpeTokenizer::decode(std::span<const TokenId> ids) const {
    const auto& dec = byte_decoder();
    std::string out;
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size() || id_to_token_[id].empty()) {
            throw std::out_of_range("tokenizer: unknown token id " + std::to_string(id));
        }
        const std::string& tok = id_to_token_[id];
        for (const auto& cp : utf8_decode(tok)) {
            auto it = dec.find(tok.substr(cp.offset, cp.length));
            if (it == dec.end()) throw std::invalid_argument("tokenizer: token " + std::to_string(id) + " is not byte-level");
            out.push_back(static_cast<char>(it->second));
        }
    }
    return out;
}

std::optional<TokenId> BpeTokenizer::token_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
}

} // namespace enprobe
