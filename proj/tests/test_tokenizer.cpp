#include "doctest.h"
#include "json.hpp"

#include <random>

#include "enprobe/archive.hpp"
#include "enprobe/nano.hpp"
#include "enprobe/tokenizer.hpp"
#include "helpers.hpp"

using namespace enprobe;

namespace {

const BpeTokenizer& gpt2() {
    static const BpeTokenizer tok = BpeTokenizer::from_files(testutil::data("gpt2/vocab.json"), testutil::data("gpt2/merges.txt"));
    return tok;
}

// Random valid UTF-8 drawn from a mix of ASCII, Latin, CJK, emoji and whitespace.
std::string random_utf8(std::mt19937_64& rng) {
    static const char32_t ranges[][2] = {{0x20, 0x7e}, {0x09, 0x0d}, {0xa0, 0x24f}, {0x370, 0x3ff},
                                         {0x4e00, 0x4fff}, {0x1f300, 0x1f64f}, {0x30, 0x39}};
    std::uniform_int_distribution<std::size_t> len(0, 40);
    std::uniform_int_distribution<std::size_t> pick(0, std::size(ranges) - 1);
    std::string out;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = ranges[pick(rng)];
        const char32_t cp = std::uniform_int_distribution<char32_t>(r[0], r[1])(rng);
        if (cp < 0x80) {
            out += static_cast<char>(cp);
        } else if (cp < 0x800) {
            out += static_cast<char>(0xc0 | (cp >> 6));
            out += static_cast<char>(0x80 | (cp & 0x3f));
        } else if (cp < 0x10000) {
            out += static_cast<char>(0xe0 | (cp >> 12));
            out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
            out += static_cast<char>(0x80 | (cp & 0x3f));
        } else {
            out += static_cast<char>(0xf0 | (cp >> 18));
            out += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
            out += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
            out += static_cast<char>(0x80 | (cp & 0x3f));
        }
    }
    return out;
}

} // namespace

TEST_SUITE("model-runtime") {

TEST_CASE("GPT-2 vocabulary mapping") {
    CHECK(gpt2().vocab_size() == 50257);
    CHECK(gpt2().encode("Paris") == TokenSequence{40313});
    CHECK(gpt2().encode(" Paris") == TokenSequence{6342});
    CHECK(gpt2().encode("").empty());
    CHECK(gpt2().decode(TokenSequence{}).empty());
}

TEST_CASE("tokenizer matches the reference byte-level BPE on fixtures") {
    const auto cases = nlohmann::json::parse(testutil::read_file(testutil::fixture("tokenizer_cases.json")));
    REQUIRE(cases.size() >= 10);
    for (const auto& c : cases) {
        const std::string text = c["text"].get<std::string>();
        CAPTURE(text);
        CHECK(gpt2().encode(text) == c["ids"].get<TokenSequence>());
        CHECK(gpt2().decode(c["ids"].get<TokenSequence>()) == text);
    }
}

TEST_CASE("round trip on 100 random UTF-8 strings") {
    std::mt19937_64 rng(2024);
    for (int i = 0; i < 100; ++i) {
        const std::string s = random_utf8(rng);
        CAPTURE(s);
        CHECK(gpt2().decode(gpt2().encode(s)) == s);
    }
}

TEST_CASE("pre-tokenizer splits like the GPT-2 pattern") {
    CHECK(pretokenize("Hello world") == std::vector<std::string>{"Hello", " world"});
    CHECK(pretokenize("it's 42!") == std::vector<std::string>{"it", "'s", " 42", "!"});
    CHECK(pretokenize("a  b") == std::vector<std::string>{"a", " ", " b"});
    CHECK(pretokenize("x \n") == std::vector<std::string>{"x", " \n"});
    CHECK_THROWS_AS(pretokenize("\xff"), std::invalid_argument);
}

TEST_CASE("nano vocabulary") {
    const auto tok = BpeTokenizer::from_strings(nano::vocab_json(), nano::merges_txt());
    CHECK(tok.vocab_size() == 64);
    CHECK(tok.encode(" the") == TokenSequence{*tok.token_id("\xC4\xA0the")});
    CHECK(tok.decode(tok.encode("Kora went to Lima.")) == "Kora went to Lima.");
    CHECK_THROWS(tok.encode("#"));
}

TEST_CASE("malformed tokenizer files are load errors") {
    CHECK_THROWS_AS(BpeTokenizer::from_strings("{\"a\": 0}", "#version: 0.2\na b c\n"), LoadError);
    CHECK_THROWS_AS(BpeTokenizer::from_strings("not json", ""), LoadError);
    CHECK_THROWS_AS(BpeTokenizer::from_strings("{}", ""), LoadError);
    CHECK_THROWS_AS(BpeTokenizer::from_files("/nonexistent/vocab.json", "/nonexistent/merges.txt"), LoadError);
}

} // TEST_SUITE

TEST_SUITE("archive") {

TEST_CASE("archive round trip in every storage dtype") {
    TensorArchive a;
    a.insert("x", {2, 3}, {0.0f, 1.0f, -2.5f, 0.333251953125f, 65504.0f, -1e-3f});
    a.insert("b", {1}, {7.0f});
    a.metadata["note"] = "hi";
    for (DType dt : {DType::F32, DType::F16, DType::BF16}) {
        CAPTURE(dtype_name(dt));
        const auto bytes = a.serialize(dt);
        const TensorArchive back = TensorArchive::parse(bytes);
        CHECK(back.names() == std::vector<std::string>{"b", "x"});
        CHECK(back.metadata.at("note") == "hi");
        CHECK(back.at("x").stored == dt);
        CHECK(back.at("x").shape == std::vector<std::size_t>{2, 3});
        const auto& v = back.at("x").values;
        const float tol = dt == DType::F32 ? 0.0f : dt == DType::F16 ? 1e-3f : 1e-2f;
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(v[i] - a.at("x").values[i]) <= tol * std::max(1.0f, std::abs(a.at("x").values[i])));
    }
}

TEST_CASE("half-precision conversion") {
    CHECK(half_to_float(0x3c00) == 1.0f);
    CHECK(half_to_float(0xc000) == -2.0f);
    CHECK(half_to_float(0x7bff) == 65504.0f);
    CHECK(half_to_float(0x0001) == doctest::Approx(5.960464477539063e-8));
    CHECK(std::isinf(half_to_float(0x7c00)));
    for (std::uint32_t h = 0; h < 0x7c00; h += 7) {
        CHECK(float_to_half(half_to_float(static_cast<std::uint16_t>(h))) == h);
    }
    CHECK(bf16_to_float(float_to_bf16(1.5f)) == 1.5f);
}

TEST_CASE("malformed archives are rejected") {
    TensorArchive a;
    a.insert("x", {2}, {1.0f, 2.0f});
    auto bytes = a.serialize();
    SUBCASE("truncated header length") {
        std::vector<std::uint8_t> b(bytes.begin(), bytes.begin() + 4);
        CHECK_THROWS_AS(TensorArchive::parse(b), LoadError);
    }
    SUBCASE("header longer than file") {
        bytes[0] = 0xff;
        bytes[1] = 0xff;
        CHECK_THROWS_AS(TensorArchive::parse(bytes), LoadError);
    }
    SUBCASE("data region truncated") {
        bytes.pop_back();
        CHECK_THROWS_AS(TensorArchive::parse(bytes), LoadError);
    }
    SUBCASE("unsupported dtype") {
        std::string s(bytes.begin(), bytes.end());
        const auto pos = s.find("F32");
        REQUIRE(pos != std::string::npos);
        s.replace(pos, 3, "I32");
        CHECK_THROWS_AS(TensorArchive::parse(std::vector<std::uint8_t>(s.begin(), s.end())), LoadError);
    }
    SUBCASE("missing tensor lookup") { CHECK_THROWS_AS(a.at("y"), LoadError); }
    SUBCASE("unreadable file") { CHECK_THROWS_AS(TensorArchive::read("/nonexistent.safetensors"), LoadError); }
}

} // TEST_SUITE
