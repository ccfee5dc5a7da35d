#include "enprobe/nano.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace enprobe::nano {

namespace {

struct Sampler {
    std::mt19937_64 rng;
    std::normal_distribution<float> normal{0.0f, 1.0f};

    explicit Sampler(std::uint64_t seed) : rng(seed) {}

    float operator()(float scale) { return scale * normal(rng); }

    Matrix matrix(std::size_t rows, std::size_t cols, float scale) {
        Matrix m(rows, cols);
        for (float& v : m.data) v = (*this)(scale);
        return m;
    }
    std::vector<float> vec(std::size_t n, float scale, float offset = 0.0f) {
        std::vector<float> v(n);
        for (float& x : v) x = offset + (*this)(scale);
        return v;
    }
};

// Two orthonormal directions orthogonal to the all-ones vector.
std::vector<std::vector<double>> weak_directions(Sampler& s, std::size_t d) {
    std::vector<std::vector<double>> basis;
    basis.push_back(std::vector<double>(d, 1.0 / std::sqrt(static_cast<double>(d))));
    while (basis.size() < 3) {
        std::vector<double> v(d);
        for (double& x : v) x = s(1.0f);
        for (const auto& b : basis) {
            double p = 0.0;
            for (std::size_t i = 0; i < d; ++i) p += v[i] * b[i];
            for (std::size_t i = 0; i < d; ++i) v[i] -= p * b[i];
        }
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        for (double& x : v) x /= n;
        basis.push_back(v);
    }
    return {basis[1], basis[2]};
}

const std::vector<std::string>& base_symbols() {
    static const std::vector<std::string> symbols = [] {
        std::vector<std::string> s = {"\xC4\xA0"}; // "Ġ", the byte-level image of ' '
        for (char c = 'a'; c <= 'z'; ++c) s.emplace_back(1, c);
        for (char c = 'A'; c <= 'Z'; ++c) s.emplace_back(1, c);
        s.emplace_back(".");
        s.emplace_back(",");
        return s;
    }();
    return symbols;
}

const std::vector<std::pair<std::string, std::string>>& merge_pairs() {
    static const std::vector<std::pair<std::string, std::string>> merges = {
        {"\xC4\xA0", "t"}, {"h", "e"}, {"\xC4\xA0t", "he"}, {"i", "n"}, {"e", "r"},
        {"a", "n"}, {"o", "n"}, {"\xC4\xA0", "a"}, {"\xC4\xA0", "o"},
    };
    return merges;
}

} // namespace

std::string vocab_json() {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    int id = 0;
    for (const auto& s : base_symbols()) j[s] = id++;
    for (const auto& [a, b] : merge_pairs()) j[a + b] = id++;
    return j.dump();
}

std::string merges_txt() {
    std::string out = "#version: 0.2\n";
    for (const auto& [a, b] : merge_pairs()) out += a + " " + b + "\n";
    return out;
}

Model make_model(std::uint64_t seed, const ModelConfig& config) {
    config.validate();
    Sampler s(seed);
    const std::size_t d = config.d_model;
    const std::size_t f = config.d_ffn;
    Model m;
    m.config = config;

    const auto weak = weak_directions(s, d);
    m.token_embedding = s.matrix(config.vocab_size, d, 0.6f);
    for (std::size_t t = 0; t < config.vocab_size; ++t) {
        auto row = m.token_embedding.row(t);
        for (const auto& u : weak) {
            double p = 0.0;
            for (std::size_t i = 0; i < d; ++i) p += row[i] * u[i];
            for (std::size_t i = 0; i < d; ++i) row[i] -= static_cast<float>(0.97 * p * u[i]);
        }
    }
    // '.' and ',' sit right after the letters in the nano vocabulary.
    if (config.vocab_size >= 55) {
        for (std::size_t t : {std::size_t{53}, std::size_t{54}})
            for (float& v : m.token_embedding.row(t)) v *= 0.1f;
    }
    m.position_embedding = s.matrix(config.max_positions, d, 0.1f);

    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.ln_attn = {s.vec(d, 0.1f, 1.0f), s.vec(d, 0.1f)};
        lw.attn.qkv = s.matrix(3 * d, d, 0.3f);
        lw.attn.qkv_bias = s.vec(3 * d, 0.05f);
        lw.attn.proj = s.matrix(d, d, 0.3f);
        lw.attn.proj_bias = s.vec(d, 0.05f);
        lw.ln_ffn = {s.vec(d, 0.1f, 1.0f), s.vec(d, 0.1f)};
        lw.ffn.w_in = s.matrix(f, d, 0.4f);
        lw.ffn.b_in = s.vec(f, 0.1f);
        if (config.activation == Activation::SwiGlu) {
            lw.ffn.w_gate = s.matrix(f, d, 0.4f);
            lw.ffn.b_gate = s.vec(f, 0.1f);
        }
        lw.ffn.w_out = s.matrix(d, f, 0.3f);
        lw.ffn.b_out = s.vec(d, 0.05f);
        m.layers.push_back(std::move(lw));
    }

    if (f > kPlantedNeuron) {
        FfnWeights& last = m.layers.back().ffn;
        for (std::size_t r = 0; r < d; ++r) last.w_out(r, kPlantedNeuron) = static_cast<float>(3.0 * weak[0][r] + 0.3 * weak[1][r]) + s(0.01f);
        last.b_in[kPlantedNeuron] = 1.0f;
    }

    m.ln_final = {s.vec(d, 0.02f, 1.0f), s.vec(d, 0.02f)};
    m.unembedding = m.token_embedding;
    m.unembedding_bias.assign(config.vocab_size, 0.0f);
    return m;
}

std::vector<FactTriplet> make_triplets(std::uint64_t seed, std::size_t count) {
    static const char* kTemplates[] = {"[S] is in [O]", "[S] has [O]", "[S] likes [O]", "[S] went to [O]"};
    static const std::string consonants = "bcdfgklmnprstvz";
    static const std::string vowels = "aeiou";
    std::mt19937_64 rng(seed);
    const auto pick = [&](const std::string& from) { return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)]; };
    const auto name = [&](std::size_t syllables) {
        std::string n;
        for (std::size_t i = 0; i < syllables; ++i) {
            n += pick(consonants);
            n += pick(vowels);
        }
        n[0] = static_cast<char>(n[0] - 'a' + 'A');
        return n;
    };

    std::vector<std::vector<std::string>> pools;
    for (std::size_t t = 0; t < std::size(kTemplates); ++t) {
        std::set<std::string> pool;
        while (pool.size() < 6) pool.insert(name(2));
        pools.emplace_back(pool.begin(), pool.end());
    }
    std::vector<FactTriplet> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t t = i % std::size(kTemplates);
        char id[32];
        std::snprintf(id, sizeof id, "nano-%03zu", i);
        out.push_back({id, name(2), kTemplates[t], pools[t]});
    }
    return out;
}

FixturePaths write_fixture(const std::filesystem::path& dir, std::uint64_t seed, std::size_t n_triplets) {
    std::filesystem::create_directories(dir);
    FixturePaths p{dir / "model.safetensors", dir / "vocab.json", dir / "merges.txt", dir / "facts.jsonl"};
    to_archive(make_model(seed)).write(p.weights);
    const auto write_text = [](const std::filesystem::path& path, const std::string& text) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        out << text;
    };
    write_text(p.vocab, vocab_json());
    write_text(p.merges, merges_txt());
    write_triplets_jsonl(p.dataset, make_triplets(seed + 1, n_triplets));
    return p;
}

} // namespace enprobe::nano
