#include "doctest.h"
#include "json.hpp"

#include <cmath>
#include <numeric>

#include "enprobe/archive.hpp"
#include "enprobe/model.hpp"
#include "enprobe/nano.hpp"
#include "helpers.hpp"

using namespace enprobe;
using testutil::max_abs_diff;

namespace {

struct Reference {
    nlohmann::json j;
    explicit Reference(const std::string& file) { j = nlohmann::json::parse(testutil::read_file(testutil::fixture(file))); }
};

Matrix to_matrix(const nlohmann::json& rows) {
    Matrix m(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = rows[r][c].get<float>();
    return m;
}

HookPoint fixture_hook(const nlohmann::json& h) {
    HookPoint hook;
    hook.layer = h["layer"].get<std::size_t>();
    for (std::size_t i = 0; i < h["neurons"].size(); ++i) {
        hook.replacements.push_back({h["neurons"][i].get<std::size_t>(), h["values"][i].get<float>()});
    }
    return hook;
}

void check_against_reference(const Model& model, const Reference& ref, float tol) {
    const HookPoint hook = fixture_hook(ref.j["hook"]);
    for (const auto& c : ref.j["cases"]) {
        const auto tokens = c["tokens"].get<TokenSequence>();
        CAPTURE(tokens.size());
        const ForwardResult plain = forward(model, tokens);
        CHECK(max_abs_diff(plain.logits.data, to_matrix(c["logits"]).data) < tol);

        const std::size_t layers[] = {hook.layer};
        const ForwardResult hooked = forward(model, tokens, std::span(&hook, 1), layers);
        CHECK(max_abs_diff(hooked.logits.data, to_matrix(c["hooked_logits"]).data) < tol);
        // Captured activations are the values before replacement.
        CHECK(max_abs_diff(hooked.ffn_activations.at(hook.layer).data, to_matrix(c["activations"]).data) < tol);

        if (c.contains("greedy")) {
            CHECK(greedy_generate(model, tokens, c["greedy"].size()) == c["greedy"].get<TokenSequence>());
            CHECK(greedy_generate(model, tokens, c["hooked_greedy"].size(), std::span(&hook, 1)) ==
                  c["hooked_greedy"].get<TokenSequence>());
        }
    }
}

Model nano_model(std::uint64_t seed = 3) { return nano::make_model(seed); }

} // namespace

TEST_SUITE("model-runtime") {

TEST_CASE("tiny GPT-2 matches the Hugging Face reference") {
    const TensorArchive archive = TensorArchive::read(testutil::fixture("tiny_gpt2.safetensors"));
    const ModelConfig cfg = infer_config(archive);
    CHECK(cfg.n_layers == 2);
    CHECK(cfg.d_model == 32);
    CHECK(cfg.d_ffn == 128);
    CHECK(cfg.n_heads == 4);
    CHECK(cfg.vocab_size == 64);
    CHECK(cfg.max_positions == 32);
    check_against_reference(load_model(archive, cfg), Reference("tiny_gpt2_reference.json"), 2e-5f);
}

TEST_CASE("16-bit archives are upcast on load") {
    const TensorArchive archive = TensorArchive::read(testutil::fixture("tiny_gpt2_f16.safetensors"));
    CHECK(archive.at("h.0.mlp.c_fc.weight").stored == DType::F16);
    check_against_reference(load_model(archive, infer_config(archive)), Reference("tiny_gpt2_f16_reference.json"), 2e-5f);
}

TEST_CASE("GPT-2-small configuration") {
    const ModelConfig c = ModelConfig::gpt2_small();
    CHECK(c.n_layers == 12);
    CHECK(c.d_model == 768);
    CHECK(c.d_ffn == 3072);
    CHECK(c.vocab_size == 50257);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config invariants are enforced") {
    ModelConfig c = ModelConfig::nano();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig::nano();
    c.d_ffn = 8;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig::nano();
    c.vocab_size = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig::nano();
    c.n_layers = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("load errors name the tensor") {
    TensorArchive archive = to_archive(nano_model());
    SUBCASE("missing final-layer output projection") {
        archive.erase("h.1.mlp.c_proj.weight");
        try {
            load_model(archive, ModelConfig::nano());
            FAIL("expected a load error");
        } catch (const LoadError& e) {
            CHECK(std::string(e.what()).find("h.1.mlp.c_proj.weight") != std::string::npos);
        }
    }
    SUBCASE("shape mismatch reports expected and actual") {
        archive.insert("ln_f.weight", {3}, {1.0f, 1.0f, 1.0f});
        try {
            load_model(archive, ModelConfig::nano());
            FAIL("expected a load error");
        } catch (const LoadError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("ln_f.weight") != std::string::npos);
            CHECK(msg.find("[16]") != std::string::npos);
            CHECK(msg.find("[3]") != std::string::npos);
        }
    }
    SUBCASE("head count must come from somewhere") {
        archive.metadata.erase("n_heads");
        CHECK_THROWS_AS(infer_config(archive), LoadError);
        CHECK(infer_config(archive, 4).n_heads == 4);
    }
}

TEST_CASE("nano archive round trip") {
    const Model m = nano_model();
    testutil::TempDir dir("model");
    to_archive(m).write(dir / "m.safetensors");
    const TensorArchive a = TensorArchive::read(dir / "m.safetensors");
    const ModelConfig cfg = infer_config(a);
    CHECK(cfg == m.config);
    const Model back = load_model(a, cfg);
    const TokenSequence t = {1, 2, 3, 4};
    CHECK(forward(back, t).logits == forward(m, t).logits);
}

TEST_CASE("logit shape and softmax normalization") {
    const Model m = nano_model();
    std::mt19937_64 rng(5);
    const auto tokens = testutil::random_tokens(rng, 12, m.config.vocab_size);
    const ForwardResult r = forward(m, tokens);
    CHECK(r.logits.rows == 12);
    CHECK(r.logits.cols == 64);
    for (std::size_t p = 0; p < r.logits.rows; ++p) {
        const auto probs = softmax(r.logits.row(p));
        CHECK(std::abs(std::accumulate(probs.begin(), probs.end(), 0.0) - 1.0) < 1e-6);
    }
}

TEST_CASE("zeroing every final-layer neuron with zero output bias removes the FFN contribution") {
    Model m = nano_model();
    const std::size_t last = m.config.n_layers - 1;
    std::fill(m.layers[last].ffn.b_out.begin(), m.layers[last].ffn.b_out.end(), 0.0f);
    HookPoint zero{.layer = last};
    for (std::size_t i = 0; i < m.config.d_ffn; ++i) zero.replacements.push_back({i, 0.0f});

    Model no_ffn = m;
    std::fill(no_ffn.layers[last].ffn.w_out.data.begin(), no_ffn.layers[last].ffn.w_out.data.end(), 0.0f);
    const TokenSequence t = {7, 8, 9, 10, 11};
    CHECK(forward(m, t, std::span(&zero, 1)).logits == forward(no_ffn, t).logits);
}

TEST_CASE("replacing a neuron with its own captured value is a no-op") {
    const Model m = nano_model();
    std::mt19937_64 rng(11);
    const auto tokens = testutil::random_tokens(rng, 10, m.config.vocab_size);
    for (std::size_t layer = 0; layer < m.config.n_layers; ++layer) {
        const std::size_t layers[] = {layer};
        const ForwardResult base = forward(m, tokens, {}, layers);
        const Matrix& acts = base.ffn_activations.at(layer);
        Decoder dec(m);
        for (std::size_t p = 0; p < tokens.size(); ++p) {
            HookPoint self{.layer = layer};
            for (std::size_t i = 0; i < m.config.d_ffn; i += 3) self.replacements.push_back({i, acts(p, i)});
            const auto logits = dec.step(tokens[p], std::span(&self, 1));
            CHECK(max_abs_diff(logits, base.logits.row(p)) <= 1e-6f);
        }
    }
}

TEST_CASE("causal masking: future tokens do not affect earlier logits") {
    const Model m = nano_model();
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = testutil::random_tokens(rng, 16, m.config.vocab_size);
        auto b = a;
        const std::size_t p = trial % 15;
        for (std::size_t i = p + 1; i < b.size(); ++i) b[i] = (b[i] + 1 + trial) % 64;
        const auto la = forward(m, a).logits;
        const auto lb = forward(m, b).logits;
        for (std::size_t i = 0; i <= p; ++i) CHECK(max_abs_diff(la.row(i), lb.row(i)) == 0.0f);
    }
}

TEST_CASE("incremental decoder reproduces the full pass bitwise") {
    const Model m = nano_model();
    std::mt19937_64 rng(23);
    const auto tokens = testutil::random_tokens(rng, 20, m.config.vocab_size);
    HookPoint hook{.layer = 1, .replacements = {{4, 0.25f}, {60, -1.0f}}};
    const ForwardResult full = forward(m, tokens, std::span(&hook, 1));
    Decoder dec(m);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const auto logits = dec.step(tokens[p], std::span(&hook, 1));
        CHECK(std::equal(logits.begin(), logits.end(), full.logits.row(p).begin()));
    }
}

TEST_CASE("batched final-block replay equals the single-row path bitwise") {
    const Model m = nano_model();
    std::mt19937_64 rng(29);
    Matrix mids = testutil::random_matrix(rng, 9, m.config.d_model);
    HookPoint hook{.layer = 1, .replacements = {{nano::kPlantedNeuron, 0.5f}}};
    Matrix batch;
    final_block_logits_batch(m, mids, std::span(&hook, 1), batch);
    std::vector<float> one(m.config.vocab_size);
    for (std::size_t r = 0; r < mids.rows; ++r) {
        final_block_logits(m, mids.row(r), std::span(&hook, 1), one);
        CHECK(std::equal(one.begin(), one.end(), batch.row(r).begin()));
    }
}

TEST_CASE("final-position hooks act only where the next token is read") {
    const Model m = nano_model();
    const TokenSequence prompt = {3, 4, 5, 6};
    HookPoint all{.layer = 1, .replacements = {{nano::kPlantedNeuron, 5.0f}}};
    HookPoint final_only = all;
    final_only.scope = HookScope::FinalPosition;
    CHECK(all_position_hooks(std::span(&final_only, 1)).empty());
    CHECK(all_position_hooks(std::span(&all, 1)).size() == 1);

    // Oracle: prefix without the hook, the read position with it.
    const Generation g = greedy_generate_ex(m, prompt, 1, std::span(&final_only, 1));
    Decoder dec(m);
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) dec.step(prompt[i]);
    const auto logits = dec.step(prompt.back(), std::span(&all, 1));
    CHECK(std::equal(logits.begin(), logits.end(), g.first_logits.begin()));
}

TEST_CASE("greedy decoding follows a forced argmax") {
    Model m = nano_model();
    std::fill(m.unembedding.data.begin(), m.unembedding.data.end(), 0.0f);
    m.unembedding_bias.assign(m.config.vocab_size, 0.0f);
    SUBCASE("constant logits favoring token 3") {
        m.unembedding_bias[3] = 1.0f;
        CHECK(greedy_generate(m, TokenSequence{1, 2}, 5) == TokenSequence(5, 3));
    }
    SUBCASE("uniform logits: lowest id wins, entropy is ln V") {
        const auto g = greedy_generate_ex(m, TokenSequence{9}, 3);
        CHECK(g.tokens == TokenSequence(3, 0));
        CHECK(softmax_entropy(g.first_logits) == doctest::Approx(std::log(64.0)).epsilon(1e-12));
    }
}

TEST_CASE("determinism of forward and generation") {
    const Model m = nano_model();
    const TokenSequence t = {5, 6, 7, 8, 9};
    CHECK(forward(m, t).logits == forward(m, t).logits);
    CHECK(greedy_generate(m, t, 10) == greedy_generate(m, t, 10));
}

TEST_CASE("runtime preconditions") {
    const Model m = nano_model();
    CHECK_THROWS_AS(forward(m, TokenSequence{}), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, TokenSequence(65, 1)), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, TokenSequence{64}), std::out_of_range);
    CHECK_THROWS_AS(greedy_generate(m, TokenSequence{1}, 0), std::invalid_argument);
    CHECK_THROWS_AS(greedy_generate(m, TokenSequence(60, 1), 5), std::invalid_argument);
    HookPoint bad_layer{.layer = 2, .replacements = {{0, 0.0f}}};
    CHECK_THROWS_AS(forward(m, TokenSequence{1}, std::span(&bad_layer, 1)), std::out_of_range);
    HookPoint bad_neuron{.layer = 0, .replacements = {{64, 0.0f}}};
    CHECK_THROWS_AS(forward(m, TokenSequence{1}, std::span(&bad_neuron, 1)), std::out_of_range);
}

TEST_CASE("SwiGLU feed-forward hooks the gated product") {
    ModelConfig cfg = ModelConfig::nano();
    cfg.activation = Activation::SwiGlu;
    const Model m = nano::make_model(4, cfg);
    const std::size_t layers[] = {0};
    const TokenSequence t = {1, 2, 3};
    const ForwardResult r = forward(m, t, {}, layers);
    Decoder dec(m);
    dec.step(t[0]);
    const auto act = dec.ffn_activation(0);
    CHECK(act[5] == r.ffn_activations.at(0)(0, 5));

    // With the gate weights zeroed and the gate bias at 0, silu(0) = 0 kills every neuron.
    Model gated = m;
    std::fill(gated.layers[0].ffn.w_gate.data.begin(), gated.layers[0].ffn.w_gate.data.end(), 0.0f);
    std::fill(gated.layers[0].ffn.b_gate.begin(), gated.layers[0].ffn.b_gate.end(), 0.0f);
    const ForwardResult z = forward(gated, t, {}, layers);
    for (float v : z.ffn_activations.at(0).data) CHECK(v == 0.0f);

    testutil::TempDir dir("swiglu");
    to_archive(m).write(dir / "m.safetensors");
    const TensorArchive a = TensorArchive::read(dir / "m.safetensors");
    CHECK(infer_config(a).activation == Activation::SwiGlu);
    CHECK(forward(load_model(a, infer_config(a)), t).logits == r.logits);
}

} // TEST_SUITE
