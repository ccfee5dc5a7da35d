#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "enprobe/archive.hpp"
#include "enprobe/tensor.hpp"

namespace enprobe {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// GELU is the GPT-2 tanh approximation. SwiGLU stands in for the GLU family:
// hidden = silu(W_gate x + b_gate) * (W_in x + b_in), and the hooked vector is
// that elementwise product.
enum class Activation { Gelu, SwiGlu };

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t d_ffn = 0;
    std::size_t n_heads = 0;
    std::size_t vocab_size = 0;
    std::size_t max_positions = 0;
    Activation activation = Activation::Gelu;
    float layer_norm_epsilon = 1e-5f;

    // Throws std::invalid_argument naming the violated constraint.
    void validate() const;

    static ModelConfig gpt2_small();
    // 2 layers, d_model 16, d_ffn 64, vocab 64: the synthetic oracle-testing model.
    static ModelConfig nano();

    bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
    std::vector<float> gamma;
    std::vector<float> beta;
};

struct AttentionWeights {
    Matrix qkv; // 3*d_model x d_model, rows ordered [q | k | v]
    std::vector<float> qkv_bias;
    Matrix proj; // d_model x d_model
    std::vector<float> proj_bias;
};

struct FfnWeights {
    Matrix w_in; // d_ffn x d_model (up projection for SwiGLU)
    std::vector<float> b_in;
    Matrix w_gate; // d_ffn x d_model, SwiGLU only
    std::vector<float> b_gate;
    Matrix w_out; // d_model x d_ffn; column i is the neuron's output vector
    std::vector<float> b_out;
};

struct LayerWeights {
    LayerNormParams ln_attn;
    AttentionWeights attn;
    LayerNormParams ln_ffn;
    FfnWeights ffn;
};

struct Model {
    ModelConfig config;
    Matrix token_embedding;    // vocab x d_model
    Matrix position_embedding; // max_positions x d_model
    std::vector<LayerWeights> layers;
    LayerNormParams ln_final;
    Matrix unembedding;                  // vocab x d_model (W_U)
    std::vector<float> unembedding_bias; // vocab; zero unless a norm was folded in
    bool preprocessed = false;
};

// Loads a GPT-2 layout archive (an optional "transformer." name prefix is
// accepted). Throws LoadError naming a missing tensor or a shape mismatch.
Model load_model(const TensorArchive& archive, const ModelConfig& config);

// Infers counts from tensor shapes. The head count cannot be inferred from
// shapes: it is taken from metadata "n_heads" or `n_heads`.
ModelConfig infer_config(const TensorArchive& archive, std::optional<std::size_t> n_heads = std::nullopt);

// Writes a model back out in the same naming scheme.
TensorArchive to_archive(const Model& model);

enum class HookSite { FfnPostActivation };
enum class HookScope { AllPositions, FinalPosition };

struct NeuronReplacement {
    std::size_t neuron = 0;
    float value = 0.0f;
};

// Replaces selected entries of the post-nonlinearity FFN hidden vector of one
// layer, before the output projection.
struct HookPoint {
    HookSite site = HookSite::FfnPostActivation;
    std::size_t layer = 0;
    std::vector<NeuronReplacement> replacements;
    HookScope scope = HookScope::AllPositions;
};

void validate_hooks(const ModelConfig& config, std::span<const HookPoint> hooks);

// The hooks that also apply at positions whose logits are not read
// (FinalPosition hooks act only where the next token is decoded).
std::vector<HookPoint> all_position_hooks(std::span<const HookPoint> hooks);

struct ForwardResult {
    Matrix logits;                                // seq_len x vocab
    std::map<std::size_t, Matrix> ffn_activations; // layer -> seq_len x d_ffn, pre-replacement
};

// Uncached reference pass. Correctness of every faster path is defined by it.
ForwardResult forward(const Model& model, std::span<const TokenId> tokens, std::span<const HookPoint> hooks = {},
                      std::span<const std::size_t> capture_layers = {});

// Incremental decoder with a per-layer key/value cache. Each step produces
// bitwise the same logits as row `length()-1` of forward() on the full prefix.
class Decoder {
public:
    explicit Decoder(const Model& model);

    // Appends one token, applying `hooks` at this position, and returns its logits.
    // With want_logits = false the unembedding is skipped and logits() keeps
    // its previous contents (prompt prefill only needs the caches).
    std::span<const float> step(TokenId token, std::span<const HookPoint> hooks = {}, bool want_logits = true);

    std::size_t length() const { return length_; }
    std::span<const float> logits() const { return logits_; }

    // Residual stream of the newest position after the final layer's attention
    // block, i.e. the input to the final FFN sub-block.
    std::span<const float> final_mid_residual() const { return final_mid_; }

    // Post-activation FFN vector of the newest position for `layer` (pre-replacement).
    std::span<const float> ffn_activation(std::size_t layer) const;

private:
    const Model* model_;
    std::size_t length_ = 0;
    std::vector<std::vector<float>> qkv_cache_; // per layer, length_ rows of 3*d_model
    std::vector<std::vector<float>> activations_;
    std::vector<float> final_mid_;
    std::vector<float> logits_;
};

// Runs the final FFN sub-block, final norm and unembedding for one position
// given its residual after the final attention block. Shared by Decoder so
// replaying a cached residual reproduces the decoder bitwise. An empty `logits`
// span stops after the FFN activation.
void final_block_logits(const Model& model, std::span<const float> mid_residual, std::span<const HookPoint> hooks,
                        std::span<float> logits, std::span<float> activation_out = {});

// Row-batched final_block_logits; bitwise equal to calling it per row.
void final_block_logits_batch(const Model& model, const Matrix& mid_residuals, std::span<const HookPoint> hooks,
                              Matrix& logits);

// Lowest token id wins ties.
TokenId argmax(std::span<const float> logits);

struct Generation {
    TokenSequence tokens;           // new tokens only
    std::vector<float> first_logits; // distribution that produced tokens[0]
};

// Greedy decoding of up to `max_new` tokens. If `stop` is given it is called
// after each token and generation ends early when it returns true.
Generation greedy_generate_ex(const Model& model, std::span<const TokenId> prompt, std::size_t max_new,
                              std::span<const HookPoint> hooks = {},
                              const std::function<bool(const TokenSequence&)>& stop = {});

TokenSequence greedy_generate(const Model& model, std::span<const TokenId> prompt, std::size_t max_new,
                              std::span<const HookPoint> hooks = {});

// Natural-log entropy of softmax(logits), accumulated in double.
double softmax_entropy(std::span<const float> logits);
std::vector<double> softmax(std::span<const float> logits);

} // namespace enprobe
