#include "enprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "enprobe/kernels.hpp"

namespace enprobe {

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || d_ffn < 1 || n_heads < 1 || vocab_size < 1 || max_positions < 1) {
        throw std::invalid_argument("model config: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    if (d_ffn < d_model) throw std::invalid_argument("model config: d_ffn must be >= d_model");
    if (vocab_size < 2) throw std::invalid_argument("model config: vocab_size must be >= 2");
    if (!(layer_norm_epsilon > 0.0f)) throw std::invalid_argument("model config: layer_norm_epsilon must be positive");
}

ModelConfig ModelConfig::gpt2_small() {
    return {.n_layers = 12, .d_model = 768, .d_ffn = 3072, .n_heads = 12, .vocab_size = 50257, .max_positions = 1024};
}

ModelConfig ModelConfig::nano() {
    return {.n_layers = 2, .d_model = 16, .d_ffn = 64, .n_heads = 2, .vocab_size = 64, .max_positions = 64};
}

// ---------------------------------------------------------------- loading

namespace {

std::string resolve_name(const TensorArchive& a, const std::string& name) {
    if (a.contains(name)) return name;
    if (a.contains("transformer." + name)) return "transformer." + name;
    return name; // at() reports it as missing
}

const TensorEntry& fetch(const TensorArchive& a, const std::string& name, std::vector<std::size_t> shape) {
    const TensorEntry& e = a.at(resolve_name(a, name));
    if (e.shape != shape) {
        auto fmt = [](const std::vector<std::size_t>& s) {
            std::string out = "[";
            for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
            return out + "]";
        };
        throw LoadError("tensor '" + name + "': expected shape " + fmt(shape) + ", got " + fmt(e.shape));
    }
    return e;
}

std::vector<float> fetch_vec(const TensorArchive& a, const std::string& name, std::size_t n) {
    return fetch(a, name, {n}).values;
}

Matrix fetch_matrix(const TensorArchive& a, const std::string& name, std::size_t rows, std::size_t cols) {
    Matrix m;
    m.rows = rows;
    m.cols = cols;
    m.data = fetch(a, name, {rows, cols}).values;
    return m;
}

// GPT-2 stores Conv1D weights as (in, out); the runtime keeps (out, in).
Matrix fetch_conv1d(const TensorArchive& a, const std::string& name, std::size_t in, std::size_t out) {
    return fetch_matrix(a, name, in, out).transposed();
}

LayerNormParams fetch_ln(const TensorArchive& a, const std::string& prefix, std::size_t d) {
    return {fetch_vec(a, prefix + ".weight", d), fetch_vec(a, prefix + ".bias", d)};
}

} // namespace

Model load_model(const TensorArchive& archive, const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t f = config.d_ffn;
    Model m;
    m.config = config;
    m.token_embedding = fetch_matrix(archive, "wte.weight", config.vocab_size, d);
    m.position_embedding = fetch_matrix(archive, "wpe.weight", config.max_positions, d);
    m.layers.resize(config.n_layers);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::string p = "h." + std::to_string(l) + ".";
        LayerWeights& lw = m.layers[l];
        lw.ln_attn = fetch_ln(archive, p + "ln_1", d);
        lw.attn.qkv = fetch_conv1d(archive, p + "attn.c_attn.weight", d, 3 * d);
        lw.attn.qkv_bias = fetch_vec(archive, p + "attn.c_attn.bias", 3 * d);
        lw.attn.proj = fetch_conv1d(archive, p + "attn.c_proj.weight", d, d);
        lw.attn.proj_bias = fetch_vec(archive, p + "attn.c_proj.bias", d);
        lw.ln_ffn = fetch_ln(archive, p + "ln_2", d);
        lw.ffn.w_in = fetch_conv1d(archive, p + "mlp.c_fc.weight", d, f);
        lw.ffn.b_in = fetch_vec(archive, p + "mlp.c_fc.bias", f);
        if (config.activation == Activation::SwiGlu) {
            lw.ffn.w_gate = fetch_conv1d(archive, p + "mlp.c_gate.weight", d, f);
            lw.ffn.b_gate = fetch_vec(archive, p + "mlp.c_gate.bias", f);
        }
        lw.ffn.w_out = fetch_conv1d(archive, p + "mlp.c_proj.weight", f, d);
        lw.ffn.b_out = fetch_vec(archive, p + "mlp.c_proj.bias", d);
    }
    m.ln_final = fetch_ln(archive, "ln_f", d);
    const bool untied = archive.contains("lm_head.weight");
    m.unembedding = untied ? fetch_matrix(archive, "lm_head.weight", config.vocab_size, d) : m.token_embedding;
    m.unembedding_bias = archive.contains("lm_head.bias") ? fetch_vec(archive, "lm_head.bias", config.vocab_size)
                                                          : std::vector<float>(config.vocab_size, 0.0f);
    if (auto it = archive.metadata.find("preprocessed"); it != archive.metadata.end()) m.preprocessed = it->second == "true";
    return m;
}

ModelConfig infer_config(const TensorArchive& archive, std::optional<std::size_t> n_heads) {
    ModelConfig c;
    const auto& wte = archive.at(resolve_name(archive, "wte.weight"));
    const auto& wpe = archive.at(resolve_name(archive, "wpe.weight"));
    if (wte.shape.size() != 2 || wpe.shape.size() != 2) throw LoadError("embeddings must be 2-D");
    c.vocab_size = wte.shape[0];
    c.d_model = wte.shape[1];
    c.max_positions = wpe.shape[0];
    while (archive.contains(resolve_name(archive, "h." + std::to_string(c.n_layers) + ".mlp.c_fc.weight"))) ++c.n_layers;
    if (c.n_layers == 0) throw LoadError("missing tensor 'h.0.mlp.c_fc.weight'");
    c.d_ffn = archive.at(resolve_name(archive, "h.0.mlp.c_fc.weight")).shape.at(1);
    c.activation = archive.contains(resolve_name(archive, "h.0.mlp.c_gate.weight")) ? Activation::SwiGlu : Activation::Gelu;
    if (n_heads) {
        c.n_heads = *n_heads;
    } else if (auto it = archive.metadata.find("n_heads"); it != archive.metadata.end()) {
        c.n_heads = std::stoul(it->second);
    } else {
        throw LoadError("head count not recorded in archive metadata; pass it explicitly");
    }
    if (auto it = archive.metadata.find("layer_norm_epsilon"); it != archive.metadata.end()) {
        c.layer_norm_epsilon = std::stof(it->second);
    }
    c.validate();
    return c;
}

TensorArchive to_archive(const Model& m) {
    TensorArchive a;
    const auto& c = m.config;
    auto put_matrix = [&](const std::string& name, const Matrix& x) { a.insert(name, {x.rows, x.cols}, x.data); };
    auto put_conv1d = [&](const std::string& name, const Matrix& x) { put_matrix(name, x.transposed()); };
    auto put_vec = [&](const std::string& name, const std::vector<float>& v) { a.insert(name, {v.size()}, v); };
    put_matrix("wte.weight", m.token_embedding);
    put_matrix("wpe.weight", m.position_embedding);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "h." + std::to_string(l) + ".";
        const LayerWeights& lw = m.layers[l];
        put_vec(p + "ln_1.weight", lw.ln_attn.gamma);
        put_vec(p + "ln_1.bias", lw.ln_attn.beta);
        put_conv1d(p + "attn.c_attn.weight", lw.attn.qkv);
        put_vec(p + "attn.c_attn.bias", lw.attn.qkv_bias);
        put_conv1d(p + "attn.c_proj.weight", lw.attn.proj);
        put_vec(p + "attn.c_proj.bias", lw.attn.proj_bias);
        put_vec(p + "ln_2.weight", lw.ln_ffn.gamma);
        put_vec(p + "ln_2.bias", lw.ln_ffn.beta);
        put_conv1d(p + "mlp.c_fc.weight", lw.ffn.w_in);
        put_vec(p + "mlp.c_fc.bias", lw.ffn.b_in);
        if (c.activation == Activation::SwiGlu) {
            put_conv1d(p + "mlp.c_gate.weight", lw.ffn.w_gate);
            put_vec(p + "mlp.c_gate.bias", lw.ffn.b_gate);
        }
        put_conv1d(p + "mlp.c_proj.weight", lw.ffn.w_out);
        put_vec(p + "mlp.c_proj.bias", lw.ffn.b_out);
    }
    put_vec("ln_f.weight", m.ln_final.gamma);
    put_vec("ln_f.bias", m.ln_final.beta);
    if (m.unembedding != m.token_embedding) put_matrix("lm_head.weight", m.unembedding);
    if (std::any_of(m.unembedding_bias.begin(), m.unembedding_bias.end(), [](float v) { return v != 0.0f; })) {
        put_vec("lm_head.bias", m.unembedding_bias);
    }
    a.metadata["n_heads"] = std::to_string(c.n_heads);
    a.metadata["layer_norm_epsilon"] = std::to_string(c.layer_norm_epsilon);
    a.metadata["preprocessed"] = m.preprocessed ? "true" : "false";
    return a;
}

// ---------------------------------------------------------------- hooks

void validate_hooks(const ModelConfig& config, std::span<const HookPoint> hooks) {
    for (const auto& h : hooks) {
        if (h.layer >= config.n_layers) {
            throw std::out_of_range("hook layer " + std::to_string(h.layer) + " >= n_layers " +
                                    std::to_string(config.n_layers));
        }
        for (const auto& r : h.replacements) {
            if (r.neuron >= config.d_ffn) {
                throw std::out_of_range("hook neuron " + std::to_string(r.neuron) + " >= d_ffn " +
                                        std::to_string(config.d_ffn));
            }
        }
    }
}

// ---------------------------------------------------------------- row kernels

namespace {

void layer_norm_row(const float* x, const LayerNormParams& p, float eps, std::size_t d, float* out) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double c = x[i] - mean;
        var += c * c;
    }
    var /= static_cast<double>(d);
    const float m = static_cast<float>(mean);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - m) * inv * p.gamma[i] + p.beta[i];
}

inline float gelu(float x) {
    constexpr float kSqrt2OverPi = 0.7978845608028654f;
    return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

void activate_row(Activation act, const float* pre, const float* gate, std::size_t n, float* out) {
    if (act == Activation::Gelu) {
        for (std::size_t i = 0; i < n; ++i) out[i] = gelu(pre[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = silu(gate[i]) * pre[i];
    }
}

// Causal attention for one query row over keys [0, n_keys). `qkv` points at
// row 0 of a buffer whose rows are [q | k | v] with the given stride.
void attend_row(const float* q, const float* qkv, std::size_t stride, std::size_t n_keys, std::size_t n_heads,
                std::size_t d_model, float* out, std::vector<float>& scores) {
    const std::size_t dh = d_model / n_heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    scores.resize(n_keys);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const float* qh = q + h * dh;
        float mx = -INFINITY;
        for (std::size_t s = 0; s < n_keys; ++s) {
            scores[s] = kernels::dot(qh, qkv + s * stride + d_model + h * dh, dh) * scale;
            mx = std::max(mx, scores[s]);
        }
        float sum = 0.0f;
        for (std::size_t s = 0; s < n_keys; ++s) {
            scores[s] = std::exp(scores[s] - mx);
            sum += scores[s];
        }
        float* oh = out + h * dh;
        std::fill(oh, oh + dh, 0.0f);
        for (std::size_t s = 0; s < n_keys; ++s) {
            const float p = scores[s] / sum;
            const float* vs = qkv + s * stride + 2 * d_model + h * dh;
            for (std::size_t c = 0; c < dh; ++c) oh[c] += p * vs[c];
        }
    }
}

void apply_replacements(const HookPoint& h, float* act) {
    for (const auto& r : h.replacements) act[r.neuron] = r.value;
}

} // namespace

std::vector<HookPoint> all_position_hooks(std::span<const HookPoint> hooks) {
    std::vector<HookPoint> out;
    for (const auto& h : hooks) {
        if (h.scope == HookScope::AllPositions) out.push_back(h);
    }
    return out;
}

// ---------------------------------------------------------------- forward

ForwardResult forward(const Model& model, std::span<const TokenId> tokens, std::span<const HookPoint> hooks,
                      std::span<const std::size_t> capture_layers) {
    const ModelConfig& c = model.config;
    const std::size_t T = tokens.size();
    if (T == 0) throw std::invalid_argument("forward: empty token sequence");
    if (T > c.max_positions) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(T) + " exceeds max_positions " +
                                    std::to_string(c.max_positions));
    }
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
            throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary");
        }
    }
    validate_hooks(c, hooks);
    for (std::size_t l : capture_layers) {
        if (l >= c.n_layers) throw std::out_of_range("forward: capture layer out of range");
    }

    const std::size_t d = c.d_model;
    const std::size_t f = c.d_ffn;
    Matrix x(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        const auto te = model.token_embedding.row(static_cast<std::size_t>(tokens[t]));
        const auto pe = model.position_embedding.row(t);
        for (std::size_t i = 0; i < d; ++i) x(t, i) = te[i] + pe[i];
    }

    ForwardResult result;
    Matrix h(T, d), qkv(T, 3 * d), att(T, d), proj(T, d), pre(T, f), gate, act(T, f), out(T, d);
    if (c.activation == Activation::SwiGlu) gate = Matrix(T, f);
    std::vector<float> scores;

    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const LayerWeights& lw = model.layers[l];
        for (std::size_t t = 0; t < T; ++t) layer_norm_row(x.row(t).data(), lw.ln_attn, c.layer_norm_epsilon, d, h.row(t).data());
        kernels::linear(h, lw.attn.qkv, lw.attn.qkv_bias, qkv);
        for (std::size_t t = 0; t < T; ++t) {
            attend_row(qkv.row(t).data(), qkv.data.data(), 3 * d, t + 1, c.n_heads, d, att.row(t).data(), scores);
        }
        kernels::linear(att, lw.attn.proj, lw.attn.proj_bias, proj);
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += proj.data[i];

        for (std::size_t t = 0; t < T; ++t) layer_norm_row(x.row(t).data(), lw.ln_ffn, c.layer_norm_epsilon, d, h.row(t).data());
        kernels::linear(h, lw.ffn.w_in, lw.ffn.b_in, pre);
        if (c.activation == Activation::SwiGlu) kernels::linear(h, lw.ffn.w_gate, lw.ffn.b_gate, gate);
        for (std::size_t t = 0; t < T; ++t) {
            activate_row(c.activation, pre.row(t).data(), gate.empty() ? nullptr : gate.row(t).data(), f, act.row(t).data());
        }
        if (std::find(capture_layers.begin(), capture_layers.end(), l) != capture_layers.end()) result.ffn_activations[l] = act;
        for (const auto& hook : hooks) {
            if (hook.layer != l) continue;
            if (hook.scope == HookScope::AllPositions) {
                for (std::size_t t = 0; t < T; ++t) apply_replacements(hook, act.row(t).data());
            } else {
                apply_replacements(hook, act.row(T - 1).data());
            }
        }
        kernels::linear(act, lw.ffn.w_out, lw.ffn.b_out, out);
        for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += out.data[i];
    }

    for (std::size_t t = 0; t < T; ++t) layer_norm_row(x.row(t).data(), model.ln_final, c.layer_norm_epsilon, d, h.row(t).data());
    result.logits = Matrix(T, c.vocab_size);
    kernels::linear(h, model.unembedding, model.unembedding_bias, result.logits);
    return result;
}

// ---------------------------------------------------------------- decoder

Decoder::Decoder(const Model& model)
    : model_(&model), qkv_cache_(model.config.n_layers), activations_(model.config.n_layers),
      final_mid_(model.config.d_model), logits_(model.config.vocab_size) {}

std::span<const float> Decoder::ffn_activation(std::size_t layer) const {
    if (layer >= activations_.size()) throw std::out_of_range("decoder: layer out of range");
    return activations_[layer];
}

void final_block_logits(const Model& model, std::span<const float> mid_residual, std::span<const HookPoint> hooks,
                        std::span<float> logits, std::span<float> activation_out) {
    const ModelConfig& c = model.config;
    const std::size_t d = c.d_model;
    const std::size_t f = c.d_ffn;
    const std::size_t last = c.n_layers - 1;
    const FfnWeights& ffn = model.layers[last].ffn;
    require_length(mid_residual, d, "final_block_logits residual");

    std::vector<float> h(d), pre(f), gate, act(f), out(d), resid(d);
    layer_norm_row(mid_residual.data(), model.layers[last].ln_ffn, c.layer_norm_epsilon, d, h.data());
    kernels::linear_row(h, ffn.w_in, ffn.b_in, pre);
    if (c.activation == Activation::SwiGlu) {
        gate.resize(f);
        kernels::linear_row(h, ffn.w_gate, ffn.b_gate, gate);
    }
    activate_row(c.activation, pre.data(), gate.empty() ? nullptr : gate.data(), f, act.data());
    if (!activation_out.empty()) std::copy(act.begin(), act.end(), activation_out.begin());
    if (logits.empty()) return;
    for (const auto& hook : hooks) {
        if (hook.layer == last) apply_replacements(hook, act.data());
    }
    kernels::linear_row(act, ffn.w_out, ffn.b_out, out);
    for (std::size_t i = 0; i < d; ++i) resid[i] = mid_residual[i] + out[i];
    layer_norm_row(resid.data(), model.ln_final, c.layer_norm_epsilon, d, h.data());
    kernels::linear_row(h, model.unembedding, model.unembedding_bias, logits);
}

void final_block_logits_batch(const Model& model, const Matrix& mid_residuals, std::span<const HookPoint> hooks,
                              Matrix& logits) {
    const ModelConfig& c = model.config;
    const std::size_t d = c.d_model;
    const std::size_t f = c.d_ffn;
    const std::size_t last = c.n_layers - 1;
    const std::size_t n = mid_residuals.rows;
    const FfnWeights& ffn = model.layers[last].ffn;
    if (mid_residuals.cols != d) throw std::invalid_argument("final_block_logits_batch: residual width mismatch");
    logits = Matrix(n, c.vocab_size);
    if (n == 0) return;

    Matrix h(n, d), pre(n, f), gate, act(n, f), out(n, d), resid(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        layer_norm_row(mid_residuals.row(r).data(), model.layers[last].ln_ffn, c.layer_norm_epsilon, d, h.row(r).data());
    }
    kernels::linear(h, ffn.w_in, ffn.b_in, pre);
    if (c.activation == Activation::SwiGlu) {
        gate = Matrix(n, f);
        kernels::linear(h, ffn.w_gate, ffn.b_gate, gate);
    }
    for (std::size_t r = 0; r < n; ++r) {
        activate_row(c.activation, pre.row(r).data(), gate.empty() ? nullptr : gate.row(r).data(), f, act.row(r).data());
        for (const auto& hook : hooks) {
            if (hook.layer == last) apply_replacements(hook, act.row(r).data());
        }
    }
    kernels::linear(act, ffn.w_out, ffn.b_out, out);
    for (std::size_t i = 0; i < resid.size(); ++i) resid.data[i] = mid_residuals.data[i] + out.data[i];
    for (std::size_t r = 0; r < n; ++r) {
        layer_norm_row(resid.row(r).data(), model.ln_final, c.layer_norm_epsilon, d, h.row(r).data());
    }
    kernels::linear(h, model.unembedding, model.unembedding_bias, logits);
}

std::span<const float> Decoder::step(TokenId token, std::span<const HookPoint> hooks, bool want_logits) {
    const Model& model = *model_;
    const ModelConfig& c = model.config;
    if (length_ >= c.max_positions) throw std::invalid_argument("decoder: max_positions exceeded");
    if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) {
        throw std::out_of_range("decoder: token id " + std::to_string(token) + " outside vocabulary");
    }
    validate_hooks(c, hooks);

    const std::size_t d = c.d_model;
    const std::size_t f = c.d_ffn;
    const std::size_t pos = length_;
    std::vector<float> x(d), h(d), att(d), proj(d), pre(f), gate, out(d);
    std::vector<float> scores;
    const auto te = model.token_embedding.row(static_cast<std::size_t>(token));
    const auto pe = model.position_embedding.row(pos);
    for (std::size_t i = 0; i < d; ++i) x[i] = te[i] + pe[i];

    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const LayerWeights& lw = model.layers[l];
        layer_norm_row(x.data(), lw.ln_attn, c.layer_norm_epsilon, d, h.data());
        auto& cache = qkv_cache_[l];
        cache.resize((pos + 1) * 3 * d);
        std::span<float> qkv_row(cache.data() + pos * 3 * d, 3 * d);
        kernels::linear_row(h, lw.attn.qkv, lw.attn.qkv_bias, qkv_row);
        attend_row(qkv_row.data(), cache.data(), 3 * d, pos + 1, c.n_heads, d, att.data(), scores);
        kernels::linear_row(att, lw.attn.proj, lw.attn.proj_bias, proj);
        for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

        activations_[l].resize(f);
        if (l + 1 == c.n_layers) {
            std::copy(x.begin(), x.end(), final_mid_.begin());
            final_block_logits(model, x, hooks, want_logits ? std::span<float>(logits_) : std::span<float>(), activations_[l]);
            break;
        }
        layer_norm_row(x.data(), lw.ln_ffn, c.layer_norm_epsilon, d, h.data());
        kernels::linear_row(h, lw.ffn.w_in, lw.ffn.b_in, pre);
        if (c.activation == Activation::SwiGlu) {
            gate.resize(f);
            kernels::linear_row(h, lw.ffn.w_gate, lw.ffn.b_gate, gate);
        }
        std::vector<float>& act = activations_[l];
        activate_row(c.activation, pre.data(), gate.empty() ? nullptr : gate.data(), f, act.data());
        std::vector<float> hooked = act;
        for (const auto& hook : hooks) {
            if (hook.layer == l) apply_replacements(hook, hooked.data());
        }
        kernels::linear_row(hooked, lw.ffn.w_out, lw.ffn.b_out, out);
        for (std::size_t i = 0; i < d; ++i) x[i] += out[i];
    }
    ++length_;
    return logits_;
}

// ---------------------------------------------------------------- decoding

TokenId argmax(std::span<const float> logits) {
    if (logits.empty()) throw std::invalid_argument("argmax: empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

Generation greedy_generate_ex(const Model& model, std::span<const TokenId> prompt, std::size_t max_new,
                              std::span<const HookPoint> hooks, const std::function<bool(const TokenSequence&)>& stop) {
    if (prompt.empty()) throw std::invalid_argument("greedy_generate: empty prompt");
    if (max_new < 1) throw std::invalid_argument("greedy_generate: max_new must be >= 1");
    if (prompt.size() + max_new > model.config.max_positions) {
        throw std::invalid_argument("greedy_generate: prompt length " + std::to_string(prompt.size()) + " + " +
                                    std::to_string(max_new) + " new tokens exceeds max_positions " +
                                    std::to_string(model.config.max_positions));
    }
    validate_hooks(model.config, hooks);
    Decoder dec(model);
    const auto prefill_hooks = all_position_hooks(hooks);
    for (std::size_t i = 0; i + 1 < prompt.size(); ++i) dec.step(prompt[i], prefill_hooks, false);
    dec.step(prompt.back(), hooks);
    Generation g;
    g.first_logits.assign(dec.logits().begin(), dec.logits().end());
    for (std::size_t i = 0; i < max_new; ++i) {
        g.tokens.push_back(argmax(dec.logits()));
        if (stop && stop(g.tokens)) break;
        if (i + 1 < max_new) dec.step(g.tokens.back(), hooks);
    }
    return g;
}

TokenSequence greedy_generate(const Model& model, std::span<const TokenId> prompt, std::size_t max_new,
                              std::span<const HookPoint> hooks) {
    return greedy_generate_ex(model, prompt, max_new, hooks).tokens;
}

std::vector<double> softmax(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
    for (double& v : p) v /= z;
    return p;
}

double softmax_entropy(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    double weighted = 0.0;
    for (float v : logits) {
        const double s = v - mx;
        const double e = std::exp(s);
        z += e;
        weighted += e * s;
    }
    return std::log(z) - weighted / z;
}

} // namespace enprobe
