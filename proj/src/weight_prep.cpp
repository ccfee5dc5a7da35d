#include "enprobe/weight_prep.hpp"

#include <stdexcept>

namespace enprobe {

FoldedReadWeights fold_layer_norm(const Matrix& w_in, std::span<const float> b_in, std::span<const float> gamma,
                                  std::span<const float> beta) {
    const std::size_t rows = w_in.rows;
    const std::size_t d = w_in.cols;
    require_length(gamma, d, "fold_layer_norm gamma");
    require_length(beta, d, "fold_layer_norm beta");
    require_length(b_in, rows, "fold_layer_norm bias");

    FoldedReadWeights out{Matrix(rows, d), std::vector<float>(rows)};
    std::vector<double> scaled(d);
    for (std::size_t i = 0; i < rows; ++i) {
        double shift = b_in[i];
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            shift += static_cast<double>(w_in(i, j)) * beta[j];
            scaled[j] = static_cast<double>(w_in(i, j)) * gamma[j];
            mean += scaled[j];
        }
        mean /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) out.w_eff(i, j) = static_cast<float>(scaled[j] - mean);
        out.b_eff[i] = static_cast<float>(shift);
    }
    return out;
}

CenteredWriteWeights center_writing(const Matrix& w_out, std::span<const float> b_out) {
    const std::size_t d = w_out.rows;
    const std::size_t f = w_out.cols;
    require_length(b_out, d, "center_writing bias");
    if (d == 0) throw std::invalid_argument("center_writing: empty matrix");

    CenteredWriteWeights out{Matrix(d, f), std::vector<float>(d)};
    for (std::size_t i = 0; i < f; ++i) {
        double mean = 0.0;
        for (std::size_t r = 0; r < d; ++r) mean += w_out(r, i);
        mean /= static_cast<double>(d);
        for (std::size_t r = 0; r < d; ++r) out.w_out(r, i) = static_cast<float>(w_out(r, i) - mean);
    }
    double bmean = 0.0;
    for (float v : b_out) bmean += v;
    bmean /= static_cast<double>(d);
    for (std::size_t r = 0; r < d; ++r) out.b_out[r] = static_cast<float>(b_out[r] - bmean);
    return out;
}

Matrix center_unembedding(const Matrix& w_u) {
    Matrix out(w_u.rows, w_u.cols);
    if (w_u.rows == 0) return out;
    std::vector<double> mean(w_u.cols, 0.0);
    for (std::size_t t = 0; t < w_u.rows; ++t)
        for (std::size_t c = 0; c < w_u.cols; ++c) mean[c] += w_u(t, c);
    for (double& m : mean) m /= static_cast<double>(w_u.rows);
    for (std::size_t t = 0; t < w_u.rows; ++t)
        for (std::size_t c = 0; c < w_u.cols; ++c) out(t, c) = static_cast<float>(w_u(t, c) - mean[c]);
    return out;
}

namespace {

// Folds the final norm into W_U / b_U. Rows of W_U read the normalized
// residual, so they are centered like any other reading weights.
void fold_final_norm(const Model& m, Matrix& w_u, std::vector<float>& b_u) {
    const std::size_t d = m.config.d_model;
    const auto& g = m.ln_final.gamma;
    const auto& b = m.ln_final.beta;
    w_u = Matrix(m.unembedding.rows, d);
    b_u.resize(m.unembedding.rows);
    std::vector<double> scaled(d);
    for (std::size_t t = 0; t < m.unembedding.rows; ++t) {
        double shift = m.unembedding_bias.empty() ? 0.0 : m.unembedding_bias[t];
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            shift += static_cast<double>(m.unembedding(t, j)) * b[j];
            scaled[j] = static_cast<double>(m.unembedding(t, j)) * g[j];
            mean += scaled[j];
        }
        mean /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) w_u(t, j) = static_cast<float>(scaled[j] - mean);
        b_u[t] = static_cast<float>(shift);
    }
    // Softmax is shift invariant: center the bias over the vocabulary too.
    double bmean = 0.0;
    for (float v : b_u) bmean += v;
    bmean /= static_cast<double>(b_u.size());
    for (float& v : b_u) v = static_cast<float>(v - bmean);
}

} // namespace

EffectiveWeights effective_weights(const Model& model) {
    const LayerWeights& last = model.layers.back();
    EffectiveWeights e;
    auto folded = fold_layer_norm(last.ffn.w_in, last.ffn.b_in, last.ln_ffn.gamma, last.ln_ffn.beta);
    e.w_eff = std::move(folded.w_eff);
    e.b_eff = std::move(folded.b_eff);
    auto centered = center_writing(last.ffn.w_out, last.ffn.b_out);
    e.w_out_centered = std::move(centered.w_out);
    e.b_out_centered = std::move(centered.b_out);
    Matrix w_u;
    std::vector<float> b_u;
    fold_final_norm(model, w_u, b_u);
    e.w_u_centered = center_unembedding(w_u);
    return e;
}

Model preprocess(const Model& model) {
    if (model.preprocessed) return model;
    Model m = model;
    const std::size_t d = m.config.d_model;
    LayerWeights& last = m.layers.back();

    auto folded = fold_layer_norm(last.ffn.w_in, last.ffn.b_in, last.ln_ffn.gamma, last.ln_ffn.beta);
    if (m.config.activation == Activation::SwiGlu) {
        auto gate = fold_layer_norm(last.ffn.w_gate, last.ffn.b_gate, last.ln_ffn.gamma, last.ln_ffn.beta);
        last.ffn.w_gate = std::move(gate.w_eff);
        last.ffn.b_gate = std::move(gate.b_eff);
    }
    last.ffn.w_in = std::move(folded.w_eff);
    last.ffn.b_in = std::move(folded.b_eff);
    last.ln_ffn = {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};

    auto centered = center_writing(last.ffn.w_out, last.ffn.b_out);
    last.ffn.w_out = std::move(centered.w_out);
    last.ffn.b_out = std::move(centered.b_out);

    Matrix w_u;
    std::vector<float> b_u;
    fold_final_norm(model, w_u, b_u);
    m.unembedding = center_unembedding(w_u);
    m.unembedding_bias = std::move(b_u);
    m.ln_final = {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};
    m.preprocessed = true;
    return m;
}

} // namespace enprobe
