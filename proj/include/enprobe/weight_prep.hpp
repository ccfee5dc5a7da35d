#pragma once

#include <span>
#include <vector>

#include "enprobe/model.hpp"
#include "enprobe/tensor.hpp"

namespace enprobe {

struct FoldedReadWeights {
    Matrix w_eff; // d_ffn x d_model, rows centered
    std::vector<float> b_eff;
};

// W_eff = W_in diag(gamma), b_eff = b_in + W_in beta; then each row of W_eff
// is centered, since the normalization before it removes the all-ones direction.
FoldedReadWeights fold_layer_norm(const Matrix& w_in, std::span<const float> b_in, std::span<const float> gamma,
                                  std::span<const float> beta);

struct CenteredWriteWeights {
    Matrix w_out; // d_model x d_ffn, each column (neuron output vector) has zero mean
    std::vector<float> b_out;
};

// Removes the residual-stream all-ones component from every neuron's output
// vector and from the bias. Every reader of the residual stream normalizes
// first, so logit differences are unchanged.
CenteredWriteWeights center_writing(const Matrix& w_out, std::span<const float> b_out);

// Subtracts the mean over the vocabulary from each column of W_U.
Matrix center_unembedding(const Matrix& w_u);

struct EffectiveWeights {
    Matrix w_eff;
    std::vector<float> b_eff;
    Matrix w_out_centered;
    std::vector<float> b_out_centered;
    Matrix w_u_centered;
};

// Effective weights of the final layer and the unembedding, as analyzed.
EffectiveWeights effective_weights(const Model& model);

// Returns a functionally equivalent model (same next-token distribution) with
// the final FFN input norm and the final norm folded, the final-layer writing
// weights centered, and W_U centered. Other blocks are left raw.
Model preprocess(const Model& model);

} // namespace enprobe
