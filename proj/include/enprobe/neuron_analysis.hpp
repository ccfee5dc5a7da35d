#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "enprobe/model.hpp"
#include "enprobe/tensor.hpp"

namespace enprobe {

struct NeuronId {
    std::size_t layer = 0;
    std::size_t index = 0;
    auto operator<=>(const NeuronId&) const = default;
};

std::string to_string(const NeuronId& id); // "layer.index"

struct NeuronScore {
    NeuronId id;
    double logit_var = 0.0;
    double rho = 0.0;
    double weight_norm = 0.0;
};

// LogitVar: population variance over tokens of cos(w_U(t), w_out). Zero rows
// of W_U (unused vocabulary slots) are excluded.
//
// Computed through the Gram matrix of the row-normalized unembedding:
//   mean(c)   = (sum_t u_t) . w / n
//   mean(c^2) = w^T (U^T U) w / n
// so scoring every neuron costs one d x d quadratic form instead of a pass over
// the vocabulary.
class LogitVarScorer {
public:
    explicit LogitVarScorer(const Matrix& w_u);

    double score(std::span<const float> w_out) const;
    // One score per row of `w_out_rows` (n_neurons x d_model); parallel.
    std::vector<double> score_all(const Matrix& w_out_rows) const;

    std::size_t skipped_zero_rows() const { return skipped_; }
    std::size_t used_rows() const { return n_; }

private:
    std::size_t d_ = 0;
    std::size_t n_ = 0;
    std::size_t skipped_ = 0;
    std::vector<double> gram_;   // d x d
    std::vector<double> colsum_; // d
};

double logit_var(std::span<const float> w_out, const Matrix& w_u);

struct NullSpaceBasis {
    std::size_t d = 0;                   // ambient dimension (d_model)
    std::size_t k = 0;                   // null-space dimension
    std::vector<double> v0;              // d x k row-major, orthonormal columns
    std::vector<double> singular_values; // descending, length d
    bool from_override = false;
    bool knee_found = false;
};

struct KneeOptions {
    double window_fraction = 0.15; // search the bottom 15% of the spectrum
    double min_ratio = 1.5;        // s_j / s_{j+1} needed to count as a sharp drop
    double floor_fraction = 0.02;  // fallback k = max(1, round(floor_fraction * d))
};

// Effective null space of W_U (rows x cols): the right singular vectors with
// the smallest singular values. k = override_k if given; otherwise the larger
// of the exact rank deficiency and the knee (largest s_j / s_{j+1} ratio in the
// bottom window). Without a drop the floor is used and a warning is logged.
NullSpaceBasis effective_null_space(const Matrix& w_u, std::optional<std::size_t> override_k = std::nullopt,
                                    const KneeOptions& knee = {});
NullSpaceBasis effective_null_space(const std::vector<double>& a, std::size_t rows, std::size_t cols,
                                    std::optional<std::size_t> override_k = std::nullopt, const KneeOptions& knee = {});

// Knee detection alone, on a descending spectrum. Returns k (0 if no drop).
std::size_t knee_dimension(std::span<const double> singular_values, const KneeOptions& knee = {});

// rho = ||V0^T w|| / ||w||
double null_space_projection(std::span<const float> w_out, const NullSpaceBasis& basis);

// Scores every row of `w_out_rows` (neuron output vectors, d_ffn x d_model).
std::vector<NeuronScore> score_neurons(const Matrix& w_out_rows, const Matrix& w_u, const NullSpaceBasis& basis,
                                       std::size_t layer);

struct SelectionConfig {
    double rho_min = 0.0;
    double logit_var_max = 0.0;
    std::size_t max_neurons = 0;
};

// Percentile form of SelectionConfig, resolved against a score distribution.
struct SelectionPolicy {
    double rho_percentile = 99.0;
    double logit_var_percentile = 1.0;
    double permille = 2.0; // max_neurons = ceil(permille / 1000 * d_ffn)

    SelectionConfig resolve(std::span<const NeuronScore> scores) const;
};

// Linear-interpolation percentile (p in [0, 100]).
double percentile(std::vector<double> values, double p);

// Neurons with rho >= rho_min and logit_var <= logit_var_max; if more than
// max_neurons qualify, the lowest logit_var ones are kept. Sorted by id.
std::vector<NeuronId> select_entropy_neurons(std::span<const NeuronScore> scores, const SelectionConfig& cfg);

struct WeightNormHistogram {
    std::vector<double> edges; // n_bins + 1
    std::vector<std::size_t> entropy_counts;
    std::vector<std::size_t> other_counts;

    std::vector<double> entropy_density() const;
    std::vector<double> other_density() const;
};

WeightNormHistogram weight_norm_report(std::span<const NeuronScore> scores, std::span<const NeuronId> selected,
                                       std::size_t n_bins = 20);

void write_scores_csv(const std::filesystem::path& path, std::span<const NeuronScore> scores,
                      std::span<const NeuronId> selected);
std::vector<NeuronScore> read_scores_csv(const std::filesystem::path& path);
void write_singular_values_csv(const std::filesystem::path& path, const NullSpaceBasis& basis);
void write_weight_norms_csv(const std::filesystem::path& path, const WeightNormHistogram& hist);

} // namespace enprobe
