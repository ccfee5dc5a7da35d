#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "enprobe/model.hpp"
#include "enprobe/neuron_analysis.hpp"

namespace enprobe {

struct NeuronStats {
    double mean = 0.0;
    double std = 0.0; // population
    double median = 0.0;
    double mode = 0.0;
    double min = 0.0;
    double max = 0.0;
};

// Per-neuron statistics of one layer's FFN post-activation values, pooled over
// every prompt position of every example (position weighted).
struct ActivationStats {
    std::size_t layer = 0;
    std::size_t positions = 0;
    std::vector<NeuronStats> neurons; // indexed by neuron

    const NeuronStats& at(const NeuronId& id) const;
};

struct StatsOptions {
    std::size_t mode_bins = 100;
};

// Mode estimate: centre of the fullest of `bins` uniform bins over [min, max],
// ties to the lower bin. Degenerates to min when all values are equal.
double binned_mode(std::span<const float> values, double min, double max, std::size_t bins);

// Exact statistics of one neuron's values.
NeuronStats summarize(std::span<const float> values, const StatsOptions& options = {});

// Captures the layer's activations for every prompt (parallel over prompts)
// and summarizes each neuron. Deterministic for any thread count.
ActivationStats compute_activation_stats(const Model& model, std::span<const TokenSequence> prompts, std::size_t layer,
                                         const StatsOptions& options = {});

void write_stats_csv(const std::filesystem::path& path, const ActivationStats& stats);
ActivationStats read_stats_csv(const std::filesystem::path& path);

enum class AblationRule { Mean, Median, Mode, HighClamp, LowClamp };

std::string to_string(AblationRule rule); // "mean", "median", "mode", "high_clamp", "low_clamp"
AblationRule parse_ablation_rule(const std::string& s);

// HIGH_CLAMP = min(mean + 3 std, max); LOW_CLAMP = max(mean - 3 std, min).
double ablation_value(const NeuronStats& s, AblationRule rule);

struct AblationSpec {
    std::vector<NeuronId> neurons;
    AblationRule rule = AblationRule::Mean;
    std::string stats_ref;              // hash of the stats the values come from
    std::optional<std::uint64_t> seed;  // set for random control sets
    HookScope scope = HookScope::AllPositions;
};

// Throws on an empty neuron set or a neuron the stats do not cover.
HookPoint make_ablation(const AblationSpec& spec, const ActivationStats& stats);

// `n_sets` sets of `k` distinct neurons drawn uniformly from `all_neurons`
// minus `exclude`, each sorted. All sets come from one generator seeded with `seed`.
std::vector<std::vector<NeuronId>> sample_control_sets(std::span<const NeuronId> all_neurons,
                                                       std::span<const NeuronId> exclude, std::size_t k,
                                                       std::size_t n_sets, std::uint64_t seed);

} // namespace enprobe
