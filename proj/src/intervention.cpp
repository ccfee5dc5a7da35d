#include "enprobe/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace enprobe {

const NeuronStats& ActivationStats::at(const NeuronId& id) const {
    if (id.layer != layer || id.index >= neurons.size()) {
        throw std::out_of_range("activation stats (layer " + std::to_string(layer) + ", " +
                                std::to_string(neurons.size()) + " neurons) have no entry for neuron " + to_string(id));
    }
    return neurons[id.index];
}

double binned_mode(std::span<const float> values, double min, double max, std::size_t bins) {
    if (bins == 0) throw std::invalid_argument("binned_mode: bins must be >= 1");
    if (values.empty()) throw std::invalid_argument("binned_mode: no values");
    if (!(max > min)) return min;
    const double width = (max - min) / static_cast<double>(bins);
    std::vector<std::size_t> counts(bins, 0);
    for (float v : values) {
        auto b = static_cast<std::size_t>((v - min) / width);
        counts[std::min(b, bins - 1)]++;
    }
    const auto best = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    return min + (static_cast<double>(best) + 0.5) * width;
}

NeuronStats summarize(std::span<const float> values, const StatsOptions& options) {
    if (values.empty()) throw std::invalid_argument("summarize: no values");
    const auto n = static_cast<double>(values.size());
    NeuronStats s;
    double sum = 0.0;
    s.min = s.max = values[0];
    for (float v : values) {
        sum += v;
        s.min = std::min(s.min, static_cast<double>(v));
        s.max = std::max(s.max, static_cast<double>(v));
    }
    s.mean = sum / n;
    double sq = 0.0;
    for (float v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / n);

    std::vector<float> tmp(values.begin(), values.end());
    const std::size_t mid = tmp.size() / 2;
    std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(mid), tmp.end());
    const double upper = tmp[mid];
    if (tmp.size() % 2 == 1) {
        s.median = upper;
    } else {
        const double lower = *std::max_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(mid));
        s.median = 0.5 * (lower + upper);
    }
    s.mode = binned_mode(values, s.min, s.max, options.mode_bins);
    return s;
}

ActivationStats compute_activation_stats(const Model& model, std::span<const TokenSequence> prompts, std::size_t layer,
                                         const StatsOptions& options) {
    if (prompts.empty()) throw std::invalid_argument("compute_activation_stats: empty dataset");
    if (layer >= model.config.n_layers) throw std::out_of_range("compute_activation_stats: layer out of range");
    const std::size_t f = model.config.d_ffn;

    std::vector<Matrix> captured(prompts.size());
    std::string failure;
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        try {
            const auto& p = prompts[i];
            if (p.empty()) throw std::invalid_argument("empty prompt at index " + std::to_string(i));
            Matrix m(p.size(), f);
            Decoder dec(model);
            for (std::size_t t = 0; t < p.size(); ++t) {
                dec.step(p[t], {}, false);
                const auto a = dec.ffn_activation(layer);
                std::copy(a.begin(), a.end(), m.row(t).begin());
            }
            captured[i] = std::move(m);
        } catch (const std::exception& e) {
#pragma omp critical(enprobe_stats_failure)
            if (failure.empty()) failure = e.what();
        }
    }
    if (!failure.empty()) throw std::runtime_error("compute_activation_stats: " + failure);

    std::size_t total = 0;
    for (const auto& m : captured) total += m.rows;

    ActivationStats stats;
    stats.layer = layer;
    stats.positions = total;
    stats.neurons.resize(f);
#pragma omp parallel
    {
        std::vector<float> column(total);
#pragma omp for schedule(static)
        for (std::size_t j = 0; j < f; ++j) {
            std::size_t k = 0;
            for (const auto& m : captured)
                for (std::size_t r = 0; r < m.rows; ++r) column[k++] = m(r, j);
            stats.neurons[j] = summarize(column, options);
        }
    }
    return stats;
}

void write_stats_csv(const std::filesystem::path& path, const ActivationStats& stats) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "layer,index,mean,std,median,mode,min,max\n";
    for (std::size_t i = 0; i < stats.neurons.size(); ++i) {
        const auto& s = stats.neurons[i];
        out << stats.layer << ',' << i << ',' << s.mean << ',' << s.std << ',' << s.median << ',' << s.mode << ','
            << s.min << ',' << s.max << '\n';
    }
}

ActivationStats read_stats_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "layer,index,mean,std,median,mode,min,max") throw std::runtime_error(path.string() + ": unexpected header");
    ActivationStats stats;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(ss, field, ',')) f.push_back(field);
        if (f.size() != 8) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        const std::size_t layer = std::stoul(f[0]);
        const std::size_t index = std::stoul(f[1]);
        if (first) stats.layer = layer;
        first = false;
        if (layer != stats.layer || index != stats.neurons.size()) {
            throw std::runtime_error(path.string() + ": rows must cover one layer in index order");
        }
        stats.neurons.push_back({std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]), std::stod(f[6]),
                                 std::stod(f[7])});
    }
    return stats;
}

std::string to_string(AblationRule rule) {
    switch (rule) {
    case AblationRule::Mean: return "mean";
    case AblationRule::Median: return "median";
    case AblationRule::Mode: return "mode";
    case AblationRule::HighClamp: return "high_clamp";
    case AblationRule::LowClamp: return "low_clamp";
    }
    return "mean";
}

AblationRule parse_ablation_rule(const std::string& s) {
    for (auto r : {AblationRule::Mean, AblationRule::Median, AblationRule::Mode, AblationRule::HighClamp,
                   AblationRule::LowClamp}) {
        if (to_string(r) == s) return r;
    }
    throw std::invalid_argument("unknown ablation rule '" + s + "' (mean, median, mode, high_clamp, low_clamp)");
}

double ablation_value(const NeuronStats& s, AblationRule rule) {
    switch (rule) {
    case AblationRule::Mean: return s.mean;
    case AblationRule::Median: return s.median;
    case AblationRule::Mode: return s.mode;
    case AblationRule::HighClamp: return std::min(s.mean + 3.0 * s.std, s.max);
    case AblationRule::LowClamp: return std::max(s.mean - 3.0 * s.std, s.min);
    }
    throw std::invalid_argument("ablation_value: bad rule");
}

HookPoint make_ablation(const AblationSpec& spec, const ActivationStats& stats) {
    if (spec.neurons.empty()) throw std::invalid_argument("make_ablation: empty neuron set");
    HookPoint h;
    h.layer = stats.layer;
    h.scope = spec.scope;
    for (const auto& id : spec.neurons) {
        h.replacements.push_back({id.index, static_cast<float>(ablation_value(stats.at(id), spec.rule))});
    }
    return h;
}

std::vector<std::vector<NeuronId>> sample_control_sets(std::span<const NeuronId> all_neurons,
                                                       std::span<const NeuronId> exclude, std::size_t k,
                                                       std::size_t n_sets, std::uint64_t seed) {
    if (k == 0) throw std::invalid_argument("sample_control_sets: k must be >= 1");
    if (n_sets == 0) throw std::invalid_argument("sample_control_sets: n_sets must be >= 1");
    const std::set<NeuronId> excluded(exclude.begin(), exclude.end());
    std::set<NeuronId> unique(all_neurons.begin(), all_neurons.end());
    std::vector<NeuronId> pool;
    for (const auto& id : unique) {
        if (!excluded.contains(id)) pool.push_back(id);
    }
    if (pool.size() < k) {
        throw std::invalid_argument("sample_control_sets: pool of " + std::to_string(pool.size()) +
                                    " non-excluded neurons is smaller than k = " + std::to_string(k));
    }
    std::mt19937_64 rng(seed);
    std::vector<std::vector<NeuronId>> sets(n_sets);
    for (auto& s : sets) {
        s.reserve(k);
        std::sample(pool.begin(), pool.end(), std::back_inserter(s), static_cast<std::ptrdiff_t>(k), rng);
    }
    return sets;
}

} // namespace enprobe
