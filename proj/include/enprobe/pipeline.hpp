#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "enprobe/intervention.hpp"
#include "enprobe/neuron_analysis.hpp"
#include "enprobe/probing.hpp"

namespace enprobe {

// Every knob of an experiment, including the choices the method leaves open.
// Serialized as one JSON file; relative paths resolve against that file.
struct ExperimentConfig {
    // model
    std::filesystem::path weights;
    std::filesystem::path vocab;
    std::filesystem::path merges;
    std::optional<std::size_t> n_heads; // when the archive metadata lacks it

    // dataset
    std::filesystem::path dataset;
    std::string dataset_format = "jsonl"; // "jsonl" or "lama"
    std::optional<std::filesystem::path> relations; // lama templates
    std::size_t max_triplets = 0;                   // 0 = all, else the first N

    // analysis
    bool preprocessed_surface = true; // score on folded/centered weights
    std::optional<std::size_t> null_space_k;
    KneeOptions knee;
    SelectionPolicy selection;
    std::optional<double> rho_min; // explicit thresholds override the percentiles
    std::optional<double> logit_var_max;
    std::optional<std::size_t> max_neurons;

    // probing / stats / ablation
    ProbeSettings probe;
    StatsOptions stats;
    std::optional<std::filesystem::path> stats_cache_dir; // default: <output>/cache
    std::vector<AblationRule> rules = {AblationRule::Mean};
    HookScope scope = HookScope::AllPositions;
    std::size_t n_controls = 100;
    std::uint64_t seed = 0;
    bool retain_control_text = false;
    std::size_t replay_batch = 64;

    int threads = 0; // 0 = OpenMP default
    std::filesystem::path output_dir;

    static ExperimentConfig from_json_text(const std::string& text, const std::filesystem::path& base_dir = {});
    static ExperimentConfig load(const std::filesystem::path& path);
    std::string to_json_text() const;

    // Throws std::invalid_argument naming the offending field or missing file.
    void validate() const;
};

enum class Stage { Score, Select, Examples, Stats, Probe, Ablate, Metrics };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);
const std::vector<Stage>& all_stages();
// Stages `s` depends on, in execution order, ending with `s`.
std::vector<Stage> stage_closure(Stage s);

struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Pipeline {
public:
    explicit Pipeline(ExperimentConfig config);
    ~Pipeline();

    // Runs `stages` in order. With `resume`, a stage recorded as complete for
    // the same input fingerprint, whose outputs still hash as recorded, is
    // skipped. Stages listed in `force` always run. On failure the manifest
    // marks the stage failed and StageError is thrown.
    void run(const std::vector<Stage>& stages, bool resume, const std::vector<Stage>& force = {});

    void run_all() { run(all_stages(), false); }
    void resume() { run(all_stages(), true); }

    // Stages executed (not skipped) by the last run() call.
    const std::vector<Stage>& executed() const { return executed_; }
    // Control runs computed (not reused) by the last ablate stage.
    std::size_t controls_computed() const { return controls_computed_; }

    std::string fingerprint() const;
    const ExperimentConfig& config() const { return config_; }
    std::filesystem::path output(const std::string& rel) const { return config_.output_dir / rel; }

    // Test hook: stop the ablate stage (as a failure) after this many control runs.
    void set_control_limit(std::optional<std::size_t> limit) { control_limit_ = limit; }

private:
    struct Resources;

    void load_manifest();
    void save_manifest() const;
    bool stage_is_current(Stage s) const;
    void record_stage(Stage s, const std::vector<std::string>& outputs);

    void run_score();
    void run_select();
    void run_examples();
    void run_stats();
    void run_probe_stage();
    void run_ablate();
    void run_metrics();

    ExperimentConfig config_;
    std::unique_ptr<Resources> res_;
    std::string fingerprint_;
    std::map<std::string, std::string> input_hashes_;
    std::vector<Stage> executed_;
    std::size_t controls_computed_ = 0;
    std::optional<std::size_t> control_limit_;
    bool reuse_controls_ = false;
};

// Writes the nano fixture plus a ready-to-run config into `dir`; returns the config path.
std::filesystem::path write_nano_experiment(const std::filesystem::path& dir, std::uint64_t seed,
                                            std::size_t n_triplets = 40, std::size_t n_controls = 20);

} // namespace enprobe
