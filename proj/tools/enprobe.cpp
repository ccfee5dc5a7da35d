// Command-line front end for the experiment pipeline.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"

#include "enprobe/log.hpp"
#include "enprobe/pipeline.hpp"

namespace {

using enprobe::ExperimentConfig;
using enprobe::Stage;

// Flags that override fields of the JSON config.
struct Overrides {
    std::string config;
    std::string weights, vocab, merges, dataset, dataset_format, relations, output;
    std::optional<std::size_t> n_heads, null_space_k, n_controls, max_triplets, max_neurons, replay_batch, mode_bins;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<double> rho_min, logit_var_max;
    std::vector<std::string> rules;
    std::string surface, scope;
    bool retain_control_text = false;
    bool quiet = false;

    void attach(CLI::App& app) {
        app.add_option("-c,--config", config, "experiment JSON file")->required()->check(CLI::ExistingFile);
        app.add_option("--weights", weights, "model archive (.safetensors)");
        app.add_option("--vocab", vocab, "tokenizer vocab.json");
        app.add_option("--merges", merges, "tokenizer merges.txt");
        app.add_option("--n-heads", n_heads, "attention heads, if absent from archive metadata");
        app.add_option("--dataset", dataset, "probing dataset");
        app.add_option("--dataset-format", dataset_format, "jsonl or lama");
        app.add_option("--relations", relations, "LAMA relation templates");
        app.add_option("--max-triplets", max_triplets, "use only the first N triplets");
        app.add_option("--surface", surface, "score surface: preprocessed or raw");
        app.add_option("--null-space-k", null_space_k, "fix the null-space dimension");
        app.add_option("--rho-min", rho_min, "explicit rho threshold");
        app.add_option("--logit-var-max", logit_var_max, "explicit LogitVar threshold");
        app.add_option("--max-neurons", max_neurons, "cap on the entropy set size");
        app.add_option("--mode-bins", mode_bins, "histogram bins for the mode statistic");
        app.add_option("--rules", rules, "ablation rules: mean median mode high_clamp low_clamp")->delimiter(',');
        app.add_option("--scope", scope, "hook scope: all_positions or final_position");
        app.add_option("--n-controls", n_controls, "random control sets");
        app.add_option("--seed", seed, "control-set seed");
        app.add_option("--replay-batch", replay_batch, "examples per batched replay");
        app.add_flag("--retain-control-text", retain_control_text, "keep full control-run records");
        app.add_option("--threads", threads, "worker threads (0 = default)");
        app.add_option("-o,--output", output, "output directory");
        app.add_flag("-q,--quiet", quiet, "only print warnings");
    }

    ExperimentConfig resolve() const {
        ExperimentConfig c = ExperimentConfig::load(config);
        if (!weights.empty()) c.weights = weights;
        if (!vocab.empty()) c.vocab = vocab;
        if (!merges.empty()) c.merges = merges;
        if (n_heads) c.n_heads = n_heads;
        if (!dataset.empty()) c.dataset = dataset;
        if (!dataset_format.empty()) c.dataset_format = dataset_format;
        if (!relations.empty()) c.relations = relations;
        if (max_triplets) c.max_triplets = *max_triplets;
        if (!surface.empty()) {
            if (surface != "preprocessed" && surface != "raw") throw std::invalid_argument("--surface must be preprocessed or raw");
            c.preprocessed_surface = surface == "preprocessed";
        }
        if (null_space_k) c.null_space_k = null_space_k;
        if (rho_min) c.rho_min = rho_min;
        if (logit_var_max) c.logit_var_max = logit_var_max;
        if (max_neurons) c.max_neurons = max_neurons;
        if (mode_bins) c.stats.mode_bins = *mode_bins;
        if (!rules.empty()) {
            c.rules.clear();
            for (const auto& r : rules) c.rules.push_back(enprobe::parse_ablation_rule(r));
        }
        if (scope == "all_positions") c.scope = enprobe::HookScope::AllPositions;
        else if (scope == "final_position") c.scope = enprobe::HookScope::FinalPosition;
        else if (!scope.empty()) throw std::invalid_argument("--scope must be all_positions or final_position");
        if (n_controls) c.n_controls = *n_controls;
        if (seed) c.seed = *seed;
        if (replay_batch) c.replay_batch = *replay_batch;
        if (retain_control_text) c.retain_control_text = true;
        if (threads) c.threads = *threads;
        if (!output.empty()) c.output_dir = output;
        return c;
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"enprobe: entropy-neuron discovery and ablation experiments"};
    app.require_subcommand(1);

    Overrides ov;
    struct Verb {
        std::string name;
        std::string help;
        std::optional<Stage> stage; // nullopt: every stage
        bool resume;
    };
    const std::vector<Verb> verbs = {
        {"score", "score final-layer neurons (LogitVar, rho)", Stage::Score, true},
        {"select", "select the entropy-neuron set", Stage::Select, true},
        {"stats", "build probe examples and activation statistics", Stage::Stats, true},
        {"probe", "run the unablated base probe", Stage::Probe, true},
        {"ablate", "run entropy-set and control ablations", Stage::Ablate, true},
        {"metrics", "compute transition metrics and Q-values", Stage::Metrics, true},
        {"run-all", "run every stage from scratch", std::nullopt, false},
        {"resume", "run every stage, skipping those already complete", std::nullopt, true},
    };
    std::vector<std::pair<CLI::App*, const Verb*>> subs;
    for (const auto& v : verbs) {
        CLI::App* sub = app.add_subcommand(v.name, v.help);
        ov.attach(*sub);
        subs.emplace_back(sub, &v);
    }

    std::string nano_dir;
    std::uint64_t nano_seed = 1;
    std::size_t nano_triplets = 40, nano_controls = 20;
    CLI::App* nano = app.add_subcommand("make-nano", "write the synthetic nano fixture and a ready-to-run config");
    nano->add_option("dir", nano_dir, "target directory")->required();
    nano->add_option("--seed", nano_seed, "fixture seed");
    nano->add_option("--triplets", nano_triplets, "number of synthetic facts");
    nano->add_option("--n-controls", nano_controls, "control sets in the generated config");

    CLI11_PARSE(app, argc, argv);

    try {
        if (nano->parsed()) {
            const auto cfg = enprobe::write_nano_experiment(nano_dir, nano_seed, nano_triplets, nano_controls);
            std::cout << cfg.string() << "\n";
            return EXIT_SUCCESS;
        }
        for (const auto& [sub, verb] : subs) {
            if (!sub->parsed()) continue;
            enprobe::log::set_quiet(ov.quiet);
            enprobe::Pipeline pipeline(ov.resolve());
            if (!verb->stage) {
                pipeline.run(enprobe::all_stages(), verb->resume);
            } else {
                pipeline.run(enprobe::stage_closure(*verb->stage), true, {*verb->stage});
            }
            std::cout << "output: " << pipeline.config().output_dir.string() << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return EXIT_FAILURE;
    }
    return EXIT_SUCCESS;
}
