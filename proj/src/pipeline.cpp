#include "enprobe/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "enprobe/hash.hpp"
#include "enprobe/kernels.hpp"
#include "enprobe/log.hpp"
#include "enprobe/metrics.hpp"
#include "enprobe/nano.hpp"
#include "enprobe/weight_prep.hpp"

namespace enprobe {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

void check_keys(const json& obj, const std::string& section, std::initializer_list<const char*> known) {
    if (!obj.is_object()) throw std::invalid_argument("config: '" + section + "' must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
            throw std::invalid_argument("config: unknown key '" + section + "." + key + "'");
        }
    }
}

template <class T>
void read_opt(const json& obj, const char* key, std::optional<T>& out) {
    if (obj.contains(key) && !obj[key].is_null()) out = obj[key].get<T>();
}

template <class T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj[key].get<T>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
}

template <class T>
json opt_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

std::string scope_name(HookScope s) { return s == HookScope::AllPositions ? "all_positions" : "final_position"; }

HookScope parse_scope(const std::string& s) {
    if (s == "all_positions") return HookScope::AllPositions;
    if (s == "final_position") return HookScope::FinalPosition;
    throw std::invalid_argument("config: ablation.scope must be all_positions or final_position");
}

} // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text, const fs::path& base_dir) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
    }
    check_keys(j, "config", {"model", "dataset", "analysis", "selection", "probe", "stats", "ablation", "metrics",
                             "threads", "output_dir"});
    ExperimentConfig c;
    try {
        const json model = j.value("model", json::object());
        check_keys(model, "model", {"weights", "vocab", "merges", "n_heads"});
        c.weights = resolve(base_dir, model.at("weights").get<std::string>());
        c.vocab = resolve(base_dir, model.at("vocab").get<std::string>());
        c.merges = resolve(base_dir, model.at("merges").get<std::string>());
        read_opt(model, "n_heads", c.n_heads);

        const json ds = j.value("dataset", json::object());
        check_keys(ds, "dataset", {"path", "format", "relations", "max_triplets"});
        c.dataset = resolve(base_dir, ds.at("path").get<std::string>());
        read(ds, "format", c.dataset_format);
        if (ds.contains("relations") && !ds["relations"].is_null()) c.relations = resolve(base_dir, ds["relations"].get<std::string>());
        read(ds, "max_triplets", c.max_triplets);

        const json an = j.value("analysis", json::object());
        check_keys(an, "analysis", {"surface", "null_space_k", "knee_window_fraction", "knee_min_ratio", "knee_floor_fraction"});
        const std::string surface = an.value("surface", "preprocessed");
        if (surface != "preprocessed" && surface != "raw") throw std::invalid_argument("config: analysis.surface must be preprocessed or raw");
        c.preprocessed_surface = surface == "preprocessed";
        read_opt(an, "null_space_k", c.null_space_k);
        read(an, "knee_window_fraction", c.knee.window_fraction);
        read(an, "knee_min_ratio", c.knee.min_ratio);
        read(an, "knee_floor_fraction", c.knee.floor_fraction);

        const json sel = j.value("selection", json::object());
        check_keys(sel, "selection", {"rho_percentile", "logit_var_percentile", "permille", "rho_min", "logit_var_max", "max_neurons"});
        read(sel, "rho_percentile", c.selection.rho_percentile);
        read(sel, "logit_var_percentile", c.selection.logit_var_percentile);
        read(sel, "permille", c.selection.permille);
        read_opt(sel, "rho_min", c.rho_min);
        read_opt(sel, "logit_var_max", c.logit_var_max);
        read_opt(sel, "max_neurons", c.max_neurons);

        const json pr = j.value("probe", json::object());
        check_keys(pr, "probe", {"n_ck", "window_extra", "length_normalized", "delimiters"});
        read(pr, "n_ck", c.probe.n_ck);
        read(pr, "window_extra", c.probe.window_extra);
        read(pr, "length_normalized", c.probe.length_normalized);
        read(pr, "delimiters", c.probe.delimiters);

        const json st = j.value("stats", json::object());
        check_keys(st, "stats", {"mode_bins", "cache_dir"});
        read(st, "mode_bins", c.stats.mode_bins);
        if (st.contains("cache_dir") && !st["cache_dir"].is_null()) c.stats_cache_dir = resolve(base_dir, st["cache_dir"].get<std::string>());

        const json ab = j.value("ablation", json::object());
        check_keys(ab, "ablation", {"rules", "scope", "n_controls", "seed", "retain_control_text", "replay_batch"});
        if (ab.contains("rules")) {
            c.rules.clear();
            for (const auto& r : ab["rules"]) c.rules.push_back(parse_ablation_rule(r.get<std::string>()));
        }
        if (ab.contains("scope")) c.scope = parse_scope(ab["scope"].get<std::string>());
        read(ab, "n_controls", c.n_controls);
        read(ab, "seed", c.seed);
        read(ab, "retain_control_text", c.retain_control_text);
        read(ab, "replay_batch", c.replay_batch);

        const json me = j.value("metrics", json::object());
        check_keys(me, "metrics", {"q_value_rule", "band_sigma"});
        if (me.value("q_value_rule", "midrank") != "midrank") throw std::invalid_argument("config: metrics.q_value_rule supports only midrank");
        if (me.value("band_sigma", 3.0) != 3.0) throw std::invalid_argument("config: metrics.band_sigma supports only 3");

        read(j, "threads", c.threads);
        c.output_dir = resolve(base_dir, j.at("output_dir").get<std::string>());
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str(), path.parent_path());
}

std::string ExperimentConfig::to_json_text() const {
    json rules = json::array();
    for (auto r : this->rules) rules.push_back(to_string(r));
    json j = {
        {"model", {{"weights", weights.string()}, {"vocab", vocab.string()}, {"merges", merges.string()}, {"n_heads", opt_json(n_heads)}}},
        {"dataset", {{"path", dataset.string()}, {"format", dataset_format},
                     {"relations", relations ? json(relations->string()) : json(nullptr)}, {"max_triplets", max_triplets}}},
        {"analysis", {{"surface", preprocessed_surface ? "preprocessed" : "raw"}, {"null_space_k", opt_json(null_space_k)},
                      {"knee_window_fraction", knee.window_fraction}, {"knee_min_ratio", knee.min_ratio},
                      {"knee_floor_fraction", knee.floor_fraction}}},
        {"selection", {{"rho_percentile", selection.rho_percentile}, {"logit_var_percentile", selection.logit_var_percentile},
                       {"permille", selection.permille}, {"rho_min", opt_json(rho_min)},
                       {"logit_var_max", opt_json(logit_var_max)}, {"max_neurons", opt_json(max_neurons)}}},
        {"probe", {{"n_ck", probe.n_ck}, {"window_extra", probe.window_extra}, {"length_normalized", probe.length_normalized},
                   {"delimiters", probe.delimiters}}},
        {"stats", {{"mode_bins", stats.mode_bins}, {"cache_dir", stats_cache_dir ? json(stats_cache_dir->string()) : json(nullptr)}}},
        {"ablation", {{"rules", rules}, {"scope", scope_name(scope)}, {"n_controls", n_controls}, {"seed", seed},
                      {"retain_control_text", retain_control_text}, {"replay_batch", replay_batch}}},
        {"metrics", {{"q_value_rule", "midrank"}, {"band_sigma", 3}}},
        {"threads", threads},
        {"output_dir", output_dir.string()},
    };
    return j.dump(2) + "\n";
}

void ExperimentConfig::validate() const {
    const auto need_file = [](const fs::path& p, const char* what) {
        if (p.empty()) throw std::invalid_argument(std::string("config: ") + what + " path is empty");
        if (!fs::is_regular_file(p)) throw std::invalid_argument(std::string("config: ") + what + " not found: " + p.string());
    };
    need_file(weights, "model.weights");
    need_file(vocab, "model.vocab");
    need_file(merges, "model.merges");
    need_file(dataset, "dataset.path");
    if (dataset_format != "jsonl" && dataset_format != "lama") throw std::invalid_argument("config: dataset.format must be jsonl or lama");
    if (relations) need_file(*relations, "dataset.relations");
    if (n_controls < 2) throw std::invalid_argument("config: ablation.n_controls must be >= 2 (control spread needs two runs)");
    if (rules.empty()) throw std::invalid_argument("config: ablation.rules must not be empty");
    if (rho_min && (*rho_min < 0.0 || *rho_min > 1.0)) throw std::invalid_argument("config: selection.rho_min must be in [0, 1]");
    if (probe.n_ck < 1) throw std::invalid_argument("config: probe.n_ck must be >= 1");
    if (stats.mode_bins < 1) throw std::invalid_argument("config: stats.mode_bins must be >= 1");
    if (replay_batch < 1) throw std::invalid_argument("config: ablation.replay_batch must be >= 1");
    if (output_dir.empty()) throw std::invalid_argument("config: output_dir is empty");
}

// ---------------------------------------------------------------- stages

std::string to_string(Stage s) {
    switch (s) {
    case Stage::Score: return "score";
    case Stage::Select: return "select";
    case Stage::Examples: return "examples";
    case Stage::Stats: return "stats";
    case Stage::Probe: return "probe";
    case Stage::Ablate: return "ablate";
    case Stage::Metrics: return "metrics";
    }
    return "?";
}

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> s = {Stage::Score, Stage::Select, Stage::Examples, Stage::Stats,
                                         Stage::Probe, Stage::Ablate, Stage::Metrics};
    return s;
}

Stage parse_stage(const std::string& s) {
    for (Stage st : all_stages()) {
        if (to_string(st) == s) return st;
    }
    throw std::invalid_argument("unknown stage '" + s + "'");
}

std::vector<Stage> stage_closure(Stage s) {
    switch (s) {
    case Stage::Score: return {Stage::Score};
    case Stage::Select: return {Stage::Score, Stage::Select};
    case Stage::Examples: return {Stage::Examples};
    case Stage::Stats: return {Stage::Examples, Stage::Stats};
    case Stage::Probe: return {Stage::Examples, Stage::Probe};
    case Stage::Ablate:
    case Stage::Metrics: break;
    }
    std::vector<Stage> all = all_stages();
    if (s == Stage::Ablate) all.pop_back();
    return all;
}

// ---------------------------------------------------------------- pipeline

struct Pipeline::Resources {
    const ExperimentConfig* config;
    std::optional<BpeTokenizer> tokenizer;
    std::optional<Model> raw;
    std::optional<Model> analysed;
    json manifest = json::object();

    const BpeTokenizer& tok() {
        if (!tokenizer) tokenizer = BpeTokenizer::from_files(config->vocab, config->merges);
        return *tokenizer;
    }
    const Model& raw_model() {
        if (!raw) {
            const TensorArchive archive = TensorArchive::read(config->weights);
            raw = load_model(archive, infer_config(archive, config->n_heads));
        }
        return *raw;
    }
    const Model& analysis_model() {
        if (!analysed) analysed = config->preprocessed_surface ? preprocess(raw_model()) : raw_model();
        return *analysed;
    }
};

namespace {

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string control_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "control_%03zu", i);
    return buf;
}

json neuron_list(std::span<const NeuronId> ids) {
    json a = json::array();
    for (const auto& id : ids) a.push_back(to_string(id));
    return a;
}

std::vector<NeuronId> parse_neurons(const json& a) {
    std::vector<NeuronId> out;
    for (const auto& s : a) {
        const std::string v = s.get<std::string>();
        const auto dot = v.find('.');
        if (dot == std::string::npos) throw std::runtime_error("bad neuron id '" + v + "'");
        out.push_back({std::stoul(v.substr(0, dot)), std::stoul(v.substr(dot + 1))});
    }
    return out;
}

} // namespace

Pipeline::Pipeline(ExperimentConfig config) : config_(std::move(config)), res_(std::make_unique<Resources>()) {
    config_.validate();
    res_->config = &config_;
    if (config_.threads > 0) kernels::set_num_threads(config_.threads);

    input_hashes_["weights"] = sha256_file(config_.weights);
    input_hashes_["vocab"] = sha256_file(config_.vocab);
    input_hashes_["merges"] = sha256_file(config_.merges);
    input_hashes_["dataset"] = sha256_file(config_.dataset);
    if (config_.relations) input_hashes_["relations"] = sha256_file(*config_.relations);

    // The fingerprint covers every input that can change a result: file
    // contents and all semantic settings (not paths, threads or cache location).
    json sem = json::parse(config_.to_json_text());
    sem.erase("output_dir");
    sem.erase("threads");
    sem["stats"].erase("cache_dir");
    sem["model"].erase("weights");
    sem["model"].erase("vocab");
    sem["model"].erase("merges");
    sem["dataset"].erase("path");
    sem["dataset"].erase("relations");
    sem["ablation"].erase("replay_batch");
    sem["inputs"] = input_hashes_;
    fingerprint_ = sha256_hex(sem.dump());
}

Pipeline::~Pipeline() = default;

std::string Pipeline::fingerprint() const { return fingerprint_; }

void Pipeline::load_manifest() {
    const fs::path p = output("manifest.json");
    res_->manifest = json::object();
    if (!fs::exists(p)) return;
    try {
        res_->manifest = json::parse(read_text(p));
    } catch (const std::exception& e) {
        log::warn("ignoring unreadable manifest: " + std::string(e.what()));
        res_->manifest = json::object();
    }
}

void Pipeline::save_manifest() const { write_text(output("manifest.json"), res_->manifest.dump(2) + "\n"); }

namespace {

// Stages whose outputs a stage reads.
std::vector<Stage> upstream_of(Stage s) {
    switch (s) {
    case Stage::Select: return {Stage::Score};
    case Stage::Stats:
    case Stage::Probe: return {Stage::Examples};
    case Stage::Ablate: return {Stage::Select, Stage::Examples, Stage::Stats, Stage::Probe};
    case Stage::Metrics: return {Stage::Score, Stage::Select, Stage::Probe, Stage::Ablate};
    default: return {};
    }
}

json upstream_digest(const json& manifest, Stage s) {
    json d = json::object();
    for (Stage u : upstream_of(s)) {
        const json& stages = manifest.at("stages");
        const json outputs = stages.contains(to_string(u)) ? stages[to_string(u)].value("outputs", json::object()) : json(nullptr);
        d[to_string(u)] = sha256_hex(outputs.dump());
    }
    return d;
}

} // namespace

bool Pipeline::stage_is_current(Stage s) const {
    const json& m = res_->manifest;
    if (m.value("fingerprint", "") != fingerprint_) return false;
    if (!m.contains("stages") || !m["stages"].contains(to_string(s))) return false;
    const json& st = m["stages"][to_string(s)];
    if (st.value("status", "") != "complete") return false;
    // A stage whose inputs were regenerated since it ran is stale.
    if (st.value("upstream", json::object()) != upstream_digest(m, s)) return false;
    const json outputs = st.value("outputs", json::object());
    for (const auto& [rel, hash] : outputs.items()) {
        const fs::path p = output(rel);
        if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
    }
    return true;
}

void Pipeline::record_stage(Stage s, const std::vector<std::string>& outputs) {
    json out = json::object();
    for (const auto& rel : outputs) out[rel] = sha256_file(output(rel));
    json entry = {{"status", "complete"}, {"outputs", out}};
    entry["upstream"] = upstream_digest(res_->manifest, s);
    res_->manifest["stages"][to_string(s)] = entry;
    save_manifest();
}

void Pipeline::run(const std::vector<Stage>& stages, bool resume, const std::vector<Stage>& force) {
    executed_.clear();
    controls_computed_ = 0;
    fs::create_directories(config_.output_dir);
    load_manifest();
    json& m = res_->manifest;
    const bool same_inputs = m.value("fingerprint", "") == fingerprint_;
    if (resume && !m.empty() && !same_inputs) log::warn("inputs changed since the recorded run; re-running every stage");
    if (!same_inputs) m["stages"] = json::object();
    reuse_controls_ = resume && same_inputs;

    m["fingerprint"] = fingerprint_;
    m["inputs"] = input_hashes_;
    m["config"] = json::parse(config_.to_json_text());
    m["recorded_choices"] = {
        {"activation_stats", "position-weighted over every prompt position"},
        {"generation_window", "longest pool object in tokens + probe.window_extra"},
        {"classification", "prefix match after stripping surrounding whitespace, CK checked first"},
        {"mode", "centre of the fullest of stats.mode_bins uniform bins, ties to the lower bin"},
        {"median", "exact"},
        {"q_value", "midrank percentile against the control runs"},
        {"control_runs", config_.retain_control_text ? "full records" : "source and entropy per example"},
    };
    if (!m.contains("stages")) m["stages"] = json::object();
    save_manifest();

    for (Stage s : stages) {
        const bool forced = !resume || std::find(force.begin(), force.end(), s) != force.end();
        if (!forced && stage_is_current(s)) {
            log::info("stage " + to_string(s) + ": up to date, skipped");
            continue;
        }
        log::info("stage " + to_string(s) + ": running");
        m["stages"][to_string(s)] = {{"status", "running"}};
        save_manifest();
        try {
            switch (s) {
            case Stage::Score: run_score(); break;
            case Stage::Select: run_select(); break;
            case Stage::Examples: run_examples(); break;
            case Stage::Stats: run_stats(); break;
            case Stage::Probe: run_probe_stage(); break;
            case Stage::Ablate: run_ablate(); break;
            case Stage::Metrics: run_metrics(); break;
            }
        } catch (const std::exception& e) {
            m["stages"][to_string(s)] = {{"status", "failed"}, {"error", e.what()}};
            save_manifest();
            throw StageError("stage " + to_string(s) + " failed: " + e.what());
        }
        executed_.push_back(s);
    }
}

namespace {

SelectionConfig resolve_selection(const ExperimentConfig& c, std::span<const NeuronScore> scores) {
    SelectionConfig cfg = c.selection.resolve(scores);
    if (c.rho_min) cfg.rho_min = *c.rho_min;
    if (c.logit_var_max) cfg.logit_var_max = *c.logit_var_max;
    if (c.max_neurons) cfg.max_neurons = *c.max_neurons;
    return cfg;
}

} // namespace

void Pipeline::run_score() {
    const Model& m = res_->analysis_model();
    const std::size_t last = m.config.n_layers - 1;
    const NullSpaceBasis basis = effective_null_space(m.unembedding, config_.null_space_k, config_.knee);
    const auto scores = score_neurons(m.layers[last].ffn.w_out.transposed(), m.unembedding, basis, last);
    const auto selected = select_entropy_neurons(scores, resolve_selection(config_, scores));

    write_scores_csv(output("neuron_scores.csv"), scores, selected);
    write_singular_values_csv(output("singular_values.csv"), basis);
    const json ns = {{"d_model", basis.d}, {"k", basis.k}, {"from_override", basis.from_override},
                     {"knee_found", basis.knee_found}, {"surface", config_.preprocessed_surface ? "preprocessed" : "raw"}};
    write_text(output("null_space.json"), ns.dump(2) + "\n");
    log::info("null space k = " + std::to_string(basis.k) + "; " + std::to_string(scores.size()) + " neurons scored");
    record_stage(Stage::Score, {"neuron_scores.csv", "singular_values.csv", "null_space.json"});
}

void Pipeline::run_select() {
    const auto scores = read_scores_csv(output("neuron_scores.csv"));
    const SelectionConfig cfg = resolve_selection(config_, scores);
    const auto selected = select_entropy_neurons(scores, cfg);

    std::vector<double> rhos;
    for (const auto& s : scores) rhos.push_back(s.rho);
    json details = json::array();
    for (const auto& id : selected) {
        const auto it = std::find_if(scores.begin(), scores.end(), [&](const NeuronScore& s) { return s.id == id; });
        const auto below = std::count_if(rhos.begin(), rhos.end(), [&](double r) { return r < it->rho; });
        details.push_back({{"id", to_string(id)}, {"logit_var", it->logit_var}, {"rho", it->rho},
                           {"weight_norm", it->weight_norm},
                           {"rho_percentile", 100.0 * static_cast<double>(below) / static_cast<double>(rhos.size())}});
    }
    const json out = {{"neurons", neuron_list(selected)},
                      {"thresholds", {{"rho_min", cfg.rho_min}, {"logit_var_max", cfg.logit_var_max}, {"max_neurons", cfg.max_neurons}}},
                      {"details", details}};
    write_text(output("selected_neurons.json"), out.dump(2) + "\n");
    write_weight_norms_csv(output("weight_norms.csv"), weight_norm_report(scores, selected));
    log::info("selected " + std::to_string(selected.size()) + " entropy neurons");
    record_stage(Stage::Select, {"selected_neurons.json", "weight_norms.csv"});
}

void Pipeline::run_examples() {
    std::vector<FactTriplet> triplets = config_.dataset_format == "lama"
                                            ? load_lama_jsonl(config_.dataset, config_.relations)
                                            : load_triplets_jsonl(config_.dataset);
    if (config_.max_triplets > 0 && triplets.size() > config_.max_triplets) triplets.resize(config_.max_triplets);
    const auto ds = build_examples(res_->raw_model(), res_->tok(), triplets, config_.probe);
    if (ds.examples.empty()) throw std::runtime_error("no usable probe examples (" + std::to_string(ds.skipped.size()) + " triplets skipped)");
    write_examples_jsonl(output("examples.jsonl"), ds.examples);
    std::string skipped;
    for (const auto& s : ds.skipped) skipped += json({{"triplet_id", s.triplet_id}, {"reason", s.reason}}).dump() + "\n";
    write_text(output("skipped_triplets.jsonl"), skipped);
    log::info(std::to_string(ds.examples.size()) + " probe examples from " + std::to_string(triplets.size()) + " triplets");
    record_stage(Stage::Examples, {"examples.jsonl", "skipped_triplets.jsonl"});
}

void Pipeline::run_stats() {
    const auto examples = read_examples_jsonl(output("examples.jsonl"));
    if (examples.empty()) throw std::runtime_error("empty example set");
    const std::string dataset_hash = sha256_file(output("examples.jsonl"));
    const std::string key = sha256_hex(input_hashes_.at("weights") + "|" + dataset_hash + "|" + std::to_string(config_.stats.mode_bins));
    const fs::path cache_dir = config_.stats_cache_dir.value_or(output("cache"));
    const fs::path cached = cache_dir / ("stats_" + key.substr(0, 16) + ".csv");

    std::size_t positions = 0;
    for (const auto& e : examples) positions += e.prompt_tokens.size();
    if (fs::exists(cached)) {
        read_stats_csv(cached); // validates the file
        log::info("activation stats: cache hit " + cached.string());
    } else {
        std::vector<TokenSequence> prompts;
        for (const auto& e : examples) prompts.push_back(e.prompt_tokens);
        const Model& m = res_->raw_model();
        const auto stats = compute_activation_stats(m, prompts, m.config.n_layers - 1, config_.stats);
        fs::create_directories(cache_dir);
        write_stats_csv(cached.string() + ".tmp", stats);
        fs::rename(cached.string() + ".tmp", cached);
    }
    fs::copy_file(cached, output("activation_stats.csv"), fs::copy_options::overwrite_existing);
    const json meta = {{"positions", positions}, {"examples", examples.size()}, {"weighting", "position"},
                       {"model_sha256", input_hashes_.at("weights")}, {"dataset_sha256", dataset_hash},
                       {"mode_bins", config_.stats.mode_bins}};
    write_text(output("activation_stats.json"), meta.dump(2) + "\n");
    record_stage(Stage::Stats, {"activation_stats.csv", "activation_stats.json"});
}

void Pipeline::run_probe_stage() {
    const auto examples = read_examples_jsonl(output("examples.jsonl"));
    const auto records = run_probe(res_->raw_model(), res_->tok(), examples, {}, {.ablation = "none", .early_stop = false});
    fs::create_directories(output("runs"));
    write_records_jsonl(output("runs/base.jsonl"), records);
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& r : records) counts[source_index(r.source)]++;
    log::info("base run: CK " + std::to_string(counts[0]) + ", ND " + std::to_string(counts[1]) + ", PK " + std::to_string(counts[2]));
    record_stage(Stage::Probe, {"runs/base.jsonl"});
}

void Pipeline::run_ablate() {
    const Model& model = res_->raw_model();
    const auto examples = read_examples_jsonl(output("examples.jsonl"));
    const ActivationStats stats = read_stats_csv(output("activation_stats.csv"));
    const std::string stats_hash = sha256_file(output("activation_stats.csv"));
    const auto selected = parse_neurons(json::parse(read_text(output("selected_neurons.json"))).at("neurons"));
    if (selected.empty()) throw std::runtime_error("no entropy neurons were selected; nothing to ablate");

    const std::size_t last = model.config.n_layers - 1;
    std::vector<NeuronId> all;
    for (std::size_t i = 0; i < model.config.d_ffn; ++i) all.push_back({last, i});
    const auto sets = sample_control_sets(all, selected, selected.size(), config_.n_controls, config_.seed);
    json sets_json = json::array();
    for (const auto& s : sets) sets_json.push_back(neuron_list(s));
    write_text(output("control_sets.json"),
               json({{"seed", config_.seed}, {"k", selected.size()}, {"sets", sets_json}}).dump(2) + "\n");
    std::vector<std::string> outputs = {"control_sets.json"};

    const FinalLayerReplay replay(model, res_->tok(), examples, config_.replay_batch);
    if (replay.base_records() != read_records_jsonl(output("runs/base.jsonl"))) {
        throw std::runtime_error("replayed base run differs from runs/base.jsonl");
    }

    for (AblationRule rule : config_.rules) {
        const std::string rname = to_string(rule);
        const HookPoint hook = make_ablation({selected, rule, stats_hash, std::nullopt, config_.scope}, stats);
        const auto records = replay.run(std::span(&hook, 1), {.ablation = "entropy/" + rname, .early_stop = false});
        write_records_jsonl(output("runs/entropy_" + rname + ".jsonl"), records);
        outputs.push_back("runs/entropy_" + rname + ".jsonl");
        log::info("entropy ablation (" + rname + "): " + std::to_string(replay.last_divergences()) + " examples left the base path");

        for (std::size_t c = 0; c < sets.size(); ++c) {
            const std::string rel = "controls/" + rname + "/" + control_name(c) + ".json";
            const std::string input_hash = sha256_hex(fingerprint_ + "|" + rname + "|" + std::to_string(c) + "|" +
                                                      neuron_list(sets[c]).dump() + "|" + stats_hash);
            outputs.push_back(rel);
            if (config_.retain_control_text) outputs.push_back("controls/" + rname + "/" + control_name(c) + ".jsonl");
            if (reuse_controls_ && fs::exists(output(rel))) {
                try {
                    if (json::parse(read_text(output(rel))).value("input_hash", "") == input_hash) continue;
                } catch (const std::exception&) {
                }
            }
            if (control_limit_ && controls_computed_ >= *control_limit_) throw std::runtime_error("control run limit reached");
            const HookPoint ch = make_ablation({sets[c], rule, stats_hash, config_.seed, config_.scope}, stats);
            const std::string label = "control/" + rname + "/" + std::to_string(c);
            const auto recs = replay.run(std::span(&ch, 1), {.ablation = label, .early_stop = !config_.retain_control_text});
            json sources = json::object();
            json entropies = json::object();
            for (const auto& r : recs) {
                sources[r.id] = std::string(to_string(r.source));
                entropies[r.id] = r.entropy;
            }
            if (config_.retain_control_text) write_records_jsonl(output("controls/" + rname + "/" + control_name(c) + ".jsonl"), recs);
            write_text(output(rel), json({{"input_hash", input_hash}, {"rule", rname}, {"index", c},
                                          {"neurons", neuron_list(sets[c])}, {"seed", config_.seed},
                                          {"sources", sources}, {"entropies", entropies}})
                                        .dump() + "\n");
            ++controls_computed_;
        }
    }
    record_stage(Stage::Ablate, outputs);
}

void Pipeline::run_metrics() {
    const RunOutcome base = RunOutcome::from_records(read_records_jsonl(output("runs/base.jsonl")));
    const json ns = json::parse(read_text(output("null_space.json")));
    const json sel = json::parse(read_text(output("selected_neurons.json")));
    std::vector<std::string> outputs;
    for (AblationRule rule : config_.rules) {
        const std::string rname = to_string(rule);
        const RunOutcome entropy = RunOutcome::from_records(read_records_jsonl(output("runs/entropy_" + rname + ".jsonl")));
        std::vector<RunOutcome> controls;
        for (std::size_t c = 0; c < config_.n_controls; ++c) {
            const json j = json::parse(read_text(output("controls/" + rname + "/" + control_name(c) + ".json")));
            RunOutcome o;
            for (const auto& [id, src] : j.at("sources").items()) o.sources[id] = parse_knowledge_source(src.get<std::string>());
            for (const auto& [id, h] : j.at("entropies").items()) o.entropies[id] = h.get<double>();
            controls.push_back(std::move(o));
        }
        const RuleReport report = rule_report(rname, base, entropy, controls);

        ReportContext ctx;
        ctx.n_examples = base.size();
        ctx.settings = {
            {"rule", rname},
            {"scope", scope_name(config_.scope)},
            {"seed", std::to_string(config_.seed)},
            {"n_controls", std::to_string(config_.n_controls)},
            {"entropy_neurons", sel.at("neurons").dump()},
            {"null_space_k", std::to_string(ns.at("k").get<std::size_t>())},
            {"score_surface", config_.preprocessed_surface ? "preprocessed" : "raw"},
            {"generation_window", "longest pool object in tokens + " + std::to_string(config_.probe.window_extra)},
            {"mode_bins", std::to_string(config_.stats.mode_bins)},
            {"activation_stats", "position-weighted"},
            {"model_sha256", input_hashes_.at("weights")},
            {"dataset_sha256", input_hashes_.at("dataset")},
        };
        write_text(output("metrics/" + rname + ".json"), report_json(report, base, ctx));
        write_summary_csv(output("metrics/" + rname + "_summary.csv"), report);
        write_controls_csv(output("metrics/" + rname + "_controls.csv"), report);
        outputs.insert(outputs.end(), {"metrics/" + rname + ".json", "metrics/" + rname + "_summary.csv",
                                       "metrics/" + rname + "_controls.csv"});
        const auto& q = report.summaries;
        if (auto it = q.find("gts"); it != q.end()) {
            log::info(rname + ": GTS " + std::to_string(report.entropy_set.gts) + ", Q " + std::to_string(it->second.q_value));
        }
    }
    record_stage(Stage::Metrics, outputs);
}

// ---------------------------------------------------------------- nano

fs::path write_nano_experiment(const fs::path& dir, std::uint64_t seed, std::size_t n_triplets, std::size_t n_controls) {
    const auto paths = nano::write_fixture(dir / "fixture", seed, n_triplets);
    (void)paths;
    ExperimentConfig c;
    c.weights = "fixture/model.safetensors";
    c.vocab = "fixture/vocab.json";
    c.merges = "fixture/merges.txt";
    c.dataset = "fixture/facts.jsonl";
    c.n_controls = n_controls;
    c.seed = seed;
    c.output_dir = "out";
    const fs::path cfg = dir / "experiment.json";
    write_text(cfg, c.to_json_text());
    return cfg;
}

} // namespace enprobe
