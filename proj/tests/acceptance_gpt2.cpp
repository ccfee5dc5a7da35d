// Acceptance checks on GPT-2 small. Needs the released weights and a probing
// dataset, supplied through the environment:
//   ENPROBE_GPT2_DIR        directory with model.safetensors, vocab.json, merges.txt
//   ENPROBE_PROBE_DATASET   triplets (jsonl) or LAMA records
//   ENPROBE_PROBE_RELATIONS LAMA relation templates (selects the lama format)
//   ENPROBE_MAX_TRIPLETS    optional cap on triplets read
//   ENPROBE_GPT2_OUT        optional output directory (default: a temp dir)
// Without them every criterion is reported as SKIP and the exit code is 77.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>

#include "json.hpp"

#include "enprobe/metrics.hpp"
#include "enprobe/pipeline.hpp"
#include "helpers.hpp"

using namespace enprobe;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int failures = 0;

void report(const char* id, bool ok, const std::string& detail) {
    std::printf("%s criterion %s: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

std::optional<std::string> env(const char* name) {
    const char* v = std::getenv(name);
    if (!v || !*v) return std::nullopt;
    return std::string(v);
}

json read_json(const fs::path& p) { return json::parse(testutil::read_file(p)); }

} // namespace

int main() {
    const auto dir = env("ENPROBE_GPT2_DIR");
    const auto dataset = env("ENPROBE_PROBE_DATASET");
    if (!dir || !dataset || !fs::exists(fs::path(*dir) / "model.safetensors")) {
        const char* why = "GPT-2 small weights or probing dataset not available (set ENPROBE_GPT2_DIR and ENPROBE_PROBE_DATASET)";
        for (const char* id : {"3b", "4", "5", "8"}) std::printf("SKIP criterion %s: %s\n", id, why);
        return 77;
    }

    ExperimentConfig cfg = ExperimentConfig::load(fs::path(ENPROBE_CONFIG_DIR) / "gpt2_small.json");
    cfg.weights = fs::path(*dir) / "model.safetensors";
    if (fs::exists(fs::path(*dir) / "vocab.json")) cfg.vocab = fs::path(*dir) / "vocab.json";
    if (fs::exists(fs::path(*dir) / "merges.txt")) cfg.merges = fs::path(*dir) / "merges.txt";
    cfg.dataset = *dataset;
    if (const auto rel = env("ENPROBE_PROBE_RELATIONS")) {
        cfg.dataset_format = "lama";
        cfg.relations = *rel;
    }
    if (const auto n = env("ENPROBE_MAX_TRIPLETS")) cfg.max_triplets = std::stoul(*n);
    std::optional<testutil::TempDir> tmp;
    if (const auto out = env("ENPROBE_GPT2_OUT")) {
        cfg.output_dir = *out;
    } else {
        tmp.emplace("gpt2");
        cfg.output_dir = tmp->path();
    }

    Pipeline p(cfg);
    const auto start = std::chrono::steady_clock::now();
    try {
        p.resume();
    } catch (const std::exception& e) {
        for (const char* id : {"3b", "4", "5", "8"}) report(id, false, std::string("pipeline failed: ") + e.what());
        return 1;
    }
    const double hours = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 3600.0;

    // Null space: the configured override gives k = 40.
    const json ns = read_json(p.output("null_space.json"));
    const std::size_t k = ns.at("k").get<std::size_t>();
    report("3b", cfg.null_space_k == 40u && ns.at("from_override").get<bool>() && k == 40,
           "GPT-2 small null space k = " + std::to_string(k) + " from the configured override (expected 40)");

    // Selection: about 2 permille of 3072 neurons, each in the top 1% by rho.
    const auto scores = read_scores_csv(p.output("neuron_scores.csv"));
    std::vector<double> rhos;
    for (const auto& s : scores) rhos.push_back(s.rho);
    const double p99 = percentile(rhos, 99.0);
    const json sel = read_json(p.output("selected_neurons.json"));
    bool all_top = true;
    for (const auto& d : sel.at("details")) all_top = all_top && d.at("rho").get<double>() >= p99;
    const std::size_t n_sel = sel.at("neurons").size();
    report("4", scores.size() == 3072 && n_sel >= 5 && n_sel <= 7 && all_top,
           std::to_string(n_sel) + " entropy neurons selected from " + std::to_string(scores.size()) +
               fmt(" (expected about 6); all with rho >= p99 = %.4f: ", p99) + (all_top ? "yes" : "no"));

    // End-to-end reproduction under mean ablation.
    const json m = read_json(p.output("metrics/mean.json"));
    const std::size_t n_examples = m.at("metadata").at("n_examples").get<std::size_t>();
    const std::size_t n_controls = m.at("n_controls").get<std::size_t>();
    const double q = m.at("q_values").at("gts").get<double>();
    const json& ts = m.at("ts");
    const double nd_ck = ts.at("ND").at("CK").is_null() ? std::nan("") : 100.0 * ts.at("ND").at("CK").get<double>();
    const double ck_ck = ts.at("CK").at("CK").is_null() ? std::nan("") : 100.0 * ts.at("CK").at("CK").get<double>();
    const bool ok5 = n_examples >= 1000 && n_controls >= 100 && q >= 95.0 && std::abs(nd_ck - 3.3) <= 1.5 &&
                     ck_ck >= 99.0 && hours <= 2.0;
    report("5", ok5,
           fmt("GTS Q-value %.1f (>= 95), TS(ND->CK) %.2f%% (3.3 +- 1.5), ", q, nd_ck) +
               fmt("TS(CK->CK) %.2f%% (>= 99), %.2f h (<= 2 h); ", ck_ck, hours) + std::to_string(n_examples) +
               " examples (>= 1000), " + std::to_string(n_controls) + " controls (>= 100)");

    // Entropy property: the entropy set shifts first-token entropy more than 90% of controls.
    const double effect = m.at("entropy_effect").get<double>();
    const auto control_effects = m.at("controls").at("entropy_effect").at("values").get<std::vector<double>>();
    const double p90 = percentile(control_effects, 90.0);
    report("8", effect > p90, fmt("mean |entropy shift| %.4f nats vs control p90 %.4f", effect, p90));

    return failures == 0 ? 0 : 1;
}
