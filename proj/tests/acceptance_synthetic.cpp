// Acceptance checks that need no external model: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>

#include "json.hpp"

#include "enprobe/log.hpp"
#include "enprobe/metrics.hpp"
#include "enprobe/nano.hpp"
#include "enprobe/pipeline.hpp"
#include "enprobe/weight_prep.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace enprobe;

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

// LogitVar and rho of every final-layer neuron of 50 random nano models,
// against per-token and explicit-projection oracles.
void formula_oracles() {
    const auto start = std::chrono::steady_clock::now();
    double worst_lv = 0.0, worst_rho = 0.0;
    std::size_t checked = 0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        const Model m = nano::make_model(seed);
        const EffectiveWeights e = effective_weights(m);
        const Matrix rows = e.w_out_centered.transposed();
        const NullSpaceBasis basis = effective_null_space(e.w_u_centered);
        const Eigen::MatrixXd v0 = oracles::to_eigen(basis);
        const auto scores = score_neurons(rows, e.w_u_centered, basis, m.config.n_layers - 1);
        for (std::size_t i = 0; i < rows.rows; ++i) {
            worst_lv = std::max(worst_lv, std::abs(scores[i].logit_var - oracles::logit_var_oracle(rows.row(i), e.w_u_centered)));
            worst_rho = std::max(worst_rho, std::abs(scores[i].rho - oracles::rho_oracle(rows.row(i), v0)));
            ++checked;
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report("1", worst_lv <= 1e-10 && worst_rho <= 1e-10 && secs < 10.0,
           fmt("formula oracles: max |dLogitVar| %.2e, max |drho| %.2e, ", worst_lv, worst_rho) +
               std::to_string(checked) + fmt(" neurons in %.2f s (limit 1e-10, 10 s)", secs));
}

double max_centered_diff(std::span<const float> a, std::span<const float> b) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs((a[i] - ma) - (b[i] - mb)));
    return worst;
}

void preprocessing_equivalence() {
    const Model raw = nano::make_model(2);
    const Model pre = preprocess(raw);
    std::mt19937_64 rng(500);
    double worst = 0.0;
    std::size_t greedy_mismatch = 0;
    for (int i = 0; i < 500; ++i) {
        const auto prompt = testutil::random_tokens(rng, 1 + i % 40, raw.config.vocab_size);
        const Matrix a = forward(raw, prompt).logits;
        const Matrix b = forward(pre, prompt).logits;
        for (std::size_t r = 0; r < a.rows; ++r) worst = std::max(worst, max_centered_diff(a.row(r), b.row(r)));
        if (greedy_generate(raw, prompt, 8) != greedy_generate(pre, prompt, 8)) ++greedy_mismatch;
    }

    // Softmax is blind to the per-token offset that centering the unembedding removes.
    const Matrix w_u = testutil::random_matrix(rng, 64, 16);
    const Matrix c = center_unembedding(w_u);
    double worst_p = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto x = testutil::random_vector(rng, 16, 1.5f);
        std::vector<float> la(64), lc(64);
        for (std::size_t t = 0; t < 64; ++t) {
            double s = 0.0, sc = 0.0;
            for (std::size_t j = 0; j < 16; ++j) {
                s += static_cast<double>(w_u(t, j)) * x[j];
                sc += static_cast<double>(c(t, j)) * x[j];
            }
            la[t] = static_cast<float>(s);
            lc[t] = static_cast<float>(sc);
        }
        const auto pa = softmax(la), pc = softmax(lc);
        for (std::size_t t = 0; t < 64; ++t) worst_p = std::max(worst_p, std::abs(pa[t] - pc[t]));
    }
    report("2", worst <= 1e-4 && greedy_mismatch == 0 && worst_p <= 1e-6,
           fmt("preprocessing: max centered logit diff %.2e over 500 prompts, greedy mismatches %.0f, "
               "max softmax diff %.2e (limits 1e-4, 0, 1e-6)",
               worst, static_cast<double>(greedy_mismatch), worst_p));
}

void null_space_recovery() {
    std::mt19937_64 rng(3);
    double worst = 0.0;
    bool k_ok = true;
    const std::size_t shapes[][3] = {{100, 20, 5}, {64, 16, 3}, {200, 40, 8}, {50, 30, 1}, {120, 24, 10}};
    for (const auto& [rows, cols, kernel_dim] : shapes) {
        const std::size_t rank = cols - kernel_dim;
        const Eigen::MatrixXd u = oracles::random_orthonormal(rng, rows, rank);
        const Eigen::MatrixXd v = oracles::random_orthonormal(rng, cols, cols);
        Eigen::VectorXd s(rank);
        for (std::size_t i = 0; i < rank; ++i) s[i] = 5.0 + 0.25 * static_cast<double>(rank - i);
        const Eigen::MatrixXd a = u * s.asDiagonal() * v.leftCols(rank).transpose();
        std::vector<double> flat(rows * cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t col = 0; col < cols; ++col) flat[r * cols + col] = a(r, col);
        const NullSpaceBasis b = effective_null_space(flat, rows, cols);
        k_ok = k_ok && b.k >= kernel_dim;
        worst = std::max(worst, oracles::max_principal_angle(v.rightCols(kernel_dim), oracles::to_eigen(b)));
    }
    report("3a", worst < 1e-5 && k_ok,
           fmt("null space: max principal angle %.2e rad over 5 constructed matrices (limit 1e-5)", worst) +
               (k_ok ? "" : "; a recovered basis is smaller than the kernel"));
}

bool metric_identities_hold(const RunOutcome& base, const RunOutcome& ablated, double& worst) {
    const TransitionMatrix m = transition_matrix(base, ablated);
    double kept = 0.0;
    for (auto k : kSources) {
        const double share = static_cast<double>(m.row_total(k)) / static_cast<double>(m.total());
        double row = 0.0;
        bool defined = false;
        for (auto k2 : kSources) {
            if (auto ts = transition_score(m, k, k2)) {
                row += *ts;
                defined = true;
            }
        }
        if (defined) worst = std::max(worst, std::abs(row - 1.0));
        if (auto diag = transition_score(m, k, k)) kept += share * *diag;
    }
    worst = std::max(worst, std::abs(gts(m) - (1.0 - kept)));
    return worst <= 1e-9;
}

void metric_identities(const std::filesystem::path& run_dir) {
    std::mt19937_64 rng(6);
    double worst = 0.0;
    std::size_t pairs = 0;
    for (int i = 0; i < 20; ++i) {
        RunOutcome a, b;
        const std::size_t n = 5 + rng() % 200;
        for (std::size_t j = 0; j < n; ++j) {
            const std::string id = "x" + std::to_string(j);
            a.sources[id] = kSources[rng() % 3];
            b.sources[id] = kSources[rng() % 3];
            a.entropies[id] = b.entropies[id] = 0.0;
        }
        metric_identities_hold(a, b, worst);
        ++pairs;
    }
    // Every run of the nano pipeline: the entropy set and each control.
    const auto base = RunOutcome::from_records(read_records_jsonl(run_dir / "runs/base.jsonl"));
    metric_identities_hold(base, RunOutcome::from_records(read_records_jsonl(run_dir / "runs/entropy_mean.jsonl")), worst);
    ++pairs;
    for (const auto& e : std::filesystem::directory_iterator(run_dir / "controls/mean")) {
        const auto j = nlohmann::json::parse(testutil::read_file(e.path()));
        RunOutcome c;
        for (const auto& [id, src] : j.at("sources").items()) c.sources[id] = parse_knowledge_source(src.get<std::string>());
        c.entropies = j.at("entropies").get<std::map<std::string, double>>();
        metric_identities_hold(base, c, worst);
        ++pairs;
    }
    report("6", worst <= 1e-9,
           fmt("metric identities: max deviation %.2e over ", worst) + std::to_string(pairs) +
               " run pairs (20 synthetic + nano pipeline runs; limit 1e-9)");
}

} // namespace

int main() {
    log::set_quiet(true);
    const auto saved = log::set_sink([](log::Level, const std::string&) {});

    formula_oracles();
    preprocessing_equivalence();
    null_space_recovery();

    testutil::TempDir a("accept-a"), b("accept-b");
    std::string determinism;
    bool same = false;
    try {
        Pipeline pa(ExperimentConfig::load(write_nano_experiment(a.path(), 1, 40, 20)));
        Pipeline pb(ExperimentConfig::load(write_nano_experiment(b.path(), 1, 40, 20)));
        pa.run_all();
        pb.run_all();
        const std::string ja = testutil::read_file(pa.output("metrics/mean.json"));
        same = !ja.empty() && ja == testutil::read_file(pb.output("metrics/mean.json"));
        determinism = same ? "two nano pipeline runs gave byte-identical metrics JSON (" + std::to_string(ja.size()) + " bytes)"
                           : "metrics JSON differs between two runs with the same seed";
        metric_identities(pa.config().output_dir);
    } catch (const std::exception& e) {
        determinism = std::string("pipeline error: ") + e.what();
        report("6", false, determinism);
    }
    report("7", same, determinism);

    log::set_sink(saved);
    return failures == 0 ? 0 : 1;
}
