#include "doctest.h"
#include "json.hpp"

#include <cmath>

#include "enprobe/metrics.hpp"
#include "helpers.hpp"

using namespace enprobe;

namespace {

using KS = KnowledgeSource;

RunOutcome outcome(const std::vector<KS>& sources, const std::vector<double>& entropies = {}) {
    RunOutcome r;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        const std::string id = "e" + std::to_string(i);
        r.sources[id] = sources[i];
        r.entropies[id] = entropies.empty() ? 1.0 : entropies[i];
    }
    return r;
}

RunOutcome random_outcome(std::mt19937_64& rng, std::size_t n) {
    std::vector<KS> s(n);
    std::vector<double> h(n);
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = kSources[rng() % 3];
        h[i] = std::uniform_real_distribution<double>(0.0, 4.0)(rng);
    }
    return outcome(s, h);
}

} // namespace

TEST_SUITE("metrics") {

TEST_CASE("hand-computed transition statistics") {
    const auto base = outcome({KS::PK, KS::PK, KS::ND, KS::CK});
    const auto abl = outcome({KS::CK, KS::PK, KS::CK, KS::CK});
    CHECK(gts(base, abl) == 0.5);
    CHECK(*conversion_ratio(base, abl, KS::CK) == doctest::Approx(2.0 / 3.0));
    CHECK(*conversion_ratio(base, abl, KS::PK) == 0.0);
    CHECK(*conversion_ratio(base, abl, KS::ND) == 0.0);
    CHECK(*transition_score(base, abl, KS::PK, KS::CK) == 0.5);
    CHECK(*transition_score(base, abl, KS::PK, KS::PK) == 0.5);
    CHECK(*transition_score(base, abl, KS::ND, KS::CK) == 1.0);
    CHECK(*transition_score(base, abl, KS::CK, KS::CK) == 1.0);

    const auto m = transition_matrix(base, abl);
    CHECK(m.total() == 4);
    CHECK(m.counts[source_index(KS::PK)][source_index(KS::CK)] == 1);
    CHECK(m.row_total(KS::PK) == 2);
    CHECK(m.column_total(KS::CK) == 3);
}

TEST_CASE("five-example global transition score") {
    const auto base = outcome({KS::CK, KS::ND, KS::PK, KS::PK, KS::ND});
    const auto abl = outcome({KS::CK, KS::PK, KS::PK, KS::ND, KS::ND});
    CHECK(gts(base, abl) == doctest::Approx(0.4));
}

TEST_CASE("undefined ratios are null, not zero") {
    const auto base = outcome({KS::PK, KS::PK});
    const auto abl = outcome({KS::PK, KS::ND});
    CHECK_FALSE(transition_score(base, abl, KS::CK, KS::PK).has_value());
    CHECK_FALSE(conversion_ratio(outcome({KS::CK}), outcome({KS::CK}), KS::CK).has_value());
    const auto stats = run_statistics(base, abl);
    const auto flat = stats.flat();
    CHECK(flat.contains("ts.PK.ND"));
    CHECK_FALSE(flat.contains("ts.CK.PK"));

    const auto j = nlohmann::json::parse(report_json(rule_report("mean", base, abl, {}), base, {}));
    CHECK(j["ts"]["CK"]["PK"].is_null());
    CHECK(j["ts"]["PK"]["ND"] == 0.5);
}

TEST_CASE("transition rows sum to one and GTS equals the off-diagonal mass") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng() % 40;
        const auto base = random_outcome(rng, n);
        auto abl = random_outcome(rng, n);
        const auto m = transition_matrix(base, abl);
        CHECK(m.total() == n);
        std::size_t off = 0;
        for (auto k : kSources) {
            double row = 0.0;
            bool defined = false;
            for (auto k2 : kSources) {
                if (auto ts = transition_score(m, k, k2)) {
                    row += *ts;
                    defined = true;
                }
                if (k != k2) off += m.counts[source_index(k)][source_index(k2)];
            }
            CHECK(defined == (m.row_total(k) > 0));
            if (defined) CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
            if (auto cr = conversion_ratio(m, k)) {
                CHECK(*cr >= 0.0);
                CHECK(*cr <= 1.0);
            }
        }
        CHECK(gts(m) == doctest::Approx(static_cast<double>(off) / static_cast<double>(n)).epsilon(1e-12));
        CHECK(gts(base, base) == 0.0);
    }
}

TEST_CASE("q-value uses the midrank convention") {
    const std::vector<double> c = {0.1, 0.2, 0.2, 0.3};
    CHECK(control_summary(0.2, c).q_value == 50.0);
    CHECK(control_summary(0.25, c).q_value == 75.0);
    CHECK(control_summary(0.0, c).q_value == 0.0);
    CHECK(control_summary(1.0, c).q_value == 100.0);
    const auto s = control_summary(0.2, c);
    CHECK(s.mean == doctest::Approx(0.2));
    CHECK(s.std == doctest::Approx(std::sqrt(0.005)));
    CHECK(s.band_low == doctest::Approx(0.2 - 3.0 * std::sqrt(0.005)));
    CHECK_THROWS_AS(control_summary(0.1, std::vector<double>{0.2}), std::invalid_argument);
}

TEST_CASE("q-value is invariant to increasing affine maps") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> c(20);
        for (auto& v : c) v = std::round(u(rng) * 10.0) / 10.0; // ties are common
        const double e = std::round(u(rng) * 10.0) / 10.0;
        const double a = 0.5 + std::abs(u(rng)) * 3.0, b = u(rng) * 5.0;
        std::vector<double> mapped(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) mapped[i] = a * c[i] + b;
        const double q = control_summary(e, c).q_value;
        CHECK(q >= 0.0);
        CHECK(q <= 100.0);
        // Ties survive the map only if exact; compare against an explicit count instead.
        double below = 0.0;
        for (double v : mapped) {
            const double em = a * e + b;
            below += v < em ? 1.0 : (v == em ? 0.5 : 0.0);
        }
        CHECK(control_summary(a * e + b, mapped).q_value == doctest::Approx(100.0 * below / 20.0));
        if (std::abs(q - 100.0 * below / 20.0) > 1e-9) {
            // Only floating-point tie breaking can differ.
            bool tie = false;
            for (double v : c) tie = tie || v == e;
            CHECK(tie);
        }
    }
}

TEST_CASE("entropy effect") {
    const auto base = outcome({KS::PK, KS::CK, KS::ND}, {1.0, 2.0, 3.0});
    const auto abl = outcome({KS::PK, KS::CK, KS::ND}, {1.5, 1.0, 3.0});
    CHECK(entropy_effect(base, abl) == doctest::Approx(0.5));
    CHECK(entropy_effect(base, base) == 0.0);
}

TEST_CASE("mismatched example ids are rejected") {
    const auto a = outcome({KS::PK, KS::CK});
    auto b = outcome({KS::PK, KS::CK});
    b.sources["zzz"] = KS::ND;
    b.entropies["zzz"] = 0.0;
    CHECK_THROWS_AS(require_same_ids(a, b), std::invalid_argument);
    CHECK_THROWS_AS(gts(a, b), std::invalid_argument);
    CHECK_THROWS_AS(transition_matrix(a, b), std::invalid_argument);
    CHECK_NOTHROW(require_same_ids(a, a));
}

TEST_CASE("records convert to outcomes") {
    std::vector<ProbeRecord> recs(2);
    recs[0].id = "a";
    recs[0].source = KS::CK;
    recs[0].entropy = 0.7;
    recs[1].id = "b";
    recs[1].source = KS::ND;
    recs[1].entropy = 1.2;
    const auto o = RunOutcome::from_records(recs);
    CHECK(o.size() == 2);
    CHECK(o.sources.at("a") == KS::CK);
    CHECK(o.entropies.at("b") == 1.2);
    recs[1].id = "a";
    CHECK_THROWS(RunOutcome::from_records(recs));
}

TEST_CASE("rule report, JSON and CSV outputs") {
    std::mt19937_64 rng(8);
    const auto base = random_outcome(rng, 30);
    const auto entropy_run = random_outcome(rng, 30);
    std::vector<RunOutcome> controls;
    for (int i = 0; i < 10; ++i) controls.push_back(random_outcome(rng, 30));
    const auto report = rule_report("median", base, entropy_run, controls);
    CHECK(report.controls.size() == 10);
    REQUIRE(report.summaries.contains("gts"));
    CHECK(report.summaries.at("gts").values.size() == 10);
    CHECK(report.summaries.at("gts").entropy_value == gts(base, entropy_run));

    const ReportContext ctx{.n_examples = 30, .settings = {{"model", "nano"}}};
    const std::string text = report_json(report, base, ctx);
    CHECK(text == report_json(rule_report("median", base, entropy_run, controls), base, ctx));
    const auto j = nlohmann::json::parse(text);
    for (const char* key : {"gts", "cr", "ts", "counts", "controls", "q_values", "entropy_effect", "metadata"}) CHECK(j.contains(key));
    CHECK(j["metadata"]["model"] == "nano");
    CHECK(j["q_values"]["gts"] == report.summaries.at("gts").q_value);

    testutil::TempDir dir("metrics");
    write_summary_csv(dir / "s.csv", report);
    write_controls_csv(dir / "c.csv", report);
    const std::string s = testutil::read_file(dir / "s.csv");
    CHECK(s.starts_with("rule,statistic,entropy_value,control_mean,control_std,band_low,band_high,q_value,n_controls\n"));
    CHECK(std::count(s.begin(), s.end(), '\n') == static_cast<long>(report.summaries.size() + 1));
    const std::string c = testutil::read_file(dir / "c.csv");
    CHECK(c.starts_with("rule,control,gts,"));
    CHECK(std::count(c.begin(), c.end(), '\n') == 11);
}

} // TEST_SUITE
