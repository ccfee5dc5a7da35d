#include "enprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace enprobe {

using json = nlohmann::json;

RunOutcome RunOutcome::from_records(std::span<const ProbeRecord> records) {
    RunOutcome o;
    for (const auto& r : records) {
        if (!o.sources.emplace(r.id, r.source).second) throw std::invalid_argument("duplicate example id '" + r.id + "'");
        o.entropies.emplace(r.id, r.entropy);
    }
    return o;
}

std::size_t source_index(KnowledgeSource k) {
    switch (k) {
    case KnowledgeSource::CK: return 0;
    case KnowledgeSource::ND: return 1;
    case KnowledgeSource::PK: return 2;
    }
    return 1;
}

std::size_t TransitionMatrix::total() const {
    std::size_t n = 0;
    for (const auto& row : counts)
        for (auto c : row) n += c;
    return n;
}

std::size_t TransitionMatrix::row_total(KnowledgeSource from) const {
    std::size_t n = 0;
    for (auto c : counts[source_index(from)]) n += c;
    return n;
}

std::size_t TransitionMatrix::column_total(KnowledgeSource to) const {
    std::size_t n = 0;
    for (const auto& row : counts) n += row[source_index(to)];
    return n;
}

void require_same_ids(const RunOutcome& base, const RunOutcome& ablated) {
    std::vector<std::string> only_base, only_ablated;
    for (const auto& [id, _] : base.sources) {
        if (!ablated.sources.contains(id)) only_base.push_back(id);
    }
    for (const auto& [id, _] : ablated.sources) {
        if (!base.sources.contains(id)) only_ablated.push_back(id);
    }
    if (only_base.empty() && only_ablated.empty()) return;
    std::string msg = "example id sets differ:";
    const auto list = [&](const char* label, const std::vector<std::string>& ids) {
        if (ids.empty()) return;
        msg += std::string(" ") + label + " [";
        for (std::size_t i = 0; i < ids.size() && i < 10; ++i) msg += (i ? ", " : "") + ids[i];
        if (ids.size() > 10) msg += ", ... (" + std::to_string(ids.size()) + " total)";
        msg += "]";
    };
    list("only in base:", only_base);
    list("only in ablated:", only_ablated);
    throw std::invalid_argument(msg);
}

TransitionMatrix transition_matrix(const RunOutcome& base, const RunOutcome& ablated) {
    require_same_ids(base, ablated);
    TransitionMatrix m;
    for (const auto& [id, src] : base.sources) m.counts[source_index(src)][source_index(ablated.sources.at(id))]++;
    return m;
}

double gts(const TransitionMatrix& m) {
    const std::size_t n = m.total();
    if (n == 0) throw std::invalid_argument("gts: no examples");
    std::size_t same = 0;
    for (std::size_t k = 0; k < 3; ++k) same += m.counts[k][k];
    return static_cast<double>(n - same) / static_cast<double>(n);
}

double gts(const RunOutcome& base, const RunOutcome& ablated) { return gts(transition_matrix(base, ablated)); }

std::optional<double> conversion_ratio(const TransitionMatrix& m, KnowledgeSource k) {
    const std::size_t ki = source_index(k);
    std::size_t denom = 0;
    std::size_t num = 0;
    for (std::size_t from = 0; from < 3; ++from) {
        if (from == ki) continue;
        for (std::size_t to = 0; to < 3; ++to) denom += m.counts[from][to];
        num += m.counts[from][ki];
    }
    if (denom == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(denom);
}

std::optional<double> conversion_ratio(const RunOutcome& base, const RunOutcome& ablated, KnowledgeSource k) {
    return conversion_ratio(transition_matrix(base, ablated), k);
}

std::optional<double> transition_score(const TransitionMatrix& m, KnowledgeSource k, KnowledgeSource k2) {
    const std::size_t row = m.row_total(k);
    if (row == 0) return std::nullopt;
    return static_cast<double>(m.counts[source_index(k)][source_index(k2)]) / static_cast<double>(row);
}

std::optional<double> transition_score(const RunOutcome& base, const RunOutcome& ablated, KnowledgeSource k,
                                       KnowledgeSource k2) {
    return transition_score(transition_matrix(base, ablated), k, k2);
}

ControlSummary control_summary(double entropy_value, std::span<const double> control_values) {
    if (control_values.size() < 2) throw std::invalid_argument("control_summary: need at least 2 control values");
    ControlSummary s;
    s.values.assign(control_values.begin(), control_values.end());
    s.entropy_value = entropy_value;
    const auto n = static_cast<double>(control_values.size());
    double sum = 0.0;
    for (double v : control_values) sum += v;
    s.mean = sum / n;
    double sq = 0.0;
    for (double v : control_values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / n);
    s.band_low = s.mean - 3.0 * s.std;
    s.band_high = s.mean + 3.0 * s.std;
    double below = 0.0;
    for (double v : control_values) {
        if (v < entropy_value) below += 1.0;
        else if (v == entropy_value) below += 0.5;
    }
    s.q_value = 100.0 * below / n;
    return s;
}

double entropy_effect(const RunOutcome& base, const RunOutcome& ablated) {
    require_same_ids(base, ablated);
    if (base.entropies.empty()) throw std::invalid_argument("entropy_effect: no examples");
    double sum = 0.0;
    for (const auto& [id, h] : base.entropies) sum += std::abs(ablated.entropies.at(id) - h);
    return sum / static_cast<double>(base.entropies.size());
}

// ---------------------------------------------------------------- report

std::map<std::string, double> RunStatistics::flat() const {
    std::map<std::string, double> out;
    out["gts"] = gts;
    out["entropy_effect"] = entropy_effect;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string a(to_string(kSources[i]));
        if (cr[i]) out["cr." + a] = *cr[i];
        for (std::size_t j = 0; j < 3; ++j) {
            if (ts[i][j]) out["ts." + a + "." + std::string(to_string(kSources[j]))] = *ts[i][j];
        }
    }
    return out;
}

RunStatistics run_statistics(const RunOutcome& base, const RunOutcome& ablated) {
    RunStatistics s;
    s.matrix = transition_matrix(base, ablated);
    s.gts = gts(s.matrix);
    for (std::size_t i = 0; i < 3; ++i) {
        s.cr[i] = conversion_ratio(s.matrix, kSources[i]);
        for (std::size_t j = 0; j < 3; ++j) s.ts[i][j] = transition_score(s.matrix, kSources[i], kSources[j]);
    }
    s.entropy_effect = entropy_effect(base, ablated);
    return s;
}

RuleReport rule_report(const std::string& rule, const RunOutcome& base, const RunOutcome& entropy_run,
                       std::span<const RunOutcome> control_runs) {
    RuleReport r;
    r.rule = rule;
    r.entropy_set = run_statistics(base, entropy_run);
    for (const auto& c : control_runs) r.controls.push_back(run_statistics(base, c));
    for (const auto& [key, value] : r.entropy_set.flat()) {
        std::vector<double> values;
        for (const auto& c : r.controls) {
            const auto f = c.flat();
            if (auto it = f.find(key); it != f.end()) values.push_back(it->second);
        }
        if (values.size() >= 2) r.summaries[key] = control_summary(value, values);
    }
    return r;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json ts_json(const std::array<std::array<std::optional<double>, 3>, 3>& ts) {
    json j = json::object();
    for (std::size_t i = 0; i < 3; ++i) {
        json row = json::object();
        for (std::size_t k = 0; k < 3; ++k) row[std::string(to_string(kSources[k]))] = opt(ts[i][k]);
        j[std::string(to_string(kSources[i]))] = row;
    }
    return j;
}

json counts_json(const TransitionMatrix& m) {
    json j = json::object();
    for (std::size_t i = 0; i < 3; ++i) {
        json row = json::object();
        for (std::size_t k = 0; k < 3; ++k) row[std::string(to_string(kSources[k]))] = m.counts[i][k];
        j[std::string(to_string(kSources[i]))] = row;
    }
    return j;
}

} // namespace

std::string report_json(const RuleReport& report, const RunOutcome& base, const ReportContext& context) {
    const RunStatistics& e = report.entropy_set;
    json j;
    j["rule"] = report.rule;
    j["gts"] = e.gts;
    json cr = json::object();
    for (std::size_t i = 0; i < 3; ++i) cr[std::string(to_string(kSources[i]))] = opt(e.cr[i]);
    j["cr"] = cr;
    j["ts"] = ts_json(e.ts);
    j["counts"] = counts_json(e.matrix);
    j["entropy_effect"] = e.entropy_effect;

    json base_counts = json::object();
    for (auto k : kSources) base_counts[std::string(to_string(k))] = 0;
    for (const auto& [id, src] : base.sources) base_counts[std::string(to_string(src))] = base_counts[std::string(to_string(src))].get<std::size_t>() + 1;
    j["base_counts"] = base_counts;

    json controls = json::object();
    json q = json::object();
    for (const auto& [key, s] : report.summaries) {
        controls[key] = {{"values", s.values}, {"mean", s.mean}, {"std", s.std}, {"band", {s.band_low, s.band_high}},
                         {"entropy_value", s.entropy_value}, {"q_value", s.q_value}};
        q[key] = s.q_value;
    }
    j["controls"] = controls;
    j["q_values"] = q;
    j["n_controls"] = report.controls.size();

    json meta = json::object();
    meta["n_examples"] = context.n_examples;
    meta["q_value_rule"] = "midrank: 100 * (controls below + 0.5 * ties) / n";
    meta["std"] = "population";
    meta["band_sigma"] = 3;
    meta["gts_definition"] = "fraction of examples whose knowledge source changed, over the full dataset";
    meta["undefined"] = "null when a ratio has an empty denominator";
    for (const auto& [k, v] : context.settings) meta[k] = v;
    j["metadata"] = meta;
    return j.dump(2) + "\n";
}

void write_summary_csv(const std::filesystem::path& path, const RuleReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    out << "rule,statistic,entropy_value,control_mean,control_std,band_low,band_high,q_value,n_controls\n";
    for (const auto& [key, s] : report.summaries) {
        out << report.rule << ',' << key << ',' << s.entropy_value << ',' << s.mean << ',' << s.std << ',' << s.band_low
            << ',' << s.band_high << ',' << s.q_value << ',' << s.values.size() << '\n';
    }
}

void write_controls_csv(const std::filesystem::path& path, const RuleReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.precision(17);
    std::vector<std::string> keys = {"gts"};
    for (auto a : kSources) keys.push_back("cr." + std::string(to_string(a)));
    for (auto a : kSources)
        for (auto b : kSources) keys.push_back("ts." + std::string(to_string(a)) + "." + std::string(to_string(b)));
    keys.push_back("entropy_effect");
    out << "rule,control";
    for (const auto& k : keys) out << ',' << k;
    out << '\n';
    for (std::size_t c = 0; c < report.controls.size(); ++c) {
        const auto f = report.controls[c].flat();
        out << report.rule << ',' << c;
        for (const auto& k : keys) {
            out << ',';
            if (auto it = f.find(k); it != f.end()) out << it->second;
        }
        out << '\n';
    }
}

} // namespace enprobe
