#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "enprobe/probing.hpp"

namespace enprobe {

// Knowledge source (and first-token entropy) per example id for one run.
struct RunOutcome {
    std::map<std::string, KnowledgeSource> sources;
    std::map<std::string, double> entropies;

    static RunOutcome from_records(std::span<const ProbeRecord> records);
    std::size_t size() const { return sources.size(); }
};

// Row/column order used by every 3x3 quantity.
inline constexpr std::array<KnowledgeSource, 3> kSources = {KnowledgeSource::CK, KnowledgeSource::ND,
                                                            KnowledgeSource::PK};
std::size_t source_index(KnowledgeSource k);

// counts[from][to]: base source -> ablated source.
struct TransitionMatrix {
    std::array<std::array<std::size_t, 3>, 3> counts{};

    std::size_t total() const;
    std::size_t row_total(KnowledgeSource from) const;
    std::size_t column_total(KnowledgeSource to) const;
};

// Throws std::invalid_argument listing (part of) the symmetric difference.
void require_same_ids(const RunOutcome& base, const RunOutcome& ablated);

TransitionMatrix transition_matrix(const RunOutcome& base, const RunOutcome& ablated);

// Fraction of examples whose source changed.
double gts(const RunOutcome& base, const RunOutcome& ablated);
double gts(const TransitionMatrix& m);

// Fraction of the examples not originally K that became K; nullopt if none.
std::optional<double> conversion_ratio(const RunOutcome& base, const RunOutcome& ablated, KnowledgeSource k);
std::optional<double> conversion_ratio(const TransitionMatrix& m, KnowledgeSource k);

// Fraction of the originally-K examples that ended in K2; nullopt if none.
std::optional<double> transition_score(const RunOutcome& base, const RunOutcome& ablated, KnowledgeSource k,
                                       KnowledgeSource k2);
std::optional<double> transition_score(const TransitionMatrix& m, KnowledgeSource k, KnowledgeSource k2);

struct ControlSummary {
    std::vector<double> values;
    double mean = 0.0;
    double std = 0.0; // population
    double band_low = 0.0;
    double band_high = 0.0;
    double entropy_value = 0.0;
    double q_value = 0.0; // 100 * (below + ties / 2) / n
};

ControlSummary control_summary(double entropy_value, std::span<const double> control_values);

// Mean over examples of |H_ablated - H_base|.
double entropy_effect(const RunOutcome& base, const RunOutcome& ablated);

// Every statistic the report tracks for one ablated run against the base.
struct RunStatistics {
    TransitionMatrix matrix;
    double gts = 0.0;
    std::array<std::optional<double>, 3> cr{};
    std::array<std::array<std::optional<double>, 3>, 3> ts{};
    double entropy_effect = 0.0;

    // Flat "gts", "cr.CK", "ts.ND.CK", "entropy_effect" view; undefined entries omitted.
    std::map<std::string, double> flat() const;
};

RunStatistics run_statistics(const RunOutcome& base, const RunOutcome& ablated);

struct RuleReport {
    std::string rule;
    RunStatistics entropy_set;
    std::vector<RunStatistics> controls;
    std::map<std::string, ControlSummary> summaries; // keyed like RunStatistics::flat()
};

RuleReport rule_report(const std::string& rule, const RunOutcome& base, const RunOutcome& entropy_run,
                       std::span<const RunOutcome> control_runs);

struct ReportContext {
    std::size_t n_examples = 0;
    std::map<std::string, std::string> settings; // recorded verbatim under "metadata"
};

// {gts, cr, ts, counts, controls, q_values, entropy_effect, metadata}. Byte-stable for equal inputs.
std::string report_json(const RuleReport& report, const RunOutcome& base, const ReportContext& context);

// rule,statistic,entropy_value,control_mean,control_std,band_low,band_high,q_value,n_controls
void write_summary_csv(const std::filesystem::path& path, const RuleReport& report);
// rule,control,gts,cr.CK,...,entropy_effect: one row per control run (empty cell when undefined).
void write_controls_csv(const std::filesystem::path& path, const RuleReport& report);

} // namespace enprobe
