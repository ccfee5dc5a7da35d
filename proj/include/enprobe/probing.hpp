#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "enprobe/model.hpp"
#include "enprobe/tokenizer.hpp"

namespace enprobe {

enum class KnowledgeSource { PK, CK, ND };

std::string_view to_string(KnowledgeSource s);
KnowledgeSource parse_knowledge_source(std::string_view s);

// A subject, a relation template such as "[S] is the capital of [O]" (one
// subject slot, ending at the object slot) and the objects sharing the relation.
struct FactTriplet {
    std::string id;
    std::string subject;
    std::string relation_template;
    std::vector<std::string> object_pool;
};

inline constexpr std::string_view kSubjectSlot = "[S]";
inline constexpr std::string_view kObjectSlot = "[O]";

// Throws std::invalid_argument naming the triplet and the violated rule.
void validate_triplet(const FactTriplet& t);

// {"id", "subject", "template", "object_pool"} per line.
std::vector<FactTriplet> load_triplets_jsonl(const std::filesystem::path& path);
void write_triplets_jsonl(const std::filesystem::path& path, std::span<const FactTriplet> triplets);

// Adapter for LAMA-style records ({"sub_label", "obj_label", "predicate_id",
// optional "template" and "uuid"}). Templates use [X]/[Y] and may end in " .";
// when a record has none it is looked up by predicate in `relations`
// ({"relation", "template"} per line). Object pools are the distinct obj_labels
// of each predicate; predicates with fewer than `min_pool` objects are dropped.
std::vector<FactTriplet> load_lama_jsonl(const std::filesystem::path& path,
                                         const std::optional<std::filesystem::path>& relations = std::nullopt,
                                         std::size_t min_pool = 4);

// "Paris is the capital of" (template up to the object slot, trailing space removed).
std::string query_text(const FactTriplet& t);
// "Paris is the capital of France"
std::string statement_text(const FactTriplet& t, std::string_view object);
// Statement with the context object, ". ", then the query.
std::string probe_prompt(const FactTriplet& t, std::string_view ck_object);

struct ProbeSettings {
    std::size_t n_ck = 3;            // contradicting objects per triplet
    std::size_t window_extra = 2;    // W = longest pool object in tokens + window_extra
    bool length_normalized = false;  // candidate score: mean instead of sum of token log-probs
    std::string delimiters = ".\n,;!?"; // PK answer ends at the first of these
};

struct ProbeExample {
    std::string id; // "<triplet id>/<j>"
    std::string triplet_id;
    std::string pk_object;
    std::string ck_object;
    std::string prompt;
    TokenSequence prompt_tokens;
    std::size_t window = 0;
};

std::string normalize_object(std::string_view s); // strips surrounding whitespace
std::string trim_at_delimiter(std::string_view s, std::string_view delimiters);

// Token length of the longest pool object (encoded with its leading space) plus the margin.
std::size_t generation_window(const BpeTokenizer& tok, const FactTriplet& t, std::size_t extra);

// Greedy answer to the bare query, cut at the first delimiter and normalized.
// Empty when the model produces nothing usable.
std::string elicit_pk(const Model& model, const BpeTokenizer& tok, const FactTriplet& t,
                      const ProbeSettings& settings = {});

struct CandidateScore {
    std::string object;
    double log_prob = 0.0;
};

// Log-probability of every candidate continuation (" " + object) given the
// query, sharing decoder work between candidates with common token prefixes.
std::vector<CandidateScore> score_candidates(const Model& model, const BpeTokenizer& tok, const FactTriplet& t,
                                             std::span<const std::string> candidates, bool length_normalized = false);

// The k least likely pool objects after removing the PK answer. Ties break
// lexicographically. Throws if fewer than k candidates remain.
std::vector<std::string> select_ck_objects(const Model& model, const BpeTokenizer& tok, const FactTriplet& t,
                                           const std::string& pk_object, std::size_t k = 3,
                                           const ProbeSettings& settings = {});

struct SkippedTriplet {
    std::string triplet_id;
    std::string reason;
};

struct ProbeDataset {
    std::vector<ProbeExample> examples; // sorted by id
    std::vector<SkippedTriplet> skipped;
};

// Elicits PK, picks CK objects and builds the prompts for every triplet.
// Triplets are processed in parallel; failures are recorded, not thrown.
ProbeDataset build_examples(const Model& model, const BpeTokenizer& tok, std::span<const FactTriplet> triplets,
                            const ProbeSettings& settings = {});

void write_examples_jsonl(const std::filesystem::path& path, std::span<const ProbeExample> examples);
std::vector<ProbeExample> read_examples_jsonl(const std::filesystem::path& path);

// CK if the normalized output starts with the CK object, else PK if it starts
// with the PK object, else ND.
KnowledgeSource classify_output(std::string_view generated, std::string_view pk_object, std::string_view ck_object);

// Whether more generated text could still change classify_output's answer.
bool classification_settled(std::string_view generated, std::string_view pk_object, std::string_view ck_object);

struct ProbeRecord {
    std::string id;
    std::string ablation;
    std::string pk_object;
    std::string ck_object;
    std::string generated;
    KnowledgeSource source = KnowledgeSource::ND;
    double entropy = 0.0; // first generated token, nats
    std::string error;    // non-empty when the example failed

    bool operator==(const ProbeRecord&) const = default;
};

struct ProbeRunOptions {
    std::string ablation = "none";
    // Stop generating once the classification cannot change. The stored text
    // is then shorter than the full window, so it is off when text is retained.
    bool early_stop = false;
};

// Reference path: greedy generation with the hooks applied from the first
// prompt token. Records are in example order; parallel over examples.
std::vector<ProbeRecord> run_probe(const Model& model, const BpeTokenizer& tok, std::span<const ProbeExample> examples,
                                   std::span<const HookPoint> hooks, const ProbeRunOptions& options = {});

// Unablated run that also keeps, per example, the residual stream entering the
// final FFN at every position whose logits were read. Ablations restricted to
// the final layer can then replay only that block; they re-run the full model
// from the first position where the ablated generation departs from the base one.
class FinalLayerReplay {
public:
    // `batch` examples share each replayed final-block evaluation.
    FinalLayerReplay(const Model& model, const BpeTokenizer& tok, std::span<const ProbeExample> examples,
                     std::size_t batch = 64);

    const std::vector<ProbeRecord>& base_records() const { return base_; }

    // Same records as run_probe(model, tok, examples, hooks, options). Every
    // hook must target the final layer.
    std::vector<ProbeRecord> run(std::span<const HookPoint> hooks, const ProbeRunOptions& options = {}) const;

    // Number of examples whose last ablated run had to leave the replay path.
    std::size_t last_divergences() const { return divergences_; }

private:
    struct Trace {
        TokenSequence generated;    // base tokens, full window
        std::vector<float> mids;    // window rows of d_model
    };

    // Full-model continuation for an example whose ablated tokens left the base path.
    void continue_with_decoder(const ProbeExample& ex, std::span<const HookPoint> hooks, const ProbeRunOptions& options,
                               TokenSequence& out) const;

    const Model* model_;
    const BpeTokenizer* tok_;
    std::span<const ProbeExample> examples_;
    std::size_t batch_;
    std::vector<Trace> traces_;
    std::vector<ProbeRecord> base_;
    mutable std::size_t divergences_ = 0;
};

void write_records_jsonl(const std::filesystem::path& path, std::span<const ProbeRecord> records);
std::vector<ProbeRecord> read_records_jsonl(const std::filesystem::path& path);

} // namespace enprobe
