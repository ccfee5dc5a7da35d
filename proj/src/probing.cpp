#include "enprobe/probing.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "enprobe/log.hpp"

namespace enprobe {

using json = nlohmann::json;

std::string_view to_string(KnowledgeSource s) {
    switch (s) {
    case KnowledgeSource::PK: return "PK";
    case KnowledgeSource::CK: return "CK";
    case KnowledgeSource::ND: return "ND";
    }
    return "ND";
}

KnowledgeSource parse_knowledge_source(std::string_view s) {
    if (s == "PK") return KnowledgeSource::PK;
    if (s == "CK") return KnowledgeSource::CK;
    if (s == "ND") return KnowledgeSource::ND;
    throw std::invalid_argument("unknown knowledge source '" + std::string(s) + "'");
}

// ---------------------------------------------------------------- text helpers

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string_view lstrip(std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    return s;
}

std::size_t count_of(std::string_view s, std::string_view needle) {
    std::size_t n = 0;
    for (auto p = s.find(needle); p != std::string_view::npos; p = s.find(needle, p + needle.size())) ++n;
    return n;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    for (auto p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size())) s.replace(p, from.size(), to);
    return s;
}

std::string dump_line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& f) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lstrip(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        try {
            f(j, lineno);
        } catch (const json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

} // namespace

std::string normalize_object(std::string_view s) {
    s = lstrip(s);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return std::string(s);
}

std::string trim_at_delimiter(std::string_view s, std::string_view delimiters) {
    const auto p = s.find_first_of(delimiters);
    return std::string(p == std::string_view::npos ? s : s.substr(0, p));
}

// ---------------------------------------------------------------- triplets

void validate_triplet(const FactTriplet& t) {
    const std::string who = "triplet '" + t.id + "'";
    if (t.id.empty()) throw std::invalid_argument("triplet with empty id");
    if (t.subject.empty()) throw std::invalid_argument(who + ": empty subject");
    if (count_of(t.relation_template, kSubjectSlot) != 1) {
        throw std::invalid_argument(who + ": template must contain exactly one " + std::string(kSubjectSlot));
    }
    if (count_of(t.relation_template, kObjectSlot) != 1 || !t.relation_template.ends_with(kObjectSlot)) {
        throw std::invalid_argument(who + ": template must end at its single " + std::string(kObjectSlot) + " slot");
    }
    if (normalize_object(t.relation_template.substr(0, t.relation_template.size() - kObjectSlot.size())).empty()) {
        throw std::invalid_argument(who + ": template has no text before the object slot");
    }
    std::set<std::string> distinct;
    for (const auto& o : t.object_pool) {
        const auto n = normalize_object(o);
        if (n.empty()) throw std::invalid_argument(who + ": empty object in pool");
        distinct.insert(n);
    }
    if (distinct.size() < 4) {
        throw std::invalid_argument(who + ": object pool needs at least 4 distinct entries, has " +
                                    std::to_string(distinct.size()));
    }
}

std::vector<FactTriplet> load_triplets_jsonl(const std::filesystem::path& path) {
    std::vector<FactTriplet> out;
    std::set<std::string> ids;
    for_each_jsonl(path, [&](const json& j, std::size_t lineno) {
        FactTriplet t;
        t.id = j.at("id").get<std::string>();
        t.subject = j.at("subject").get<std::string>();
        t.relation_template = j.at("template").get<std::string>();
        t.object_pool = j.at("object_pool").get<std::vector<std::string>>();
        if (!ids.insert(t.id).second) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": duplicate id '" + t.id + "'");
        }
        out.push_back(std::move(t));
    });
    return out;
}

void write_triplets_jsonl(const std::filesystem::path& path, std::span<const FactTriplet> triplets) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& t : triplets) {
        out << dump_line({{"id", t.id}, {"subject", t.subject}, {"template", t.relation_template},
                          {"object_pool", t.object_pool}})
            << '\n';
    }
}

namespace {

// "[X] is the capital of [Y] ." -> "[S] is the capital of [O]"; empty if the
// object slot is followed by anything but closing punctuation.
std::string convert_lama_template(std::string tpl) {
    const auto y = tpl.find("[Y]");
    if (y == std::string::npos) return {};
    const std::string tail = normalize_object(tpl.substr(y + 3));
    if (!tail.empty() && tail != ".") return {};
    tpl = tpl.substr(0, y + 3);
    tpl = replace_all(tpl, "[X]", kSubjectSlot);
    return replace_all(tpl, "[Y]", kObjectSlot);
}

} // namespace

std::vector<FactTriplet> load_lama_jsonl(const std::filesystem::path& path,
                                         const std::optional<std::filesystem::path>& relations, std::size_t min_pool) {
    std::map<std::string, std::string> templates;
    if (relations) {
        for_each_jsonl(*relations, [&](const json& j, std::size_t) {
            templates[j.at("relation").get<std::string>()] = j.at("template").get<std::string>();
        });
    }
    struct Raw {
        std::string id, predicate, subject, object, tpl;
    };
    std::vector<Raw> raws;
    std::map<std::string, std::vector<std::string>> pools;
    for_each_jsonl(path, [&](const json& j, std::size_t lineno) {
        Raw r;
        r.predicate = j.at("predicate_id").get<std::string>();
        r.subject = j.at("sub_label").get<std::string>();
        r.object = normalize_object(j.at("obj_label").get<std::string>());
        r.id = j.contains("uuid") ? j["uuid"].get<std::string>() : r.predicate + "-" + std::to_string(lineno);
        if (j.contains("template")) {
            r.tpl = j["template"].get<std::string>();
        } else if (auto it = templates.find(r.predicate); it != templates.end()) {
            r.tpl = it->second;
        } else {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": no template for predicate " +
                                     r.predicate);
        }
        auto& pool = pools[r.predicate];
        if (!r.object.empty() && std::find(pool.begin(), pool.end(), r.object) == pool.end()) pool.push_back(r.object);
        raws.push_back(std::move(r));
    });

    std::vector<FactTriplet> out;
    std::size_t dropped = 0;
    std::set<std::string> ids;
    for (auto& r : raws) {
        const std::string tpl = convert_lama_template(r.tpl);
        const auto& pool = pools[r.predicate];
        if (tpl.empty() || pool.size() < min_pool || r.object.empty() || !ids.insert(r.id).second) {
            ++dropped;
            continue;
        }
        out.push_back({r.id, r.subject, tpl, pool});
    }
    if (dropped > 0) log::warn("load_lama_jsonl: dropped " + std::to_string(dropped) + " unusable records");
    return out;
}

std::string query_text(const FactTriplet& t) {
    const auto o = t.relation_template.find(kObjectSlot);
    std::string q = replace_all(t.relation_template.substr(0, o), kSubjectSlot, t.subject);
    while (!q.empty() && is_space(q.back())) q.pop_back();
    return q;
}

std::string statement_text(const FactTriplet& t, std::string_view object) {
    return replace_all(replace_all(t.relation_template, kSubjectSlot, t.subject), kObjectSlot, object);
}

std::string probe_prompt(const FactTriplet& t, std::string_view ck_object) {
    return statement_text(t, ck_object) + ". " + query_text(t);
}

// ---------------------------------------------------------------- PK / CK

std::size_t generation_window(const BpeTokenizer& tok, const FactTriplet& t, std::size_t extra) {
    std::size_t longest = 0;
    for (const auto& o : t.object_pool) longest = std::max(longest, tok.encode(" " + normalize_object(o)).size());
    return longest + extra;
}

std::string elicit_pk(const Model& model, const BpeTokenizer& tok, const FactTriplet& t, const ProbeSettings& settings) {
    const TokenSequence query = tok.encode(query_text(t));
    if (query.empty()) throw std::invalid_argument("elicit_pk: empty query for triplet '" + t.id + "'");
    const std::size_t window = generation_window(tok, t, settings.window_extra);
    const auto stop = [&](const TokenSequence& generated) {
        return lstrip(tok.decode(generated)).find_first_of(settings.delimiters) != std::string_view::npos;
    };
    const auto g = greedy_generate_ex(model, query, window, {}, stop);
    return normalize_object(trim_at_delimiter(lstrip(tok.decode(g.tokens)), settings.delimiters));
}

namespace {

struct TrieNode {
    std::map<TokenId, std::size_t> children;
};

std::vector<double> log_softmax(std::span<const float> logits) {
    double mx = -INFINITY;
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (float v : logits) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

} // namespace

std::vector<CandidateScore> score_candidates(const Model& model, const BpeTokenizer& tok, const FactTriplet& t,
                                             std::span<const std::string> candidates, bool length_normalized) {
    const TokenSequence query = tok.encode(query_text(t));
    if (query.empty()) throw std::invalid_argument("score_candidates: empty query for triplet '" + t.id + "'");

    std::vector<TokenSequence> seqs;
    std::size_t longest = 0;
    for (const auto& c : candidates) {
        seqs.push_back(tok.encode(" " + c));
        if (seqs.back().empty()) throw std::invalid_argument("score_candidates: empty candidate");
        longest = std::max(longest, seqs.back().size());
    }
    if (query.size() + longest > model.config.max_positions) {
        throw std::invalid_argument("score_candidates: query plus candidate exceeds max_positions for triplet '" +
                                    t.id + "'");
    }

    // Trie over candidate token sequences; node 0 is the query itself.
    std::vector<TrieNode> nodes(1);
    for (const auto& s : seqs) {
        std::size_t n = 0;
        for (TokenId tkn : s) {
            auto it = nodes[n].children.find(tkn);
            if (it == nodes[n].children.end()) {
                nodes.push_back({});
                it = nodes[n].children.emplace(tkn, nodes.size() - 1).first;
            }
            n = it->second;
        }
    }

    // Log-probability of reaching each node, filled depth first.
    std::vector<double> reach(nodes.size(), 0.0);
    Decoder root(model);
    for (std::size_t i = 0; i < query.size(); ++i) root.step(query[i], {}, i + 1 == query.size());
    struct Frame {
        std::size_t node;
        Decoder dec;
    };
    std::vector<Frame> stack;
    stack.push_back({0, std::move(root)});
    while (!stack.empty()) {
        Frame f = std::move(stack.back());
        stack.pop_back();
        const auto lp = log_softmax(f.dec.logits());
        for (const auto& [tkn, child] : nodes[f.node].children) {
            reach[child] = reach[f.node] + lp[static_cast<std::size_t>(tkn)];
            if (!nodes[child].children.empty()) {
                Decoder next = f.dec;
                next.step(tkn);
                stack.push_back({child, std::move(next)});
            }
        }
    }

    std::vector<CandidateScore> out;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        std::size_t n = 0;
        for (TokenId tkn : seqs[i]) n = nodes[n].children.at(tkn);
        double lp = reach[n];
        if (length_normalized) lp /= static_cast<double>(seqs[i].size());
        out.push_back({candidates[i], lp});
    }
    return out;
}

std::vector<std::string> select_ck_objects(const Model& model, const BpeTokenizer& tok, const FactTriplet& t,
                                           const std::string& pk_object, std::size_t k, const ProbeSettings& settings) {
    const std::string pk = normalize_object(pk_object);
    std::set<std::string> seen;
    std::vector<std::string> candidates;
    for (const auto& o : t.object_pool) {
        const std::string n = normalize_object(o);
        if (n.empty() || n == pk || !seen.insert(n).second) continue;
        candidates.push_back(n);
    }
    if (candidates.size() < k) {
        throw std::invalid_argument("select_ck_objects: triplet '" + t.id + "' has " + std::to_string(candidates.size()) +
                                    " candidates after excluding '" + pk + "', need " + std::to_string(k));
    }
    auto scores = score_candidates(model, tok, t, candidates, settings.length_normalized);
    std::sort(scores.begin(), scores.end(), [](const CandidateScore& a, const CandidateScore& b) {
        return a.log_prob != b.log_prob ? a.log_prob < b.log_prob : a.object < b.object;
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(scores[i].object);
    return out;
}

ProbeDataset build_examples(const Model& model, const BpeTokenizer& tok, std::span<const FactTriplet> triplets,
                            const ProbeSettings& settings) {
    {
        std::set<std::string> ids;
        for (const auto& t : triplets) {
            if (!ids.insert(t.id).second) throw std::invalid_argument("build_examples: duplicate triplet id '" + t.id + "'");
        }
    }
    const std::size_t n = triplets.size();
    std::vector<std::vector<ProbeExample>> per(n);
    std::vector<std::string> reasons(n);

#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < n; ++i) {
        const FactTriplet& t = triplets[i];
        try {
            validate_triplet(t);
            const std::string pk = elicit_pk(model, tok, t, settings);
            if (pk.empty()) {
                reasons[i] = "empty PK generation";
                continue;
            }
            const auto cks = select_ck_objects(model, tok, t, pk, settings.n_ck, settings);
            const std::size_t window = generation_window(tok, t, settings.window_extra);
            std::vector<ProbeExample> exs;
            for (std::size_t j = 0; j < cks.size(); ++j) {
                ProbeExample ex{t.id + "/" + std::to_string(j), t.id, pk, cks[j], probe_prompt(t, cks[j]), {}, window};
                ex.prompt_tokens = tok.encode(ex.prompt);
                if (tok.decode(ex.prompt_tokens) != ex.prompt) throw std::invalid_argument("prompt does not round-trip through the tokenizer");
                if (ex.prompt_tokens.size() + window > model.config.max_positions) {
                    throw std::invalid_argument("prompt plus window exceeds max_positions");
                }
                exs.push_back(std::move(ex));
            }
            per[i] = std::move(exs);
        } catch (const std::exception& e) {
            reasons[i] = e.what();
        }
    }

    ProbeDataset ds;
    for (std::size_t i = 0; i < n; ++i) {
        if (!reasons[i].empty()) {
            ds.skipped.push_back({triplets[i].id, reasons[i]});
            continue;
        }
        for (auto& ex : per[i]) ds.examples.push_back(std::move(ex));
    }
    std::sort(ds.examples.begin(), ds.examples.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    if (!ds.skipped.empty()) log::warn("build_examples: skipped " + std::to_string(ds.skipped.size()) + " triplets");
    return ds;
}

void write_examples_jsonl(const std::filesystem::path& path, std::span<const ProbeExample> examples) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& e : examples) {
        out << dump_line({{"id", e.id}, {"triplet_id", e.triplet_id}, {"pk_object", e.pk_object},
                          {"ck_object", e.ck_object}, {"prompt", e.prompt}, {"prompt_tokens", e.prompt_tokens},
                          {"window", e.window}})
            << '\n';
    }
}

std::vector<ProbeExample> read_examples_jsonl(const std::filesystem::path& path) {
    std::vector<ProbeExample> out;
    for_each_jsonl(path, [&](const json& j, std::size_t) {
        out.push_back({j.at("id").get<std::string>(), j.at("triplet_id").get<std::string>(),
                       j.at("pk_object").get<std::string>(), j.at("ck_object").get<std::string>(),
                       j.at("prompt").get<std::string>(), j.at("prompt_tokens").get<TokenSequence>(),
                       j.at("window").get<std::size_t>()});
    });
    return out;
}

// ---------------------------------------------------------------- classification

KnowledgeSource classify_output(std::string_view generated, std::string_view pk_object, std::string_view ck_object) {
    const std::string g = normalize_object(generated);
    const std::string ck = normalize_object(ck_object);
    const std::string pk = normalize_object(pk_object);
    if (!ck.empty() && g.starts_with(ck)) return KnowledgeSource::CK;
    if (!pk.empty() && g.starts_with(pk)) return KnowledgeSource::PK;
    return KnowledgeSource::ND;
}

namespace {

// Whether the prefix test against `object` can no longer change as text is appended.
bool prefix_decided(std::string_view text, const std::string& object, bool& matched) {
    matched = false;
    if (object.empty()) return true;
    if (text.empty()) return false;
    if (text.starts_with(object)) {
        matched = true;
        return true;
    }
    return !std::string_view(object).starts_with(text);
}

} // namespace

bool classification_settled(std::string_view generated, std::string_view pk_object, std::string_view ck_object) {
    const std::string_view text = lstrip(generated);
    bool ck_match = false;
    bool pk_match = false;
    if (!prefix_decided(text, normalize_object(ck_object), ck_match)) return false;
    if (ck_match) return true;
    return prefix_decided(text, normalize_object(pk_object), pk_match);
}

// ---------------------------------------------------------------- runs

namespace {

ProbeRecord make_record(const ProbeExample& ex, const std::string& ablation) {
    ProbeRecord r;
    r.id = ex.id;
    r.ablation = ablation;
    r.pk_object = ex.pk_object;
    r.ck_object = ex.ck_object;
    return r;
}

void finish_record(ProbeRecord& r, const BpeTokenizer& tok, const TokenSequence& tokens, double entropy) {
    r.generated = tok.decode(tokens);
    r.source = classify_output(r.generated, r.pk_object, r.ck_object);
    r.entropy = entropy;
}

} // namespace

std::vector<ProbeRecord> run_probe(const Model& model, const BpeTokenizer& tok, std::span<const ProbeExample> examples,
                                   std::span<const HookPoint> hooks, const ProbeRunOptions& options) {
    validate_hooks(model.config, hooks);
    std::vector<ProbeRecord> out(examples.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const ProbeExample& ex = examples[i];
        ProbeRecord r = make_record(ex, options.ablation);
        try {
            std::function<bool(const TokenSequence&)> stop;
            if (options.early_stop) {
                stop = [&](const TokenSequence& g) { return classification_settled(tok.decode(g), ex.pk_object, ex.ck_object); };
            }
            const auto g = greedy_generate_ex(model, ex.prompt_tokens, ex.window, hooks, stop);
            finish_record(r, tok, g.tokens, softmax_entropy(g.first_logits));
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        out[i] = std::move(r);
    }
    return out;
}

FinalLayerReplay::FinalLayerReplay(const Model& model, const BpeTokenizer& tok, std::span<const ProbeExample> examples,
                                   std::size_t batch)
    : model_(&model), tok_(&tok), examples_(examples), batch_(std::max<std::size_t>(1, batch)), traces_(examples.size()),
      base_(examples.size()) {
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const ProbeExample& ex = examples[i];
        ProbeRecord r = make_record(ex, "none");
        Trace tr;
        try {
            if (ex.prompt_tokens.empty() || ex.window < 1) throw std::invalid_argument("empty prompt or window");
            if (ex.prompt_tokens.size() + ex.window > model.config.max_positions) {
                throw std::invalid_argument("prompt plus window exceeds max_positions");
            }
            Decoder dec(model);
            for (std::size_t p = 0; p < ex.prompt_tokens.size(); ++p) {
                dec.step(ex.prompt_tokens[p], {}, p + 1 == ex.prompt_tokens.size());
            }
            const double entropy = softmax_entropy(dec.logits());
            for (std::size_t s = 0; s < ex.window; ++s) {
                if (s > 0) dec.step(tr.generated.back());
                const auto mid = dec.final_mid_residual();
                tr.mids.insert(tr.mids.end(), mid.begin(), mid.end());
                tr.generated.push_back(argmax(dec.logits()));
            }
            finish_record(r, tok, tr.generated, entropy);
        } catch (const std::exception& e) {
            r.error = e.what();
            tr = {};
        }
        traces_[i] = std::move(tr);
        base_[i] = std::move(r);
    }
}

void FinalLayerReplay::continue_with_decoder(const ProbeExample& ex, std::span<const HookPoint> hooks,
                                             const ProbeRunOptions& options, TokenSequence& out) const {
    // Layers below the last are unaffected by the hooks, so the prefix only
    // needs to populate the caches.
    Decoder dec(*model_);
    const auto prefill_hooks = all_position_hooks(hooks);
    for (TokenId t : ex.prompt_tokens) dec.step(t, prefill_hooks, false);
    for (std::size_t k = 0; k + 1 < out.size(); ++k) dec.step(out[k], prefill_hooks, false);
    while (out.size() < ex.window) {
        dec.step(out.back(), hooks);
        out.push_back(argmax(dec.logits()));
        if (options.early_stop && classification_settled(tok_->decode(out), ex.pk_object, ex.ck_object)) break;
    }
}

std::vector<ProbeRecord> FinalLayerReplay::run(std::span<const HookPoint> hooks, const ProbeRunOptions& options) const {
    const Model& model = *model_;
    const std::size_t d = model.config.d_model;
    validate_hooks(model.config, hooks);
    for (const auto& h : hooks) {
        if (h.layer + 1 != model.config.n_layers) throw std::invalid_argument("FinalLayerReplay: hooks must target the final layer");
    }
    const std::size_t n = examples_.size();
    std::vector<TokenSequence> outs(n);
    std::vector<double> entropies(n, 0.0);
    std::vector<char> diverged(n, 0);
    std::vector<std::string> errors(n);

    for (std::size_t b0 = 0; b0 < n; b0 += batch_) {
        const std::size_t b1 = std::min(n, b0 + batch_);
        std::vector<std::size_t> active;
        std::size_t longest = 0;
        for (std::size_t i = b0; i < b1; ++i) {
            if (!base_[i].error.empty()) continue;
            active.push_back(i);
            longest = std::max(longest, examples_[i].window);
        }
        // Step s replays position s of every example still on the base path.
        Matrix mids, logits;
        for (std::size_t s = 0; s < longest && !active.empty(); ++s) {
            mids = Matrix(active.size(), d);
            for (std::size_t a = 0; a < active.size(); ++a) {
                const float* src = traces_[active[a]].mids.data() + s * d;
                std::copy(src, src + d, mids.row(a).begin());
            }
            final_block_logits_batch(model, mids, hooks, logits);
            std::vector<std::size_t> still;
            for (std::size_t a = 0; a < active.size(); ++a) {
                const std::size_t i = active[a];
                const ProbeExample& ex = examples_[i];
                if (s == 0) entropies[i] = softmax_entropy(logits.row(a));
                outs[i].push_back(argmax(logits.row(a)));
                if (options.early_stop && classification_settled(tok_->decode(outs[i]), ex.pk_object, ex.ck_object)) continue;
                if (outs[i].back() != traces_[i].generated[s]) {
                    if (s + 1 < ex.window) diverged[i] = 1;
                    continue;
                }
                if (s + 1 < ex.window) still.push_back(i);
            }
            active = std::move(still);
        }
    }

    std::size_t diverged_count = 0;
#pragma omp parallel for schedule(dynamic) reduction(+ : diverged_count)
    for (std::size_t i = 0; i < n; ++i) {
        if (!diverged[i]) continue;
        ++diverged_count;
        try {
            continue_with_decoder(examples_[i], hooks, options, outs[i]);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    }
    divergences_ = diverged_count;

    std::vector<ProbeRecord> records(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!base_[i].error.empty()) {
            records[i] = base_[i];
            records[i].ablation = options.ablation;
            continue;
        }
        records[i] = make_record(examples_[i], options.ablation);
        if (!errors[i].empty()) {
            records[i].error = errors[i];
            continue;
        }
        finish_record(records[i], *tok_, outs[i], entropies[i]);
    }
    return records;
}

// ---------------------------------------------------------------- records I/O

void write_records_jsonl(const std::filesystem::path& path, std::span<const ProbeRecord> records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& r : records) {
        json j = {{"id", r.id},
                  {"ablation", r.ablation},
                  {"pk_object", r.pk_object},
                  {"ck_object", r.ck_object},
                  {"generated", r.generated},
                  {"source", std::string(to_string(r.source))},
                  {"entropy", r.entropy}};
        if (!r.error.empty()) j["error"] = r.error;
        out << dump_line(j) << '\n';
    }
}

std::vector<ProbeRecord> read_records_jsonl(const std::filesystem::path& path) {
    std::vector<ProbeRecord> out;
    for_each_jsonl(path, [&](const json& j, std::size_t) {
        ProbeRecord r;
        r.id = j.at("id").get<std::string>();
        r.ablation = j.at("ablation").get<std::string>();
        r.pk_object = j.at("pk_object").get<std::string>();
        r.ck_object = j.at("ck_object").get<std::string>();
        r.generated = j.at("generated").get<std::string>();
        r.source = parse_knowledge_source(j.at("source").get<std::string>());
        r.entropy = j.at("entropy").get<double>();
        if (j.contains("error")) r.error = j["error"].get<std::string>();
        out.push_back(std::move(r));
    });
    return out;
}

} // namespace enprobe
