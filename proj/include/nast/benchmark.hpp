#pragma once

// Polarity-paired diagnostic MCQs: negated options built from label
// configurations, affirmative twins produced by span-restricted rewriting, and
// accuracy/gap evaluation for a dual encoder.

#include <set>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "nast/corpus.hpp"
#include "nast/encoder.hpp"
#include "nast/model.hpp"
#include "nast/tokenizer.hpp"
#include "json.hpp"

namespace nast {

struct LabelConfig {
    std::vector<std::string> conditions;  // exactly 3
    std::vector<int> values;              // presence flags, aligned

    bool operator==(const LabelConfig& o) const {
        return conditions == o.conditions && values == o.values;
    }
};

struct OptionSpan {
    int start = 0;
    int length = 0;
    std::string condition;
};

struct McqPair {
    std::string study_id;
    std::string stem;
    std::vector<std::string> negated_options;
    std::vector<std::string> affirmative_options;
    int answer_index = -1;
    std::vector<LabelConfig> configs;
    std::vector<std::vector<OptionSpan>> negated_spans;      // per option
    std::vector<std::vector<OptionSpan>> affirmative_spans;  // aligned with negated_spans
    std::vector<double> image_features;
};

inline const std::string& mcq_stem() {
    static const std::string stem =
        "Which of the following radiology report summaries best describes the findings on this "
        "chest radiograph?";
    return stem;
}

// ----------------------------- eligibility -----------------------------

// Keeps studies with at least two confidently present and three confidently
// absent conditions (all-normal studies cannot pass).
inline bool mcq_eligible(const StudyRecord& rec) {
    int present = 0, absent = 0;
    for (const auto& f : rec.facts) {
        if (!f.definitive()) continue;
        if (f.existence == Existence::present) present++;
        else absent++;
    }
    return present >= 2 && absent >= 3;
}

inline std::vector<const StudyRecord*> filter_eligible(
    const std::vector<const StudyRecord*>& records) {
    std::vector<const StudyRecord*> out;
    for (const auto* r : records) {
        if (mcq_eligible(*r)) out.push_back(r);
    }
    return out;
}

// ----------------------------- configs -----------------------------

// Truth config over 3 sampled conditions (at least one absent, so the correct
// option carries a negation) plus 3 distinct label permutations.
inline std::vector<LabelConfig> make_configs(const StudyRecord& rec, const Ontology& ont,
                                             Rng& rng) {
    std::vector<const StructuredFact*> defin;
    for (const auto& f : rec.facts) {
        if (f.definitive()) defin.push_back(&f);
    }
    require(defin.size() >= 3, "make_configs: study lacks 3 definitive facts");

    std::vector<int> pick;
    for (int attempt = 0; attempt < 200; ++attempt) {
        std::vector<int> idx(defin.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        rng.shuffle(idx);
        idx.resize(3);
        bool has_absent = false;
        for (int i : idx) {
            if (defin[static_cast<size_t>(i)]->existence == Existence::absent) has_absent = true;
        }
        if (has_absent) {
            pick = idx;
            break;
        }
    }
    if (pick.empty()) throw DataError("make_configs: no sample with an absent condition");
    // stable condition order inside the option
    std::sort(pick.begin(), pick.end(), [&](int a, int b) {
        return ont.index_of(defin[static_cast<size_t>(a)]->condition) <
               ont.index_of(defin[static_cast<size_t>(b)]->condition);
    });

    LabelConfig truth;
    for (int i : pick) {
        truth.conditions.push_back(defin[static_cast<size_t>(i)]->condition);
        truth.values.push_back(defin[static_cast<size_t>(i)]->existence == Existence::present ? 1 : 0);
    }

    // the 7 non-truth bit patterns, seeded pick of 3
    std::vector<std::vector<int>> others;
    for (int bits = 0; bits < 8; ++bits) {
        std::vector<int> v = {(bits >> 2) & 1, (bits >> 1) & 1, bits & 1};
        if (v != truth.values) others.push_back(v);
    }
    rng.shuffle(others);

    std::vector<LabelConfig> configs = {truth};
    for (int i = 0; i < 3; ++i) {
        LabelConfig c;
        c.conditions = truth.conditions;
        c.values = others[static_cast<size_t>(i)];
        configs.push_back(c);
    }
    rng.shuffle(configs);
    return configs;
}

// ----------------------------- option realization -----------------------------

inline std::vector<std::string> presence_phrases(const std::string& name) {
    return {name + " present", "with " + name,        "showing " + name,
            name + " noted",   "evidence of " + name, name + " evident"};
}

inline std::vector<std::string> negation_phrases(const std::string& name) {
    return {"no " + name, "without " + name, name + " absent", "free of " + name,
            "lacking " + name};
}

struct RealizedOption {
    std::string text;
    std::vector<OptionSpan> spans;      // negation-phrase spans
    std::vector<int> span_variant;      // which negation surface form each span used
};

// Joins one phrase per condition: "{p1}, {p2} and {p3}". Negation-phrase
// character spans are recorded for the polarity rewrite.
inline RealizedOption realize_negated(const LabelConfig& config, const Ontology& ont, Rng& rng) {
    require(config.conditions.size() == config.values.size() && config.conditions.size() == 3,
            "label config must cover exactly 3 conditions");
    RealizedOption out;
    for (size_t i = 0; i < config.conditions.size(); ++i) {
        const Condition& cond = ont.condition(config.conditions[i]);
        if (i == 1) out.text += ", ";
        if (i == 2) out.text += " and ";
        if (config.values[i] == 1) {
            auto pool = presence_phrases(cond.name);
            out.text += pool[rng.below(pool.size())];
        } else {
            auto pool = negation_phrases(cond.name);
            int variant = static_cast<int>(rng.below(pool.size()));
            OptionSpan span;
            span.start = static_cast<int>(out.text.size());
            span.length = static_cast<int>(pool[static_cast<size_t>(variant)].size());
            span.condition = cond.id;
            out.text += pool[static_cast<size_t>(variant)];
            out.spans.push_back(span);
            out.span_variant.push_back(variant);
        }
    }
    return out;
}

struct RewrittenOption {
    std::string text;
    std::vector<OptionSpan> spans;  // replacement spans in the rewritten text
};

// Replaces each negation-phrase span with the condition's affirmative
// alternative; "without X" keeps its connective role as "with {alternative}".
// Everything outside the recorded spans must survive byte-for-byte.
inline RewrittenOption rewrite_affirmative(const std::string& negated,
                                           const std::vector<OptionSpan>& spans,
                                           const Ontology& ont) {
    RewrittenOption out;
    int cursor = 0;
    for (const auto& span : spans) {
        require(span.start >= cursor && span.start + span.length <= static_cast<int>(negated.size()),
                "rewrite: spans must be ordered and in bounds");
        out.text += negated.substr(static_cast<size_t>(cursor), static_cast<size_t>(span.start - cursor));
        const Condition& cond = ont.condition(span.condition);
        std::string phrase = negated.substr(static_cast<size_t>(span.start), static_cast<size_t>(span.length));
        std::string replacement = phrase.rfind("without ", 0) == 0 ? "with " + cond.affirmative
                                                                   : cond.affirmative;
        OptionSpan rs;
        rs.start = static_cast<int>(out.text.size());
        rs.length = static_cast<int>(replacement.size());
        rs.condition = span.condition;
        out.text += replacement;
        out.spans.push_back(rs);
        cursor = span.start + span.length;
    }
    out.text += negated.substr(static_cast<size_t>(cursor));

    if (contains_negation_cue(split_words(out.text)))
        throw ContractError("affirmative rewrite still carries a negation cue: " + out.text);
    return out;
}

// Span-restricted diff: every character outside the recorded spans must match
// across the two variants.
inline bool polarity_diff_confined(const std::string& negated, const std::string& affirmative,
                                   const std::vector<OptionSpan>& neg_spans,
                                   const std::vector<OptionSpan>& aff_spans) {
    if (neg_spans.size() != aff_spans.size()) return false;
    int nc = 0, ac = 0;
    for (size_t s = 0; s <= neg_spans.size(); ++s) {
        int nend = s < neg_spans.size() ? neg_spans[s].start : static_cast<int>(negated.size());
        int aend = s < aff_spans.size() ? aff_spans[s].start : static_cast<int>(affirmative.size());
        if (nend - nc != aend - ac) return false;
        if (negated.compare(static_cast<size_t>(nc), static_cast<size_t>(nend - nc), affirmative,
                            static_cast<size_t>(ac), static_cast<size_t>(aend - ac)) != 0)
            return false;
        if (s < neg_spans.size()) {
            nc = neg_spans[s].start + neg_spans[s].length;
            ac = aff_spans[s].start + aff_spans[s].length;
        }
    }
    return true;
}

// ----------------------------- pair construction -----------------------------

struct BenchmarkBuildResult {
    std::vector<McqPair> pairs;
    int eligible = 0;
    int skipped = 0;
};

inline BenchmarkBuildResult build_benchmark(const Corpus& corpus, uint64_t seed, int max_pairs) {
    BenchmarkBuildResult out;
    auto test_records = corpus.split("test");
    auto eligible = filter_eligible(test_records);
    out.eligible = static_cast<int>(eligible.size());

    for (const auto* rec : eligible) {
        if (max_pairs > 0 && static_cast<int>(out.pairs.size()) >= max_pairs) break;
        Rng rng(derive_seed(seed, "mcq/" + rec->study_id));
        McqPair pair;
        pair.study_id = rec->study_id;
        pair.stem = mcq_stem();
        pair.image_features = rec->image_features;
        try {
            pair.configs = make_configs(*rec, corpus.ontology, rng);
        } catch (const DataError&) {
            out.skipped++;
            continue;
        }
        for (size_t oi = 0; oi < pair.configs.size(); ++oi) {
            auto negated = realize_negated(pair.configs[oi], corpus.ontology, rng);
            auto affirmative = rewrite_affirmative(negated.text, negated.spans, corpus.ontology);
            if (!polarity_diff_confined(negated.text, affirmative.text, negated.spans,
                                        affirmative.spans))
                throw ContractError("polarity rewrite escaped its spans: " + negated.text);
            pair.negated_options.push_back(negated.text);
            pair.affirmative_options.push_back(affirmative.text);
            pair.negated_spans.push_back(negated.spans);
            pair.affirmative_spans.push_back(affirmative.spans);
        }
        // answer: the option whose config matches the study's truth
        pair.answer_index = -1;
        for (size_t oi = 0; oi < pair.configs.size(); ++oi) {
            bool is_truth = true;
            for (size_t ci = 0; ci < pair.configs[oi].conditions.size(); ++ci) {
                const std::string& cid = pair.configs[oi].conditions[ci];
                for (const auto& f : rec->facts) {
                    if (f.condition != cid || !f.definitive()) continue;
                    int truth = f.existence == Existence::present ? 1 : 0;
                    if (truth != pair.configs[oi].values[ci]) is_truth = false;
                }
            }
            if (is_truth) {
                require(pair.answer_index < 0, "MCQ has two options matching ground truth");
                pair.answer_index = static_cast<int>(oi);
            }
        }
        require(pair.answer_index >= 0, "MCQ lost its ground-truth option");
        out.pairs.push_back(std::move(pair));
    }
    return out;
}

// ----------------------------- evaluation -----------------------------

struct McqEvalResult {
    double accuracy = 0.0;  // percent
    int n = 0;
    int ties = 0;
};

enum class McqVariant { negated, affirmative };

// Core argmax protocol with an injectable scorer; ties resolve to the lowest
// option index and are counted.
template <typename Scorer>
McqEvalResult evaluate_mcq_with(Scorer&& score, const std::vector<McqPair>& pairs,
                                McqVariant variant) {
    require(!pairs.empty(), "evaluate_mcq: no pairs");
    McqEvalResult res;
    res.n = static_cast<int>(pairs.size());
    int correct = 0;
    for (const auto& pair : pairs) {
        const auto& options =
            variant == McqVariant::negated ? pair.negated_options : pair.affirmative_options;
        int best = -1;
        double best_score = 0.0;
        bool tie = false;
        for (size_t oi = 0; oi < options.size(); ++oi) {
            double s = score(pair, static_cast<int>(oi), options[oi]);
            if (best < 0 || s > best_score) {
                best = static_cast<int>(oi);
                best_score = s;
                tie = false;
            } else if (s == best_score) {
                tie = true;  // argmax keeps the lowest index
            }
        }
        if (tie) res.ties++;
        if (best == pair.answer_index) correct++;
    }
    res.accuracy = 100.0 * correct / res.n;
    return res;
}

inline McqEvalResult evaluate_mcq(const Model& m, const std::vector<McqPair>& pairs,
                                  McqVariant variant, const Tokenizer& tok) {
    const McqPair* cached_pair = nullptr;
    std::vector<double> img;
    auto scorer = [&](const McqPair& pair, int, const std::string& text) {
        if (cached_pair != &pair) {
            img = encode_image(m, pair.image_features);
            cached_pair = &pair;
        }
        auto txt = encode_text(m, tok.tokenize(text));
        return similarity(m, img, txt.embedding);
    };
    return evaluate_mcq_with(scorer, pairs, variant);
}

struct GapReport {
    double acc_affirmative = 0.0;
    double acc_negated = 0.0;
    double gap = 0.0;
    int n = 0;
    int ties_affirmative = 0;
    int ties_negated = 0;
};

inline GapReport gap_report(const Model& m, const std::vector<McqPair>& pairs,
                            const Tokenizer& tok) {
    require(!pairs.empty(), "gap_report: no pairs");
    auto neg = evaluate_mcq(m, pairs, McqVariant::negated, tok);
    auto aff = evaluate_mcq(m, pairs, McqVariant::affirmative, tok);
    GapReport rep;
    rep.acc_affirmative = aff.accuracy;
    rep.acc_negated = neg.accuracy;
    rep.gap = aff.accuracy - neg.accuracy;
    rep.n = neg.n;
    rep.ties_affirmative = aff.ties;
    rep.ties_negated = neg.ties;
    return rep;
}

// ----------------------------- serialization -----------------------------

inline nlohmann::json spans_to_json(const std::vector<OptionSpan>& spans) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : spans)
        arr.push_back({{"start", s.start}, {"length", s.length}, {"condition", s.condition}});
    return arr;
}

inline std::vector<OptionSpan> spans_from_json(const nlohmann::json& arr) {
    std::vector<OptionSpan> out;
    for (const auto& j : arr) {
        OptionSpan s;
        s.start = j.at("start").get<int>();
        s.length = j.at("length").get<int>();
        s.condition = j.at("condition").get<std::string>();
        out.push_back(s);
    }
    return out;
}

inline nlohmann::json mcq_to_json(const McqPair& p) {
    nlohmann::json j;
    j["study_id"] = p.study_id;
    j["stem"] = p.stem;
    j["negated_options"] = p.negated_options;
    j["affirmative_options"] = p.affirmative_options;
    j["answer_index"] = p.answer_index;
    nlohmann::json configs = nlohmann::json::array();
    for (const auto& c : p.configs)
        configs.push_back({{"conditions", c.conditions}, {"values", c.values}});
    j["configs"] = configs;
    nlohmann::json ns = nlohmann::json::array(), as = nlohmann::json::array();
    for (const auto& s : p.negated_spans) ns.push_back(spans_to_json(s));
    for (const auto& s : p.affirmative_spans) as.push_back(spans_to_json(s));
    j["negated_spans"] = ns;
    j["affirmative_spans"] = as;
    j["features"] = p.image_features;
    return j;
}

inline McqPair mcq_from_json(const nlohmann::json& j) {
    McqPair p;
    p.study_id = j.at("study_id").get<std::string>();
    p.stem = j.at("stem").get<std::string>();
    p.negated_options = j.at("negated_options").get<std::vector<std::string>>();
    p.affirmative_options = j.at("affirmative_options").get<std::vector<std::string>>();
    p.answer_index = j.at("answer_index").get<int>();
    for (const auto& jc : j.at("configs")) {
        LabelConfig c;
        c.conditions = jc.at("conditions").get<std::vector<std::string>>();
        c.values = jc.at("values").get<std::vector<int>>();
        p.configs.push_back(c);
    }
    for (const auto& js : j.at("negated_spans")) p.negated_spans.push_back(spans_from_json(js));
    for (const auto& js : j.at("affirmative_spans"))
        p.affirmative_spans.push_back(spans_from_json(js));
    p.image_features = j.at("features").get<std::vector<double>>();
    return p;
}

inline void write_benchmark(const std::vector<McqPair>& pairs, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write benchmark file: " + path.string());
    for (const auto& p : pairs) out << mcq_to_json(p).dump() << "\n";
}

inline std::vector<McqPair> load_benchmark(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing benchmark file: " + path.string());
    std::vector<McqPair> pairs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        pairs.push_back(mcq_from_json(nlohmann::json::parse(line)));
    }
    return pairs;
}

}  // namespace nast
