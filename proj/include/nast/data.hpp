#pragma once

// Synthetic contextual-negation corpus: structured facts, single-attribute
// counterfactuals, template captions, claim sets, feature-vector images, and
// patient-level splits.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "nast/ontology.hpp"
#include "json.hpp"

namespace nast {

enum class Existence { present, absent };
enum class Certainty { confident, uncertain };
enum class NegationType { existence_flip, location_flip, severity_flip };

inline std::string negation_type_name(NegationType t) {
    switch (t) {
        case NegationType::existence_flip: return "existence-flip";
        case NegationType::location_flip: return "location-flip";
        case NegationType::severity_flip: return "severity-flip";
    }
    return "?";
}

struct StructuredFact {
    std::string condition;
    Existence existence = Existence::present;
    std::optional<std::string> location;
    std::optional<std::string> severity;
    Certainty certainty = Certainty::confident;

    bool definitive() const { return certainty == Certainty::confident; }

    bool operator==(const StructuredFact& o) const {
        return condition == o.condition && existence == o.existence &&
               location == o.location && severity == o.severity && certainty == o.certainty;
    }
};

struct ClaimSet {
    std::string image_id;
    std::vector<std::string> claims;
    int correct_index = -1;
    std::vector<std::string> negation_types;  // "true" or a flip tag, per claim
};

struct StudyRecord {
    std::string patient_id;
    std::string study_id;
    std::vector<StructuredFact> facts;
    std::vector<std::string> captions;      // one per definitive fact, aligned via caption_fact
    std::vector<int> caption_fact;          // caption i realizes facts[caption_fact[i]]
    std::vector<double> image_features;
    std::string split;                      // train | val | test
    std::vector<ClaimSet> claim_sets;       // one per fact with enough counterfactuals
};

// ----------------------------- caption realization -----------------------------

// Absent facts admit several negation surface forms; index 0 is canonical,
// the rest are the standard radiology telegraph variants.
inline constexpr int kAbsentVariantCount = 6;

inline std::string realize_absent(const std::string& name, int variant) {
    switch (variant % kAbsentVariantCount) {
        case 0: return "there is no " + name;
        case 1: return "no " + name;
        case 2: return "without " + name;
        case 3: return name + " absent";
        case 4: return "free of " + name;
        default: return "lacking " + name;
    }
}

// Deterministic template per (existence, has-location, has-severity) shape.
// variant selects an absent surface form; present facts have one fixed form.
inline std::string realize_caption(const StructuredFact& fact, const Ontology& ont,
                                   int variant = 0) {
    require(fact.definitive(), "realize_caption: fact must be definitive");
    const Condition& cond = ont.condition(fact.condition);
    if (fact.existence == Existence::absent) {
        return realize_absent(cond.name, variant);
    }
    const bool has_loc = fact.location.has_value();
    const bool has_sev = fact.severity.has_value();
    if (has_loc && cond.location_kind == LocationKind::side) {
        if (has_sev) return "there is a " + *fact.severity + " " + *fact.location + " " + cond.name;
        return "there is a " + *fact.location + " " + cond.name;
    }
    if (has_loc && cond.location_kind == LocationKind::lobar) {
        if (has_sev)
            return "there is " + *fact.severity + " " + cond.name + " in the " + *fact.location;
        return "there is " + cond.name + " in the " + *fact.location;
    }
    if (has_loc) throw DataError("fact has location but condition admits none: " + fact.condition);
    if (has_sev) return "there is " + *fact.severity + " " + cond.name;
    return "there is " + cond.name;
}

// ----------------------------- caption validation -----------------------------

enum class ValidationFail { none, vocabulary, condition, existence, location, severity };

struct ValidationResult {
    bool pass = false;
    ValidationFail fail = ValidationFail::none;

    static ValidationResult ok() { return {true, ValidationFail::none}; }
    static ValidationResult bad(ValidationFail f) { return {false, f}; }
};

inline std::string validation_fail_name(ValidationFail f) {
    switch (f) {
        case ValidationFail::none: return "ok";
        case ValidationFail::vocabulary: return "vocabulary";
        case ValidationFail::condition: return "condition";
        case ValidationFail::existence: return "existence";
        case ValidationFail::location: return "location";
        case ValidationFail::severity: return "severity";
    }
    return "?";
}

inline bool contains_phrase(const std::vector<std::string>& words,
                            const std::vector<std::string>& phrase) {
    if (phrase.empty() || phrase.size() > words.size()) return false;
    for (size_t i = 0; i + phrase.size() <= words.size(); ++i) {
        bool hit = true;
        for (size_t k = 0; k < phrase.size(); ++k) {
            if (words[i + k] != phrase[k]) {
                hit = false;
                break;
            }
        }
        if (hit) return true;
    }
    return false;
}

// Checks that a caption (i) names the condition, (ii) expresses existence,
// location, and severity exactly as the fact states them, and (iii) uses only
// lexicon words.
inline ValidationResult validate_caption(const std::string& caption, const StructuredFact& fact,
                                         const Ontology& ont) {
    const auto words = split_words(caption);

    static thread_local std::set<std::string> lex_cache;
    static thread_local const Ontology* lex_owner = nullptr;
    if (lex_owner != &ont) {
        auto lex = ont.lexicon();
        lex_cache = std::set<std::string>(lex.begin(), lex.end());
        lex_owner = &ont;
    }
    for (const auto& w : words) {
        if (!lex_cache.count(w)) return ValidationResult::bad(ValidationFail::vocabulary);
    }

    const Condition& cond = ont.condition(fact.condition);
    if (!contains_phrase(words, split_words(cond.name)))
        return ValidationResult::bad(ValidationFail::condition);

    const bool negated = contains_negation_cue(words);
    if (fact.existence == Existence::absent && !negated)
        return ValidationResult::bad(ValidationFail::existence);
    if (fact.existence == Existence::present && negated)
        return ValidationResult::bad(ValidationFail::existence);

    // location must appear exactly when the fact carries one (and absent facts
    // carry none in text)
    const bool expect_loc = fact.existence == Existence::present && fact.location.has_value();
    bool found_expected_loc = expect_loc && contains_phrase(words, split_words(*fact.location));
    bool found_any_loc = false;
    for (const auto& loc : cond.locations) {
        if (contains_phrase(words, split_words(loc))) {
            found_any_loc = true;
            break;
        }
    }
    if (expect_loc && !found_expected_loc) return ValidationResult::bad(ValidationFail::location);
    if (!expect_loc && found_any_loc) return ValidationResult::bad(ValidationFail::location);

    const bool expect_sev = fact.existence == Existence::present && fact.severity.has_value();
    bool found_expected_sev = expect_sev && contains_phrase(words, {*fact.severity});
    bool found_any_sev = false;
    for (const auto& sev : cond.severities) {
        if (contains_phrase(words, {sev})) {
            found_any_sev = true;
            break;
        }
    }
    if (expect_sev && !found_expected_sev) return ValidationResult::bad(ValidationFail::severity);
    if (!expect_sev && found_any_sev) return ValidationResult::bad(ValidationFail::severity);

    return ValidationResult::ok();
}

// ----------------------------- perturbation -----------------------------

inline bool perturbation_applicable(const StructuredFact& fact, NegationType type) {
    switch (type) {
        case NegationType::existence_flip: return true;
        case NegationType::location_flip:
            return fact.existence == Existence::present && fact.location.has_value();
        case NegationType::severity_flip:
            return fact.existence == Existence::present && fact.severity.has_value();
    }
    return false;
}

// Flips exactly one attribute; everything else is preserved field-for-field.
inline StructuredFact perturb(const StructuredFact& fact, NegationType type, const Ontology& ont,
                              Rng& rng) {
    require(perturbation_applicable(fact, type), "perturb: inapplicable negation type");
    StructuredFact out = fact;
    const Condition& cond = ont.condition(fact.condition);
    switch (type) {
        case NegationType::existence_flip:
            out.existence =
                fact.existence == Existence::present ? Existence::absent : Existence::present;
            break;
        case NegationType::location_flip: {
            std::vector<std::string> alternatives;
            for (const auto& loc : cond.locations) {
                if (loc != *fact.location) alternatives.push_back(loc);
            }
            require(!alternatives.empty(), "perturb: no alternative location");
            out.location = alternatives[rng.below(alternatives.size())];
            break;
        }
        case NegationType::severity_flip: {
            std::vector<std::string> alternatives;
            for (const auto& sev : cond.severities) {
                if (sev != *fact.severity) alternatives.push_back(sev);
            }
            require(!alternatives.empty(), "perturb: no alternative severity");
            out.severity = alternatives[rng.below(alternatives.size())];
            break;
        }
    }
    return out;
}

// Realization of a perturbed fact. Absent facts drop location/severity from the
// text; the fact itself keeps the untouched fields.
inline std::string realize_claim(const StructuredFact& fact, const Ontology& ont) {
    StructuredFact text_fact = fact;
    if (text_fact.existence == Existence::absent) {
        text_fact.location.reset();
        text_fact.severity.reset();
    }
    return realize_caption(text_fact, ont, 0);
}

// ----------------------------- claim sets -----------------------------

struct ClaimBuildStats {
    int reduced_k = 0;  // sets built with fewer negatives than requested
};

// How many distinct single-attribute counterfactuals a fact admits.
inline int counterfactual_pool_size(const StructuredFact& fact, const Ontology& ont) {
    int n = 1;  // existence flip always applies
    const Condition& cond = ont.condition(fact.condition);
    if (perturbation_applicable(fact, NegationType::location_flip))
        n += static_cast<int>(cond.locations.size()) - 1;
    if (perturbation_applicable(fact, NegationType::severity_flip))
        n += static_cast<int>(cond.severities.size()) - 1;
    return n;
}

inline ClaimSet build_claim_set(const StructuredFact& true_fact, const Ontology& ont, Rng& rng,
                                int k, const std::string& image_id,
                                ClaimBuildStats* stats = nullptr) {
    require(true_fact.definitive(), "build_claim_set: fact must be definitive");
    require(k >= 2, "build_claim_set: K must be at least 2");

    struct Negative {
        NegationType type;
        StructuredFact fact;
        std::string caption;
    };

    // enumerate every distinct single-attribute counterfactual
    std::vector<Negative> pool;
    {
        StructuredFact f = true_fact;
        f.existence =
            true_fact.existence == Existence::present ? Existence::absent : Existence::present;
        pool.push_back({NegationType::existence_flip, f, realize_claim(f, ont)});
    }
    const Condition& cond = ont.condition(true_fact.condition);
    if (perturbation_applicable(true_fact, NegationType::location_flip)) {
        for (const auto& loc : cond.locations) {
            if (loc == *true_fact.location) continue;
            StructuredFact f = true_fact;
            f.location = loc;
            pool.push_back({NegationType::location_flip, f, realize_claim(f, ont)});
        }
    }
    if (perturbation_applicable(true_fact, NegationType::severity_flip)) {
        for (const auto& sev : cond.severities) {
            if (sev == *true_fact.severity) continue;
            StructuredFact f = true_fact;
            f.severity = sev;
            pool.push_back({NegationType::severity_flip, f, realize_claim(f, ont)});
        }
    }

    int want = k - 1;
    if (static_cast<int>(pool.size()) < want) {
        want = static_cast<int>(pool.size());
        if (stats) stats->reduced_k += 1;
    }

    // one of each applicable type first, then seeded fill from the leftovers
    std::vector<int> chosen;
    std::set<int> used;
    for (NegationType t : {NegationType::existence_flip, NegationType::location_flip,
                           NegationType::severity_flip}) {
        if (static_cast<int>(chosen.size()) >= want) break;
        std::vector<int> of_type;
        for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
            if (pool[i].type == t) of_type.push_back(i);
        }
        if (of_type.empty()) continue;
        int pick = of_type[rng.below(of_type.size())];
        chosen.push_back(pick);
        used.insert(pick);
    }
    std::vector<int> rest;
    for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
        if (!used.count(i)) rest.push_back(i);
    }
    rng.shuffle(rest);
    for (int idx : rest) {
        if (static_cast<int>(chosen.size()) >= want) break;
        chosen.push_back(idx);
    }

    struct Entry {
        std::string caption;
        std::string tag;
    };
    std::vector<Entry> entries;
    entries.push_back({realize_claim(true_fact, ont), "true"});
    for (int idx : chosen) {
        entries.push_back({pool[idx].caption, negation_type_name(pool[idx].type)});
    }
    rng.shuffle(entries);

    ClaimSet cs;
    cs.image_id = image_id;
    for (int i = 0; i < static_cast<int>(entries.size()); ++i) {
        cs.claims.push_back(entries[i].caption);
        cs.negation_types.push_back(entries[i].tag);
        if (entries[i].tag == "true") cs.correct_index = i;
    }

    std::set<std::string> uniq(cs.claims.begin(), cs.claims.end());
    if (uniq.size() != cs.claims.size())
        throw DataError("claim set has duplicate captions for image " + image_id);
    return cs;
}

// ----------------------------- image features -----------------------------

// Per-condition feature block: [presence, location one-hots..., severity].
struct FeatureLayout {
    struct Block {
        std::string condition;
        int offset = 0;
        int num_locations = 0;
    };
    std::vector<Block> blocks;
    int dim = 0;

    static FeatureLayout from_ontology(const Ontology& ont) {
        FeatureLayout fl;
        int off = 0;
        for (const auto& c : ont.conditions) {
            Block b;
            b.condition = c.id;
            b.offset = off;
            b.num_locations = static_cast<int>(c.locations.size());
            off += 2 + b.num_locations;
            fl.blocks.push_back(b);
        }
        fl.dim = off;
        return fl;
    }

    const Block& block(const std::string& condition) const {
        for (const auto& b : blocks) {
            if (b.condition == condition) return b;
        }
        throw DataError("feature layout has no block for " + condition);
    }
};

inline double severity_magnitude(const Condition& cond, const std::optional<std::string>& sev) {
    if (!sev.has_value() || cond.severities.empty()) return 1.0;
    for (size_t i = 0; i < cond.severities.size(); ++i) {
        if (cond.severities[i] == *sev)
            return static_cast<double>(i + 1) / static_cast<double>(cond.severities.size());
    }
    throw DataError("unknown severity value: " + *sev);
}

// Present facts light their block: presence channel carries the severity-scaled
// magnitude, locations are one-hot, severity channel repeats the grade.
// Absent and uncertain facts leave the block at zero. Gaussian noise on top.
inline std::vector<double> render_image(const std::vector<StructuredFact>& facts,
                                        const Ontology& ont, const FeatureLayout& layout,
                                        Rng& rng, double noise_sigma) {
    std::vector<double> feat(layout.dim, 0.0);
    for (const auto& fact : facts) {
        if (fact.existence != Existence::present || !fact.definitive()) continue;
        const Condition& cond = ont.condition(fact.condition);
        const auto& blk = layout.block(fact.condition);
        double mag = severity_magnitude(cond, fact.severity);
        feat[blk.offset] = mag;
        if (fact.location.has_value()) {
            for (int li = 0; li < blk.num_locations; ++li) {
                if (cond.locations[li] == *fact.location) feat[blk.offset + 1 + li] = 1.0;
            }
        }
        feat[blk.offset + 1 + blk.num_locations] = fact.severity.has_value() ? mag : 0.0;
    }
    if (noise_sigma > 0.0) {
        for (double& x : feat) x += rng.gaussian(0.0, noise_sigma);
    }
    return feat;
}

// ----------------------------- study generation -----------------------------

struct CorpusConfig {
    uint64_t seed = 7;
    int num_studies = 20000;
    double noise_sigma = 0.05;
    int claim_k_min = 5;
    int claim_k_max = 7;
    std::vector<double> split_ratios = {0.8, 0.1, 0.1};
    double uncertain_prob = 0.08;
    double present_prob = 0.5;
    int min_studies_per_patient = 1;
    int max_studies_per_patient = 3;
};

// Samples 3..6 distinct conditions with presence, optional attributes, and a
// certainty flag. Captions cover every definitive fact; absent-fact captions
// draw a seeded surface variant.
inline StudyRecord gen_study(const Ontology& ont, Rng& rng, const CorpusConfig& cfg,
                             const std::string& patient_id, const std::string& study_id) {
    StudyRecord rec;
    rec.patient_id = patient_id;
    rec.study_id = study_id;

    int n_conditions = rng.range(3, 6);
    std::vector<int> idx(ont.conditions.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    idx.resize(n_conditions);
    std::sort(idx.begin(), idx.end());  // stable fact order within the record

    for (int ci : idx) {
        const Condition& cond = ont.conditions[ci];
        StructuredFact f;
        f.condition = cond.id;
        f.certainty = rng.coin(cfg.uncertain_prob) ? Certainty::uncertain : Certainty::confident;
        f.existence = rng.coin(cfg.present_prob) ? Existence::present : Existence::absent;
        if (f.existence == Existence::present) {
            if (!cond.locations.empty() && rng.coin(0.7))
                f.location = cond.locations[rng.below(cond.locations.size())];
            if (!cond.severities.empty() && rng.coin(0.7))
                f.severity = cond.severities[rng.below(cond.severities.size())];
        }
        rec.facts.push_back(std::move(f));
    }

    for (int fi = 0; fi < static_cast<int>(rec.facts.size()); ++fi) {
        const auto& f = rec.facts[fi];
        if (!f.definitive()) continue;
        int variant = f.existence == Existence::absent
                          ? static_cast<int>(rng.below(kAbsentVariantCount))
                          : 0;
        rec.captions.push_back(realize_caption(f, ont, variant));
        rec.caption_fact.push_back(fi);
    }
    return rec;
}

// ----------------------------- splits -----------------------------

// All of a patient's studies land in one split; the bucket is a pure function
// of (seed, patient_id).
inline std::string split_for_patient(const std::string& patient_id,
                                     const std::vector<double>& ratios, uint64_t seed) {
    require(ratios.size() == 3, "split ratios must have three entries");
    double sum = ratios[0] + ratios[1] + ratios[2];
    require(std::abs(sum - 1.0) < 1e-9, "split ratios must sum to 1");
    double u = static_cast<double>(splitmix64(seed ^ fnv1a64(patient_id)) >> 11) * 0x1.0p-53;
    if (u < ratios[0]) return "train";
    if (u < ratios[0] + ratios[1]) return "val";
    return "test";
}

// ----------------------------- JSON -----------------------------

inline nlohmann::json fact_to_json(const StructuredFact& f) {
    nlohmann::json j;
    j["condition"] = f.condition;
    j["existence"] = f.existence == Existence::present ? "present" : "absent";
    if (f.location) j["location"] = *f.location;
    if (f.severity) j["severity"] = *f.severity;
    j["certainty"] = f.certainty == Certainty::confident ? "confident" : "uncertain";
    return j;
}

inline StructuredFact fact_from_json(const nlohmann::json& j) {
    StructuredFact f;
    f.condition = j.at("condition").get<std::string>();
    f.existence = j.at("existence").get<std::string>() == "present" ? Existence::present
                                                                    : Existence::absent;
    if (j.contains("location")) f.location = j.at("location").get<std::string>();
    if (j.contains("severity")) f.severity = j.at("severity").get<std::string>();
    f.certainty = j.at("certainty").get<std::string>() == "confident" ? Certainty::confident
                                                                      : Certainty::uncertain;
    return f;
}

inline nlohmann::json study_to_json(const StudyRecord& rec) {
    nlohmann::json j;
    j["patient_id"] = rec.patient_id;
    j["study_id"] = rec.study_id;
    j["split"] = rec.split;
    nlohmann::json facts = nlohmann::json::array();
    for (const auto& f : rec.facts) facts.push_back(fact_to_json(f));
    j["facts"] = facts;
    j["captions"] = rec.captions;
    j["caption_fact"] = rec.caption_fact;
    j["features"] = rec.image_features;
    nlohmann::json sets = nlohmann::json::array();
    for (const auto& cs : rec.claim_sets) {
        sets.push_back({{"image_id", cs.image_id},
                        {"claims", cs.claims},
                        {"correct_index", cs.correct_index},
                        {"negation_types", cs.negation_types}});
    }
    j["claim_sets"] = sets;
    return j;
}

inline StudyRecord study_from_json(const nlohmann::json& j) {
    StudyRecord rec;
    rec.patient_id = j.at("patient_id").get<std::string>();
    rec.study_id = j.at("study_id").get<std::string>();
    rec.split = j.at("split").get<std::string>();
    for (const auto& jf : j.at("facts")) rec.facts.push_back(fact_from_json(jf));
    rec.captions = j.at("captions").get<std::vector<std::string>>();
    rec.caption_fact = j.at("caption_fact").get<std::vector<int>>();
    rec.image_features = j.at("features").get<std::vector<double>>();
    for (const auto& jc : j.at("claim_sets")) {
        ClaimSet cs;
        cs.image_id = jc.at("image_id").get<std::string>();
        cs.claims = jc.at("claims").get<std::vector<std::string>>();
        cs.correct_index = jc.at("correct_index").get<int>();
        cs.negation_types = jc.at("negation_types").get<std::vector<std::string>>();
        rec.claim_sets.push_back(std::move(cs));
    }
    return rec;
}

}  // namespace nast
