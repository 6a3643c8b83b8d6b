#pragma once

// Closed clinical ontology: conditions, their location/severity values, and
// the affirmative-alternative phrase used when a negated finding is rewritten
// without negation cues.

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "json.hpp"

namespace nast {

// How a location value attaches to the condition in a sentence:
//   side  -> "there is a small left pneumothorax"
//   lobar -> "there is consolidation in the right lower lobe"
enum class LocationKind { none, side, lobar };

struct Condition {
    std::string id;              // stable identifier, e.g. "pleural_effusion"
    std::string name;            // caption surface form, e.g. "pleural effusion"
    LocationKind location_kind = LocationKind::none;
    std::vector<std::string> locations;   // empty when location_kind == none
    std::vector<std::string> severities;  // empty when the condition has no grading
    std::string affirmative;     // negation-free phrase for the absent state
};

// Words that express negation. "free of" is a bigram; hyphenated words like
// "device-free" do not count.
inline const std::vector<std::string>& negation_cue_words() {
    static const std::vector<std::string> cues = {"no", "without", "absent", "lacking"};
    return cues;
}

inline bool contains_negation_cue(const std::vector<std::string>& words) {
    for (size_t i = 0; i < words.size(); ++i) {
        for (const auto& cue : negation_cue_words()) {
            if (words[i] == cue) return true;
        }
        if (words[i] == "free" && i + 1 < words.size() && words[i + 1] == "of") return true;
    }
    return false;
}

class Ontology {
public:
    std::vector<Condition> conditions;

    const Condition& condition(const std::string& id) const {
        for (const auto& c : conditions) {
            if (c.id == id) return c;
        }
        throw DataError("unknown condition id: " + id);
    }

    bool has_condition(const std::string& id) const {
        for (const auto& c : conditions) {
            if (c.id == id) return true;
        }
        return false;
    }

    size_t index_of(const std::string& id) const {
        for (size_t i = 0; i < conditions.size(); ++i) {
            if (conditions[i].id == id) return i;
        }
        throw DataError("unknown condition id: " + id);
    }

    // Every word a generated caption, claim, probe, or MCQ option may contain.
    std::vector<std::string> lexicon() const;

    void validate() const;

    nlohmann::json to_json() const;
    static Ontology from_json(const nlohmann::json& j);
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ' || ch == '\t' || ch == '\n') {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else if (ch == ',' || ch == '.' || ch == ';' || ch == '?') {
            // punctuation is dropped, not part of any word
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

inline std::vector<std::string> Ontology::lexicon() const {
    std::set<std::string> words;
    auto add_phrase = [&](const std::string& p) {
        for (const auto& w : split_words(p)) words.insert(w);
    };
    // caption templates
    for (const char* w : {"there", "is", "a", "no", "in", "the"}) words.insert(w);
    // absent-caption surface variants
    for (const char* w : {"without", "absent", "free", "of", "lacking"}) words.insert(w);
    // MCQ option phrasing pools and connectives
    for (const char* w : {"with", "showing", "noted", "evidence", "present", "evident", "and"})
        words.insert(w);
    for (const auto& c : conditions) {
        add_phrase(c.name);
        add_phrase(c.affirmative);
        for (const auto& l : c.locations) add_phrase(l);
        for (const auto& s : c.severities) add_phrase(s);
    }
    return {words.begin(), words.end()};
}

inline void Ontology::validate() const {
    if (conditions.empty()) throw DataError("ontology has no conditions");
    std::set<std::string> ids;
    for (const auto& c : conditions) {
        if (!ids.insert(c.id).second) throw DataError("duplicate condition id: " + c.id);
        if (c.name.empty()) throw DataError("condition without name: " + c.id);
        if (c.affirmative.empty())
            throw DataError("affirmative map not total, missing: " + c.id);
        if (contains_negation_cue(split_words(c.affirmative)))
            throw DataError("affirmative phrase carries a negation cue: " + c.affirmative);
        if (c.location_kind != LocationKind::none && c.locations.empty())
            throw DataError("condition with location kind but empty location list: " + c.id);
        if (c.location_kind == LocationKind::none && !c.locations.empty())
            throw DataError("condition with locations but no location kind: " + c.id);
    }
}

inline nlohmann::json Ontology::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : conditions) {
        nlohmann::json jc;
        jc["id"] = c.id;
        jc["name"] = c.name;
        jc["location_kind"] = c.location_kind == LocationKind::none  ? "none"
                              : c.location_kind == LocationKind::side ? "side"
                                                                      : "lobar";
        jc["locations"] = c.locations;
        jc["severities"] = c.severities;
        jc["affirmative"] = c.affirmative;
        arr.push_back(jc);
    }
    return nlohmann::json{{"conditions", arr}};
}

inline Ontology Ontology::from_json(const nlohmann::json& j) {
    Ontology o;
    for (const auto& jc : j.at("conditions")) {
        Condition c;
        c.id = jc.at("id").get<std::string>();
        c.name = jc.at("name").get<std::string>();
        std::string kind = jc.at("location_kind").get<std::string>();
        c.location_kind = kind == "none"   ? LocationKind::none
                          : kind == "side" ? LocationKind::side
                                           : LocationKind::lobar;
        c.locations = jc.at("locations").get<std::vector<std::string>>();
        c.severities = jc.at("severities").get<std::vector<std::string>>();
        c.affirmative = jc.at("affirmative").get<std::string>();
        o.conditions.push_back(std::move(c));
    }
    o.validate();
    return o;
}

// The 13-condition chest radiograph ontology used throughout.
inline Ontology default_ontology() {
    const std::vector<std::string> lobes = {"left lower lobe", "right lower lobe",
                                            "left upper lobe", "right upper lobe"};
    const std::vector<std::string> sides = {"left", "right"};
    const std::vector<std::string> grades3 = {"mild", "moderate", "severe"};
    const std::vector<std::string> grades4 = {"small", "moderate", "large", "severe"};

    Ontology o;
    auto add = [&](std::string id, std::string name, LocationKind kind,
                   std::vector<std::string> locs, std::vector<std::string> sevs,
                   std::string affirmative) {
        Condition c;
        c.id = std::move(id);
        c.name = std::move(name);
        c.location_kind = kind;
        c.locations = std::move(locs);
        c.severities = std::move(sevs);
        c.affirmative = std::move(affirmative);
        o.conditions.push_back(std::move(c));
    };

    add("atelectasis", "atelectasis", LocationKind::lobar, lobes, grades3,
        "well-aerated expanded lungs");
    add("cardiomegaly", "cardiomegaly", LocationKind::none, {}, grades3,
        "normal heart size");
    add("consolidation", "consolidation", LocationKind::lobar, lobes, grades3,
        "clear lung parenchyma");
    add("edema", "pulmonary edema", LocationKind::none, {}, grades3,
        "normal pulmonary vascularity");
    add("enlarged_cardiomediastinum", "enlarged cardiomediastinum", LocationKind::none, {},
        grades3, "normal mediastinal contours");
    add("fracture", "fracture", LocationKind::side, sides, grades3,
        "intact bony structures");
    add("lung_lesion", "lung lesion", LocationKind::lobar, lobes, grades3,
        "homogeneous lung parenchyma");
    add("lung_opacity", "lung opacity", LocationKind::lobar, lobes, grades3,
        "well-aerated lung fields");
    add("pleural_effusion", "pleural effusion", LocationKind::side, sides, grades4,
        "sharp costophrenic angles");
    add("pleural_other", "pleural abnormality", LocationKind::side, sides, grades3,
        "smooth pleural surfaces");
    add("pneumonia", "pneumonia", LocationKind::lobar, lobes, grades3,
        "aerated alveoli");
    add("pneumothorax", "pneumothorax", LocationKind::side, sides, grades4,
        "fully expanded lungs");
    add("support_devices", "support devices", LocationKind::none, {}, {},
        "device-free chest");

    o.validate();
    return o;
}

}  // namespace nast
