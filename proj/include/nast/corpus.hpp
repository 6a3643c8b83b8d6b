#pragma once

// Corpus assembly and on-disk format: JSON-lines studies, a standalone
// ontology file, and a manifest with seed, counts, and split ratios.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "nast/data.hpp"
#include "nast/ontology.hpp"
#include "json.hpp"

namespace nast {

struct Corpus {
    Ontology ontology;
    FeatureLayout layout;
    std::vector<StudyRecord> studies;
    CorpusConfig config;
    int num_patients = 0;
    int reduced_claim_sets = 0;

    std::vector<const StudyRecord*> split(const std::string& name) const {
        std::vector<const StudyRecord*> out;
        for (const auto& s : studies) {
            if (s.split == name) out.push_back(&s);
        }
        return out;
    }
};

// Deterministic per (config.seed): every study derives its own RNG stream from
// the study index, so generation order never bleeds between records.
inline Corpus generate_corpus(const Ontology& ont, const CorpusConfig& cfg) {
    Corpus corpus;
    corpus.ontology = ont;
    corpus.layout = FeatureLayout::from_ontology(ont);
    corpus.config = cfg;

    Rng patient_rng(derive_seed(cfg.seed, "patients"));
    ClaimBuildStats claim_stats;

    int study_counter = 0;
    int patient_counter = 0;
    while (study_counter < cfg.num_studies) {
        char pid[16];
        std::snprintf(pid, sizeof(pid), "p%05d", patient_counter);
        std::string patient_id(pid);
        patient_counter++;
        std::string split = split_for_patient(patient_id, cfg.split_ratios, cfg.seed);

        int n_studies = patient_rng.range(cfg.min_studies_per_patient, cfg.max_studies_per_patient);
        for (int s = 0; s < n_studies && study_counter < cfg.num_studies; ++s) {
            char sid[16];
            std::snprintf(sid, sizeof(sid), "s%06d", study_counter);
            std::string study_id(sid);
            Rng rng(derive_seed(cfg.seed, "study/" + study_id));

            StudyRecord rec = gen_study(ont, rng, cfg, patient_id, study_id);
            rec.split = split;
            rec.image_features = render_image(rec.facts, ont, corpus.layout, rng, cfg.noise_sigma);

            // one claim set per fact that admits enough counterfactuals to
            // fill the configured K range
            for (const auto& f : rec.facts) {
                if (!f.definitive()) continue;
                if (counterfactual_pool_size(f, ont) < cfg.claim_k_min - 1) continue;
                int k = rng.range(cfg.claim_k_min, cfg.claim_k_max);
                rec.claim_sets.push_back(build_claim_set(f, ont, rng, k, study_id, &claim_stats));
            }
            corpus.studies.push_back(std::move(rec));
            study_counter++;
        }
    }
    corpus.num_patients = patient_counter;
    corpus.reduced_claim_sets = claim_stats.reduced_k;
    return corpus;
}

inline nlohmann::json corpus_manifest(const Corpus& corpus) {
    int n_train = 0, n_val = 0, n_test = 0, n_claims = 0, n_captions = 0;
    for (const auto& s : corpus.studies) {
        if (s.split == "train") n_train++;
        else if (s.split == "val") n_val++;
        else n_test++;
        n_claims += static_cast<int>(s.claim_sets.size());
        n_captions += static_cast<int>(s.captions.size());
    }
    nlohmann::json m;
    m["seed"] = corpus.config.seed;
    m["num_studies"] = static_cast<int>(corpus.studies.size());
    m["num_patients"] = corpus.num_patients;
    m["split_ratios"] = corpus.config.split_ratios;
    m["counts"] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
    m["num_claim_sets"] = n_claims;
    m["num_captions"] = n_captions;
    m["reduced_claim_sets"] = corpus.reduced_claim_sets;
    m["noise_sigma"] = corpus.config.noise_sigma;
    m["feature_dim"] = corpus.layout.dim;
    m["ontology"] = "ontology.json";
    return m;
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "corpus.jsonl", std::ios::binary);
        if (!out) throw DataError("cannot write corpus file in " + dir.string());
        for (const auto& s : corpus.studies) out << study_to_json(s).dump() << "\n";
    }
    write_file(dir / "ontology.json", corpus.ontology.to_json().dump(2) + "\n");
    write_file(dir / "MANIFEST.json", corpus_manifest(corpus).dump(2) + "\n");
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    Corpus corpus;
    auto ontology_path = dir / "ontology.json";
    if (!std::filesystem::exists(ontology_path))
        throw DataError("missing ontology file: " + ontology_path.string());
    corpus.ontology = Ontology::from_json(nlohmann::json::parse(read_file(ontology_path)));
    corpus.layout = FeatureLayout::from_ontology(corpus.ontology);

    auto corpus_path = dir / "corpus.jsonl";
    std::ifstream in(corpus_path, std::ios::binary);
    if (!in) throw DataError("missing corpus file: " + corpus_path.string());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        corpus.studies.push_back(study_from_json(nlohmann::json::parse(line)));
    }

    auto manifest_path = dir / "MANIFEST.json";
    if (std::filesystem::exists(manifest_path)) {
        auto m = nlohmann::json::parse(read_file(manifest_path));
        corpus.config.seed = m.at("seed").get<uint64_t>();
        corpus.config.split_ratios = m.at("split_ratios").get<std::vector<double>>();
        corpus.config.noise_sigma = m.at("noise_sigma").get<double>();
        corpus.num_patients = m.at("num_patients").get<int>();
        if (m.at("num_studies").get<int>() != static_cast<int>(corpus.studies.size()))
            throw DataError("manifest study count does not match corpus file");
    }
    return corpus;
}

}  // namespace nast
