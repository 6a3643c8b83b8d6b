#pragma once

// Retrieval and claim-set evaluation over a corpus split, plus schema checks
// for the emitted report files.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "nast/benchmark.hpp"
#include "nast/common.hpp"
#include "nast/corpus.hpp"
#include "nast/encoder.hpp"
#include "nast/model.hpp"
#include "nast/tokenizer.hpp"

namespace nast {

struct RetrievalResult {
    double r_at_1 = 0.0;  // percent
    double r_at_5 = 0.0;
    int n_queries = 0;    // (image, caption) pairs scored
    int pool_size = 0;    // unique caption texts
};

// Image-to-text retrieval over the split's unique caption texts. Each (image,
// caption) pair asks where the caption's text ranks among the pool by
// similarity to the image; ties rank by lower pool index.
inline RetrievalResult retrieval_eval(const Model& m, const Corpus& corpus, const Tokenizer& tok,
                                      const std::string& split) {
    auto records = corpus.split(split);
    std::vector<std::string> pool;
    {
        std::set<std::string> uniq;
        for (const auto* r : records) {
            for (const auto& c : r->captions) uniq.insert(c);
        }
        pool.assign(uniq.begin(), uniq.end());
    }
    require(!pool.empty(), "retrieval: split has no captions");

    std::vector<std::vector<double>> pool_emb;
    pool_emb.reserve(pool.size());
    std::map<std::string, int> pool_index;
    for (size_t i = 0; i < pool.size(); ++i) {
        pool_emb.push_back(encode_text(m, tok.tokenize(pool[i])).embedding);
        pool_index[pool[i]] = static_cast<int>(i);
    }

    RetrievalResult res;
    res.pool_size = static_cast<int>(pool.size());
    int hit1 = 0, hit5 = 0;
    const double tau = m.temperature();
    std::vector<double> scores(pool.size());
    for (const auto* rec : records) {
        if (rec->captions.empty()) continue;
        auto img = encode_image(m, rec->image_features);
        for (size_t i = 0; i < pool.size(); ++i) {
            double dot = 0.0;
            for (size_t c = 0; c < img.size(); ++c) dot += img[c] * pool_emb[i][c];
            scores[i] = tau * dot;
        }
        for (const auto& cap : rec->captions) {
            int target = pool_index.at(cap);
            int rank = 1;
            for (size_t i = 0; i < pool.size(); ++i) {
                if (scores[i] > scores[static_cast<size_t>(target)]) rank++;
                else if (scores[i] == scores[static_cast<size_t>(target)] && static_cast<int>(i) < target) rank++;
            }
            if (rank <= 1) hit1++;
            if (rank <= 5) hit5++;
            res.n_queries++;
        }
    }
    require(res.n_queries > 0, "retrieval: no queries in split");
    res.r_at_1 = 100.0 * hit1 / res.n_queries;
    res.r_at_5 = 100.0 * hit5 / res.n_queries;
    return res;
}

struct ClaimEvalResult {
    double accuracy = 0.0;  // percent
    int n = 0;
    int ties = 0;
};

// Claim-set accuracy: the correct claim must outrank its counterfactual
// alternatives; ties resolve to the lowest claim index.
inline ClaimEvalResult claim_eval(const Model& m, const Corpus& corpus, const Tokenizer& tok,
                                  const std::string& split) {
    ClaimEvalResult res;
    int correct = 0;
    for (const auto* rec : corpus.split(split)) {
        if (rec->claim_sets.empty()) continue;
        auto img = encode_image(m, rec->image_features);
        for (const auto& cs : rec->claim_sets) {
            int best = -1;
            double best_score = 0.0;
            bool tie = false;
            for (size_t ci = 0; ci < cs.claims.size(); ++ci) {
                auto txt = encode_text(m, tok.tokenize(cs.claims[ci]));
                double s = similarity(m, img, txt.embedding);
                if (best < 0 || s > best_score) {
                    best = static_cast<int>(ci);
                    best_score = s;
                    tie = false;
                } else if (s == best_score) {
                    tie = true;
                }
            }
            if (tie) res.ties++;
            if (best == cs.correct_index) correct++;
            res.n++;
        }
    }
    require(res.n > 0, "claim eval: split has no claim sets");
    res.accuracy = 100.0 * correct / res.n;
    return res;
}

// Required keys and types for a per-model evaluation report.
inline void validate_eval_report(const nlohmann::json& j) {
    auto need = [&](const char* key) {
        if (!j.contains(key)) throw DataError(std::string("eval report missing key: ") + key);
    };
    need("arm");
    need("seed");
    need("retrieval");
    need("claim");
    need("mcq");
    const auto& r = j.at("retrieval");
    for (const char* k : {"r_at_1", "r_at_5", "n"}) {
        if (!r.contains(k) || !r.at(k).is_number())
            throw DataError(std::string("eval report retrieval field bad: ") + k);
    }
    const auto& c = j.at("claim");
    for (const char* k : {"accuracy", "n"}) {
        if (!c.contains(k) || !c.at(k).is_number())
            throw DataError(std::string("eval report claim field bad: ") + k);
    }
    const auto& q = j.at("mcq");
    for (const char* k : {"acc_affirmative", "acc_negated", "gap", "n"}) {
        if (!q.contains(k) || !q.at(k).is_number())
            throw DataError(std::string("eval report mcq field bad: ") + k);
    }
    if (j.at("retrieval").at("r_at_5").get<double>() < j.at("retrieval").at("r_at_1").get<double>())
        throw DataError("eval report violates R@5 >= R@1");
}

}  // namespace nast
