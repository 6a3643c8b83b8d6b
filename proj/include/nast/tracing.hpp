#pragma once

// Causal tracing: polarity probe pairs, patched forward passes, CTE matrices,
// per-layer aggregation over negation-bearing tokens, and min-max normalized
// layer weights.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "nast/data.hpp"
#include "nast/encoder.hpp"
#include "nast/model.hpp"
#include "nast/tokenizer.hpp"
#include "json.hpp"

namespace nast {

struct ProbePair {
    std::vector<double> image_features;
    std::string correct_text;
    std::string foil_text;
    TokenSequence correct_tokens;
    TokenSequence foil_tokens;
    std::vector<int> negator_positions;  // polarity token indices (same in both captions)
    std::string condition;
};

struct TraceResult {
    double s_corr = 0.0;
    double s_foil = 0.0;
    double d = 0.0;
    bool valid = false;
    std::vector<std::vector<double>> cte;  // (L+1) rows x length, row 0 = embedding level
    std::vector<int> negator_positions;
    int patched_forwards = 0;
};

struct LayerWeights {
    std::vector<double> cte_layer;  // index l-1 for layer l in 1..L
    std::vector<double> alpha;
};

// ----------------------------- probe construction -----------------------------

struct ProbeSource {
    StructuredFact fact;
    std::vector<double> image_features;
};

// Fixed polarity templates: the affirmative side carries "severe" so both
// captions tokenize to the same length.
inline std::string probe_affirmative_text(const Condition& cond) {
    return "there is severe " + cond.name;
}

inline std::string probe_negated_text(const Condition& cond) {
    return "there is no " + cond.name;
}

// One probe per definitive source fact whose condition admits a "severe"
// grade. Present facts read the severe-affirmative caption as correct and the
// negated caption as foil; absent facts swap the roles.
inline std::vector<ProbePair> build_probe_set(const std::vector<ProbeSource>& sources,
                                              const Ontology& ont, const Tokenizer& tok) {
    std::vector<ProbePair> probes;
    for (const auto& src : sources) {
        if (!src.fact.definitive()) continue;  // high-certainty facts only
        const Condition& cond = ont.condition(src.fact.condition);
        bool has_severe = false;
        for (const auto& s : cond.severities) {
            if (s == "severe") has_severe = true;
        }
        if (!has_severe) continue;

        std::string affirmative = probe_affirmative_text(cond);
        std::string negated = probe_negated_text(cond);
        ProbePair p;
        p.condition = cond.id;
        p.image_features = src.image_features;
        if (src.fact.existence == Existence::present) {
            p.correct_text = affirmative;
            p.foil_text = negated;
        } else {
            p.correct_text = negated;
            p.foil_text = affirmative;
        }
        p.correct_tokens = tok.tokenize(p.correct_text);
        p.foil_tokens = tok.tokenize(p.foil_text);
        if (p.correct_tokens.length() != p.foil_tokens.length())
            throw ContractError("probe template token lengths differ for " + cond.id);
        for (int i = 0; i < p.correct_tokens.length(); ++i) {
            if (p.correct_tokens.ids[static_cast<size_t>(i)] != p.foil_tokens.ids[static_cast<size_t>(i)])
                p.negator_positions.push_back(i);
        }
        require(!p.negator_positions.empty(), "probe captions are identical");
        probes.push_back(std::move(p));
    }
    return probes;
}

// Probe sources for every eligible (condition, polarity, location) cell, each
// paired with a noise-free rendering of that single fact (absent facts get the
// empty-study image).
inline std::vector<ProbeSource> synthesize_probe_sources(const Ontology& ont,
                                                         const FeatureLayout& layout) {
    std::vector<ProbeSource> sources;
    Rng null_rng(0);
    for (const auto& cond : ont.conditions) {
        bool has_severe = false;
        for (const auto& s : cond.severities) {
            if (s == "severe") has_severe = true;
        }
        if (!has_severe) continue;

        std::vector<std::optional<std::string>> locs = {std::nullopt};
        for (const auto& l : cond.locations) locs.push_back(l);
        for (const auto& loc : locs) {
            StructuredFact f;
            f.condition = cond.id;
            f.existence = Existence::present;
            f.severity = "severe";
            f.location = loc;
            sources.push_back({f, render_image({f}, ont, layout, null_rng, 0.0)});
        }
        StructuredFact f;
        f.condition = cond.id;
        f.existence = Existence::absent;
        sources.push_back({f, render_image({}, ont, layout, null_rng, 0.0)});
    }
    return sources;
}

// ----------------------------- tracing -----------------------------

// S_corr and S_foil come from plain forwards; every (layer 1..L, position)
// then gets one patched forward of the correct caption with the foil state
// substituted. The embedding row (layer 0) needs no forward: token and
// position lookups are per-position, so a layer-0 state either matches the
// correct caption's own state (a self-patch) or substitutes the full foil
// input at the only differing position.
inline TraceResult trace_pair(const Model& m, const ProbePair& pair, double d_min) {
    require(d_min > 0.0, "d_min must be positive");
    const int L = m.cfg.n_layers;
    const int T = pair.correct_tokens.length();
    const int d = m.cfg.d_model;

    TraceResult res;
    res.negator_positions = pair.negator_positions;

    auto img = encode_image(m, pair.image_features);
    auto corr = encode_text(m, pair.correct_tokens, {}, true);
    auto foil = encode_text(m, pair.foil_tokens, {}, true);
    res.s_corr = similarity(m, img, corr.embedding);
    res.s_foil = similarity(m, img, foil.embedding);
    res.d = res.s_corr - res.s_foil;

    if (std::abs(res.d) < d_min) {
        res.valid = false;  // filtered, not an error
        return res;
    }
    res.valid = true;
    res.cte.assign(static_cast<size_t>(L) + 1, std::vector<double>(static_cast<size_t>(T), 0.0));

    for (int p = 0; p < T; ++p) {
        const double* a = corr.trace->at(0, p);
        const double* b = foil.trace->at(0, p);
        bool same = true;
        for (int i = 0; i < d; ++i) {
            if (a[i] != b[i]) {
                same = false;
                break;
            }
        }
        res.cte[0][static_cast<size_t>(p)] = same ? 0.0 : 1.0;
    }

    for (int l = 1; l <= L; ++l) {
        for (int p = 0; p < T; ++p) {
            Intervention iv;
            iv.layer = l;
            iv.position = p;
            iv.replacement.assign(foil.trace->at(l, p), foil.trace->at(l, p) + d);
            auto patched = encode_text(m, pair.correct_tokens, {iv}, false);
            res.patched_forwards += 1;
            double s_lp = similarity(m, img, patched.embedding);
            res.cte[static_cast<size_t>(l)][static_cast<size_t>(p)] = (res.s_corr - s_lp) / res.d;
        }
    }
    return res;
}

// ----------------------------- aggregation -----------------------------

struct AggregateResult {
    std::vector<double> cte_layer;  // layers 1..L
    int num_valid = 0;
    int num_skipped = 0;
};

// CTE_l = mean over valid samples of the mean CTE at that sample's
// negation-bearing positions. Invalid (filtered) samples are skipped.
inline AggregateResult aggregate_cte(const std::vector<TraceResult>& results) {
    AggregateResult agg;
    for (const auto& r : results) {
        if (!r.valid) {
            agg.num_skipped++;
            continue;
        }
        const int L = static_cast<int>(r.cte.size()) - 1;
        if (agg.cte_layer.empty()) agg.cte_layer.assign(static_cast<size_t>(L), 0.0);
        require(static_cast<int>(agg.cte_layer.size()) == L, "trace results disagree on layer count");
        for (int l = 1; l <= L; ++l) {
            double s = 0.0;
            for (int p : r.negator_positions) s += r.cte[static_cast<size_t>(l)][static_cast<size_t>(p)];
            agg.cte_layer[static_cast<size_t>(l - 1)] += s / static_cast<double>(r.negator_positions.size());
        }
        agg.num_valid++;
    }
    if (agg.num_valid == 0) throw DataError("aggregate_cte: no valid trace results");
    for (double& x : agg.cte_layer) x /= agg.num_valid;
    return agg;
}

// Min-max normalization to [0,1]. When all layers tie, every weight is 1 so
// training falls back to the uniform regime instead of freezing.
inline LayerWeights normalize_weights(const std::vector<double>& cte_layer) {
    require(cte_layer.size() >= 2, "normalize_weights: need at least 2 layers");
    if (!all_finite(cte_layer)) throw NumericError("normalize_weights: non-finite CTE input");
    LayerWeights w;
    w.cte_layer = cte_layer;
    double lo = cte_layer[0], hi = cte_layer[0];
    for (double x : cte_layer) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    w.alpha.assign(cte_layer.size(), 1.0);
    if (hi > lo) {
        for (size_t i = 0; i < cte_layer.size(); ++i) w.alpha[i] = (cte_layer[i] - lo) / (hi - lo);
    }
    return w;
}

// ----------------------------- attention diagnostic -----------------------------

// Negator selectivity per head: attention mass received by the negator token
// minus mass received by an adjacent control token, averaged over query
// positions and probes, measured on the negation-carrying caption. Purely
// diagnostic; never feeds training.
struct AttentionReport {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<double> head_selectivity;  // L x H
    std::vector<double> layer_mean;        // L

    double at(int layer, int head) const {
        return head_selectivity[static_cast<size_t>(layer - 1) * n_heads + head];
    }

    std::string to_csv() const {
        std::string s = "layer,head,selectivity\n";
        char buf[80];
        for (int l = 1; l <= n_layers; ++l) {
            for (int h = 0; h < n_heads; ++h) {
                std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", l, h, at(l, h));
                s += buf;
            }
        }
        return s;
    }
};

inline AttentionReport negator_attention_report(const Model& m,
                                                const std::vector<ProbePair>& probes,
                                                const Tokenizer& tok) {
    require(!probes.empty(), "attention report needs probes");
    const int L = m.cfg.n_layers, H = m.cfg.n_heads;
    AttentionReport rep;
    rep.n_layers = L;
    rep.n_heads = H;
    rep.head_selectivity.assign(static_cast<size_t>(L) * H, 0.0);

    for (const auto& pair : probes) {
        // the caption that carries the negation cue
        const TokenSequence* seq = &pair.correct_tokens;
        {
            std::vector<std::string> words;
            for (int id : pair.correct_tokens.ids) words.push_back(tok.word(id));
            if (!contains_negation_cue(words)) seq = &pair.foil_tokens;
        }
        TextActs acts;
        text_forward(m, *seq, {}, acts);
        const int T = acts.T;
        for (int neg : pair.negator_positions) {
            const int control = neg + 1 < T ? neg + 1 : neg - 1;
            for (int l = 0; l < L; ++l) {
                const auto& att = acts.blocks[static_cast<size_t>(l)].att;
                for (int h = 0; h < H; ++h) {
                    double recv_neg = 0.0, recv_ctl = 0.0;
                    for (int i = 0; i < T; ++i) {
                        recv_neg += att[(static_cast<size_t>(h) * T + i) * T + neg];
                        recv_ctl += att[(static_cast<size_t>(h) * T + i) * T + control];
                    }
                    rep.head_selectivity[static_cast<size_t>(l) * H + h] +=
                        (recv_neg - recv_ctl) / T;
                }
            }
        }
    }
    double denom = 0.0;
    for (const auto& pair : probes) denom += static_cast<double>(pair.negator_positions.size());
    for (double& x : rep.head_selectivity) x /= denom;
    rep.layer_mean.assign(static_cast<size_t>(L), 0.0);
    for (int l = 0; l < L; ++l) {
        double s = 0.0;
        for (int h = 0; h < H; ++h) s += rep.head_selectivity[static_cast<size_t>(l) * H + h];
        rep.layer_mean[static_cast<size_t>(l)] = s / H;
    }
    return rep;
}

// ----------------------------- artifacts -----------------------------

inline nlohmann::json layer_weights_json(const LayerWeights& w, int num_pairs, int num_filtered) {
    return nlohmann::json{{"layers", static_cast<int>(w.alpha.size())},
                          {"cte_layer", w.cte_layer},
                          {"alpha", w.alpha},
                          {"num_pairs", num_pairs},
                          {"num_filtered", num_filtered}};
}

inline LayerWeights layer_weights_from_json(const nlohmann::json& j) {
    LayerWeights w;
    w.cte_layer = j.at("cte_layer").get<std::vector<double>>();
    w.alpha = j.at("alpha").get<std::vector<double>>();
    require(w.alpha.size() == w.cte_layer.size(), "alpha artifact is inconsistent");
    return w;
}

inline std::string layer_table_csv(const LayerWeights& w) {
    std::string s = "layer,cte,alpha\n";
    char buf[96];
    for (size_t i = 0; i < w.alpha.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i + 1, w.cte_layer[i], w.alpha[i]);
        s += buf;
    }
    return s;
}

inline std::string cte_matrix_csv(const TraceResult& r) {
    std::string s;
    char buf[40];
    for (size_t l = 0; l < r.cte.size(); ++l) {
        for (size_t p = 0; p < r.cte[l].size(); ++p) {
            std::snprintf(buf, sizeof(buf), "%.17g", r.cte[l][p]);
            if (p) s += ",";
            s += buf;
        }
        s += "\n";
    }
    return s;
}

// Mean CTE heatmap over valid pairs, (L+1) x max token length, with a simple
// diverging color legend.
inline std::string cte_heatmap_svg(const std::vector<TraceResult>& results) {
    size_t rows = 0, cols = 0;
    for (const auto& r : results) {
        if (!r.valid) continue;
        rows = std::max(rows, r.cte.size());
        if (!r.cte.empty()) cols = std::max(cols, r.cte[0].size());
    }
    if (rows == 0) throw DataError("heatmap: no valid trace results");

    std::vector<double> sum(rows * cols, 0.0);
    std::vector<int> cnt(rows * cols, 0);
    for (const auto& r : results) {
        if (!r.valid) continue;
        for (size_t l = 0; l < r.cte.size(); ++l) {
            for (size_t p = 0; p < r.cte[l].size(); ++p) {
                sum[l * cols + p] += r.cte[l][p];
                cnt[l * cols + p] += 1;
            }
        }
    }
    double vmax = 1e-12;
    for (size_t i = 0; i < sum.size(); ++i) {
        if (cnt[i]) vmax = std::max(vmax, std::abs(sum[i] / cnt[i]));
    }

    const int cell = 22, margin = 60, legend_w = 70;
    const int width = margin + static_cast<int>(cols) * cell + legend_w + 20;
    const int height = margin + static_cast<int>(rows) * cell + 30;
    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\">\n";
    svg << "<text x=\"" << margin << "\" y=\"20\" font-size=\"13\">mean CTE by (layer, position)"
        << "</text>\n";
    auto color = [&](double v) {
        // blue (negative) .. white (0) .. red (positive)
        double t = std::max(-1.0, std::min(1.0, v / vmax));
        int r = 255, g = 255, b = 255;
        if (t >= 0) {
            g = b = static_cast<int>(255 * (1.0 - t));
        } else {
            r = g = static_cast<int>(255 * (1.0 + t));
        }
        char buf[16];
        std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
        return std::string(buf);
    };
    for (size_t l = 0; l < rows; ++l) {
        svg << "<text x=\"8\" y=\"" << (margin + (rows - 1 - l) * cell + 15)
            << "\" font-size=\"11\">L" << l << "</text>\n";
        for (size_t p = 0; p < cols; ++p) {
            double v = cnt[l * cols + p] ? sum[l * cols + p] / cnt[l * cols + p] : 0.0;
            svg << "<rect x=\"" << (margin + p * cell) << "\" y=\""
                << (margin + (rows - 1 - l) * cell) << "\" width=\"" << cell << "\" height=\""
                << cell << "\" fill=\"" << color(v) << "\" stroke=\"#999\"/>\n";
        }
    }
    for (size_t p = 0; p < cols; ++p) {
        svg << "<text x=\"" << (margin + p * cell + 6) << "\" y=\""
            << (margin + rows * cell + 16) << "\" font-size=\"11\">" << p << "</text>\n";
    }
    // legend: max, zero, -max
    const int lx = margin + static_cast<int>(cols) * cell + 16;
    for (int i = 0; i <= 20; ++i) {
        double v = vmax * (1.0 - i / 10.0);
        svg << "<rect x=\"" << lx << "\" y=\"" << (margin + i * 8) << "\" width=\"16\" height=\"8\" fill=\""
            << color(v) << "\"/>\n";
    }
    char lab[32];
    std::snprintf(lab, sizeof(lab), "%.3g", vmax);
    svg << "<text x=\"" << (lx + 20) << "\" y=\"" << (margin + 8) << "\" font-size=\"10\">" << lab
        << "</text>\n";
    svg << "<text x=\"" << (lx + 20) << "\" y=\"" << (margin + 88) << "\" font-size=\"10\">0</text>\n";
    std::snprintf(lab, sizeof(lab), "-%.3g", vmax);
    svg << "<text x=\"" << (lx + 20) << "\" y=\"" << (margin + 168) << "\" font-size=\"10\">" << lab
        << "</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace nast
