#include <catch2/catch_amalgamated.hpp>

#include "nast/data.hpp"
#include "nast/encoder.hpp"
#include "nast/model.hpp"
#include "nast/ontology.hpp"
#include "nast/tokenizer.hpp"
#include "nast/tracing.hpp"

using namespace nast;

// ---------------------------------------------------------------------------
// Reference forward: a from-scratch reimplementation of the text encoder and
// similarity used as the tracing oracle. Plain nested vectors, no shared code
// with the library path; accumulation runs in the same canonical index order
// so agreement is exact.
// ---------------------------------------------------------------------------
namespace oracle {

using Mat = std::vector<std::vector<double>>;

Mat fetch(const Model& m, const std::string& name, int rows, int cols) {
    const auto& t = m.tensor(name).data;
    Mat out(static_cast<size_t>(rows), std::vector<double>(static_cast<size_t>(cols)));
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i)][static_cast<size_t>(j)] = t[static_cast<size_t>(i) * cols + j];
    }
    return out;
}

std::vector<double> fetch_vec(const Model& m, const std::string& name) {
    return m.tensor(name).data;
}

std::vector<double> ln(const std::vector<double>& x, const std::vector<double>& g,
                       const std::vector<double>& b) {
    const int d = static_cast<int>(x.size());
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += x[static_cast<size_t>(i)];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        double c = x[static_cast<size_t>(i)] - mean;
        var += c * c;
    }
    var /= d;
    double rstd = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> out(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i)
        out[static_cast<size_t>(i)] = (x[static_cast<size_t>(i)] - mean) * rstd * g[static_cast<size_t>(i)] + b[static_cast<size_t>(i)];
    return out;
}

std::vector<double> affine(const Mat& W, const std::vector<double>* b,
                           const std::vector<double>& x) {
    std::vector<double> out(W.size());
    for (size_t j = 0; j < W.size(); ++j) {
        double acc = b ? (*b)[j] : 0.0;
        for (size_t i = 0; i < x.size(); ++i) acc += W[j][i] * x[i];
        out[j] = acc;
    }
    return out;
}

// full text forward with an optional residual-stream patch applied after
// block `patch_layer` at `patch_pos`
std::vector<double> text_embed(const Model& m, const TokenSequence& toks, int patch_layer,
                               int patch_pos, const std::vector<double>& patch_value) {
    const int d = m.cfg.d_model, H = m.cfg.n_heads, hd = m.cfg.head_dim();
    const int F = m.cfg.d_ff(), r = m.cfg.lora_rank, L = m.cfg.n_layers;
    const int T = toks.length();
    const double sc = m.cfg.adapter_scale();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    auto tokE = fetch(m, "text.tok_embed", m.cfg.vocab_size, d);
    auto posE = fetch(m, "text.pos_embed", m.cfg.max_seq_len, d);
    Mat x(static_cast<size_t>(T), std::vector<double>(static_cast<size_t>(d)));
    for (int p = 0; p < T; ++p) {
        for (int i = 0; i < d; ++i)
            x[static_cast<size_t>(p)][static_cast<size_t>(i)] =
                tokE[static_cast<size_t>(toks.ids[static_cast<size_t>(p)])][static_cast<size_t>(i)] + posE[static_cast<size_t>(p)][static_cast<size_t>(i)];
    }

    for (int l = 1; l <= L; ++l) {
        std::string b = "text.block." + std::to_string(l) + ".";
        auto ln1g = fetch_vec(m, b + "ln1.gamma");
        auto ln1b = fetch_vec(m, b + "ln1.beta");
        auto qw = fetch(m, b + "attn.q.w", d, d);
        auto qb = fetch_vec(m, b + "attn.q.b");
        auto kw = fetch(m, b + "attn.k.w", d, d);
        auto kb = fetch_vec(m, b + "attn.k.b");
        auto vw = fetch(m, b + "attn.v.w", d, d);
        auto vb = fetch_vec(m, b + "attn.v.b");
        auto qld = fetch(m, b + "attn.q.lora.down", r, d);
        auto qlu = fetch(m, b + "attn.q.lora.up", d, r);
        auto vld = fetch(m, b + "attn.v.lora.down", r, d);
        auto vlu = fetch(m, b + "attn.v.lora.up", d, r);
        auto ow = fetch(m, b + "attn.o.w", d, d);
        auto ob = fetch_vec(m, b + "attn.o.b");
        auto ln2g = fetch_vec(m, b + "ln2.gamma");
        auto ln2b = fetch_vec(m, b + "ln2.beta");
        auto w1 = fetch(m, b + "mlp.fc1.w", F, d);
        auto b1 = fetch_vec(m, b + "mlp.fc1.b");
        auto w2 = fetch(m, b + "mlp.fc2.w", d, F);
        auto b2 = fetch_vec(m, b + "mlp.fc2.b");

        Mat q(static_cast<size_t>(T)), k(static_cast<size_t>(T)), v(static_cast<size_t>(T));
        for (int p = 0; p < T; ++p) {
            auto h = ln(x[static_cast<size_t>(p)], ln1g, ln1b);
            q[static_cast<size_t>(p)] = affine(qw, &qb, h);
            k[static_cast<size_t>(p)] = affine(kw, &kb, h);
            v[static_cast<size_t>(p)] = affine(vw, &vb, h);
            auto qd = affine(qld, nullptr, h);
            auto vd = affine(vld, nullptr, h);
            for (int j = 0; j < d; ++j) {
                double accq = 0.0, accv = 0.0;
                for (int i = 0; i < r; ++i) {
                    accq += qlu[static_cast<size_t>(j)][static_cast<size_t>(i)] * qd[static_cast<size_t>(i)];
                    accv += vlu[static_cast<size_t>(j)][static_cast<size_t>(i)] * vd[static_cast<size_t>(i)];
                }
                q[static_cast<size_t>(p)][static_cast<size_t>(j)] += sc * accq;
                v[static_cast<size_t>(p)][static_cast<size_t>(j)] += sc * accv;
            }
        }

        Mat att_out(static_cast<size_t>(T), std::vector<double>(static_cast<size_t>(d), 0.0));
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < T; ++i) {
                std::vector<double> row(static_cast<size_t>(T));
                double maxv = -1e300;
                for (int j = 0; j < T; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c)
                        s += q[static_cast<size_t>(i)][static_cast<size_t>(h * hd + c)] * k[static_cast<size_t>(j)][static_cast<size_t>(h * hd + c)];
                    s *= scale;
                    row[static_cast<size_t>(j)] = s;
                    if (s > maxv) maxv = s;
                }
                double sum = 0.0;
                for (int j = 0; j < T; ++j) {
                    row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - maxv);
                    sum += row[static_cast<size_t>(j)];
                }
                for (int j = 0; j < T; ++j) row[static_cast<size_t>(j)] /= sum;
                for (int j = 0; j < T; ++j) {
                    for (int c = 0; c < hd; ++c)
                        att_out[static_cast<size_t>(i)][static_cast<size_t>(h * hd + c)] +=
                            row[static_cast<size_t>(j)] * v[static_cast<size_t>(j)][static_cast<size_t>(h * hd + c)];
                }
            }
        }

        for (int p = 0; p < T; ++p) {
            auto proj = affine(ow, &ob, att_out[static_cast<size_t>(p)]);
            for (int i = 0; i < d; ++i) x[static_cast<size_t>(p)][static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
            auto h2 = ln(x[static_cast<size_t>(p)], ln2g, ln2b);
            auto u = affine(w1, &b1, h2);
            for (int i = 0; i < F; ++i)
                u[static_cast<size_t>(i)] = 0.5 * u[static_cast<size_t>(i)] * (1.0 + std::erf(u[static_cast<size_t>(i)] * 0.7071067811865475));
            auto mo = affine(w2, &b2, u);
            for (int i = 0; i < d; ++i) x[static_cast<size_t>(p)][static_cast<size_t>(i)] += mo[static_cast<size_t>(i)];
        }
        if (l == patch_layer) x[static_cast<size_t>(patch_pos)] = patch_value;
    }

    auto lnfg = fetch_vec(m, "text.ln_f.gamma");
    auto lnfb = fetch_vec(m, "text.ln_f.beta");
    auto pooled = ln(x[static_cast<size_t>(T - 1)], lnfg, lnfb);
    auto proj = affine(fetch(m, "text.proj", m.cfg.embed_dim, d), nullptr, pooled);
    double norm = 0.0;
    for (double e : proj) norm += e * e;
    norm = std::sqrt(norm);
    for (double& e : proj) e /= norm;
    return proj;
}

double sim(const Model& m, const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return std::exp(m.tensor("logit_scale").data[0]) * dot;
}

}  // namespace oracle

namespace {

// small vocabulary model with deterministic hand-set weights (both LoRA
// matrices nonzero so the adapter path is exercised)
Model hand_weight_model() {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 2;
    c.max_seq_len = 8;
    c.embed_dim = 4;
    c.lora_rank = 2;
    c.lora_scale = 2.0;
    c.temperature_init = 3.0;
    c.vocab_size = 12;
    c.image_feature_dim = 5;
    c.seed = 1;
    Model m(c);
    uint64_t salt = 0;
    for (auto& p : m.params()) {
        if (p.name == "logit_scale") continue;
        salt++;
        for (size_t i = 0; i < p.size(); ++i) {
            // fixed hash-derived fill: deterministic, no affine structure
            // between rows (layernorm would cancel a constant row offset)
            double u = static_cast<double>(splitmix64(i + salt * 1000003) >> 11) * 0x1.0p-53;
            p.data[i] = 0.4 * (u - 0.5);
        }
    }
    return m;
}

Model probe_model(const Tokenizer& tok, int feature_dim, uint64_t seed = 77) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 3;
    c.max_seq_len = 16;
    c.embed_dim = 8;
    c.lora_rank = 2;
    c.temperature_init = 8.0;
    c.seed = seed;
    c.vocab_size = tok.vocab_size();
    c.image_feature_dim = feature_dim;
    return Model(c);
}

}  // namespace

TEST_CASE("probe pairs follow the polarity templates") {
    auto ont = default_ontology();
    Tokenizer tok(ont, 16);
    auto layout = FeatureLayout::from_ontology(ont);

    StructuredFact present;
    present.condition = "edema";
    present.existence = Existence::present;
    present.severity = "severe";
    StructuredFact absent;
    absent.condition = "edema";
    absent.existence = Existence::absent;
    StructuredFact uncertain = present;
    uncertain.certainty = Certainty::uncertain;

    Rng rng(0);
    std::vector<ProbeSource> sources = {{present, render_image({present}, ont, layout, rng, 0.0)},
                                        {absent, render_image({}, ont, layout, rng, 0.0)},
                                        {uncertain, render_image({}, ont, layout, rng, 0.0)}};
    auto probes = build_probe_set(sources, ont, tok);
    REQUIRE(probes.size() == 2);  // the uncertain fact is excluded
    CHECK(probes[0].correct_text == "there is severe pulmonary edema");
    CHECK(probes[0].foil_text == "there is no pulmonary edema");
    CHECK(probes[1].correct_text == "there is no pulmonary edema");
    CHECK(probes[1].foil_text == "there is severe pulmonary edema");
    for (const auto& p : probes) {
        CHECK(p.correct_tokens.length() == p.foil_tokens.length());
        REQUIRE(p.negator_positions.size() == 1);
        CHECK(p.negator_positions[0] == 3);  // BOS there is [severe|no]
    }
}

TEST_CASE("support devices never enter the probe set") {
    auto ont = default_ontology();
    auto layout = FeatureLayout::from_ontology(ont);
    auto sources = synthesize_probe_sources(ont, layout);
    for (const auto& s : sources) CHECK(s.fact.condition != "support_devices");
    CHECK(sources.size() >= 40);
}

TEST_CASE("trace invariants: saturation, self-patch zeros, forward count, read-only") {
    auto ont = default_ontology();
    Tokenizer tok(ont, 16);
    auto layout = FeatureLayout::from_ontology(ont);
    Model m = probe_model(tok, layout.dim);
    auto probes = build_probe_set(synthesize_probe_sources(ont, layout), ont, tok);
    REQUIRE(probes.size() >= 20);

    uint64_t hash_before = m.backbone_hash();
    int checked = 0;
    for (const auto& pair : probes) {
        auto res = trace_pair(m, pair, 1e-3);
        if (!res.valid) continue;
        checked++;
        const int L = m.cfg.n_layers;
        const int T = pair.correct_tokens.length();
        CHECK(res.patched_forwards == L * T);
        // final layer at EOS carries the whole signal
        CHECK(std::abs(res.cte[static_cast<size_t>(L)][static_cast<size_t>(T - 1)] - 1.0) < 1e-9);
        // wherever foil and correct states agree bit-exactly the CTE vanishes
        auto corr = encode_text(m, pair.correct_tokens, {}, true);
        auto foil = encode_text(m, pair.foil_tokens, {}, true);
        for (int l = 0; l <= L; ++l) {
            for (int p = 0; p < T; ++p) {
                bool same = true;
                for (int i = 0; i < m.cfg.d_model; ++i) {
                    if (corr.trace->at(l, p)[i] != foil.trace->at(l, p)[i]) same = false;
                }
                if (same) CHECK(std::abs(res.cte[static_cast<size_t>(l)][static_cast<size_t>(p)]) < 1e-9);
            }
        }
        // embedding-level row: zero except at the polarity token
        for (int p = 0; p < T; ++p) {
            double want = p == pair.negator_positions[0] ? 1.0 : 0.0;
            CHECK(res.cte[0][static_cast<size_t>(p)] == want);
        }
    }
    CHECK(checked >= 10);
    CHECK(m.backbone_hash() == hash_before);
}

TEST_CASE("degenerate pair (identical captions) is filtered, not an error") {
    auto ont = default_ontology();
    Tokenizer tok(ont, 16);
    auto layout = FeatureLayout::from_ontology(ont);
    Model m = probe_model(tok, layout.dim);

    ProbePair p;
    Rng rng(0);
    p.image_features = render_image({}, ont, layout, rng, 0.0);
    p.correct_tokens = tok.tokenize("there is no pneumonia");
    p.foil_tokens = p.correct_tokens;
    p.negator_positions = {3};
    auto res = trace_pair(m, p, 1e-3);
    CHECK_FALSE(res.valid);
    CHECK(res.d == 0.0);
    CHECK(res.cte.empty());
    CHECK(res.patched_forwards == 0);
}

TEST_CASE("trace matches the independent patched-forward oracle exactly") {
    Model m = hand_weight_model();

    // hand-built 4-token pair differing at position 2
    ProbePair pair;
    pair.correct_tokens.ids = {0, 5, 7, 1};
    pair.foil_tokens.ids = {0, 5, 8, 1};
    pair.negator_positions = {2};
    pair.image_features = {0.3, -0.2, 0.5, 0.0, 0.1};

    auto res = trace_pair(m, pair, 1e-6);
    REQUIRE(res.valid);

    auto img = encode_image(m, pair.image_features);
    std::vector<double> none;
    auto corr_emb = oracle::text_embed(m, pair.correct_tokens, -1, -1, none);
    auto foil_emb = oracle::text_embed(m, pair.foil_tokens, -1, -1, none);
    const double s_corr = oracle::sim(m, img, corr_emb);
    const double s_foil = oracle::sim(m, img, foil_emb);
    REQUIRE(res.s_corr == s_corr);
    REQUIRE(res.s_foil == s_foil);

    const int L = m.cfg.n_layers, T = 4, d = m.cfg.d_model;
    // oracle recomputes every patched score from the foil's recorded states
    auto foil_trace = encode_text(m, pair.foil_tokens, {}, true);
    for (int l = 1; l <= L; ++l) {
        for (int p = 0; p < T; ++p) {
            std::vector<double> repl(foil_trace.trace->at(l, p), foil_trace.trace->at(l, p) + d);
            auto emb = oracle::text_embed(m, pair.correct_tokens, l, p, repl);
            double s_lp = oracle::sim(m, img, emb);
            double cte = (s_corr - s_lp) / (s_corr - s_foil);
            INFO("layer " << l << " pos " << p);
            REQUIRE(res.cte[static_cast<size_t>(l)][static_cast<size_t>(p)] == cte);
        }
    }
}

TEST_CASE("aggregation: means over negator positions, skips invalid, order-free") {
    TraceResult a;
    a.valid = true;
    a.cte = {{0, 0}, {0.7, 0.1}, {0.2, 0.4}};
    a.negator_positions = {0};
    TraceResult b;
    b.valid = true;
    b.cte = {{0, 0}, {0.1, 0.3}, {0.8, 0.6}};
    b.negator_positions = {1};
    TraceResult bad;
    bad.valid = false;

    auto agg = aggregate_cte({a, b, bad});
    CHECK(agg.num_valid == 2);
    CHECK(agg.num_skipped == 1);
    REQUIRE(agg.cte_layer.size() == 2);
    CHECK(agg.cte_layer[0] == Catch::Approx(0.5).epsilon(1e-12));  // (0.7 + 0.3)/2
    CHECK(agg.cte_layer[1] == Catch::Approx(0.4).epsilon(1e-12));  // (0.2 + 0.6)/2

    auto agg2 = aggregate_cte({bad, b, a});
    CHECK(agg2.cte_layer == agg.cte_layer);

    CHECK_THROWS_AS(aggregate_cte({bad}), DataError);
}

TEST_CASE("single sample, one negator position: layer CTE equals that entry") {
    TraceResult r;
    r.valid = true;
    r.cte = {{0.0}, {0.7}};
    r.negator_positions = {0};
    auto agg = aggregate_cte({r});
    CHECK(agg.cte_layer == std::vector<double>{0.7});
}

TEST_CASE("min-max normalization: formula, fallback, affine invariance") {
    auto w = normalize_weights({0.2, 0.8, 0.5});
    REQUIRE(w.alpha.size() == 3);
    CHECK(w.alpha[0] == 0.0);
    CHECK(w.alpha[1] == 1.0);
    CHECK(w.alpha[2] == Catch::Approx(0.5).margin(1e-12));

    auto flat = normalize_weights({0.3, 0.3, 0.3});
    CHECK(flat.alpha == std::vector<double>{1.0, 1.0, 1.0});

    CHECK_THROWS_AS(normalize_weights({0.1}), ContractError);
    CHECK_THROWS_AS(normalize_weights({0.1, std::nan("")}), NumericError);

    Rng rng(17);
    for (int iter = 0; iter < 200; ++iter) {
        const int n = 2 + static_cast<int>(rng.below(6));
        std::vector<double> cte(static_cast<size_t>(n));
        for (double& x : cte) x = rng.gaussian();
        double a = 0.1 + 3.0 * rng.uniform();
        double b = rng.gaussian();
        std::vector<double> shifted(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) shifted[static_cast<size_t>(i)] = a * cte[static_cast<size_t>(i)] + b;
        auto base = normalize_weights(cte);
        auto moved = normalize_weights(shifted);
        int argmax_base = 0, argmax_cte = 0;
        for (int i = 0; i < n; ++i) {
            if (base.alpha[static_cast<size_t>(i)] > base.alpha[static_cast<size_t>(argmax_base)]) argmax_base = i;
            if (cte[static_cast<size_t>(i)] > cte[static_cast<size_t>(argmax_cte)]) argmax_cte = i;
        }
        CHECK(argmax_base == argmax_cte);
        for (int i = 0; i < n; ++i)
            CHECK(moved.alpha[static_cast<size_t>(i)] == Catch::Approx(base.alpha[static_cast<size_t>(i)]).margin(1e-9));
    }
}

TEST_CASE("attention report: uniform attention gives zero selectivity") {
    auto ont = default_ontology();
    Tokenizer tok(ont, 16);
    auto layout = FeatureLayout::from_ontology(ont);
    Model m = probe_model(tok, layout.dim);
    // zero queries make every attention row uniform
    for (auto& bp : m.blocks) {
        std::fill(m.tensor(bp.q_w).data.begin(), m.tensor(bp.q_w).data.end(), 0.0);
        std::fill(m.tensor(bp.q_b).data.begin(), m.tensor(bp.q_b).data.end(), 0.0);
        std::fill(m.tensor(bp.q_lora_down).data.begin(), m.tensor(bp.q_lora_down).data.end(), 0.0);
    }
    auto probes = build_probe_set(synthesize_probe_sources(ont, layout), ont, tok);
    auto rep = negator_attention_report(m, probes, tok);
    for (double v : rep.head_selectivity) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("attention report matches a direct readout of the attention tensors") {
    auto ont = default_ontology();
    Tokenizer tok(ont, 16);
    auto layout = FeatureLayout::from_ontology(ont);
    Model m = probe_model(tok, layout.dim, 123);
    auto all = build_probe_set(synthesize_probe_sources(ont, layout), ont, tok);
    std::vector<ProbePair> probes(all.begin(), all.begin() + 5);

    auto rep = negator_attention_report(m, probes, tok);

    // independent recomputation straight from recorded attention weights
    const int L = m.cfg.n_layers, H = m.cfg.n_heads;
    std::vector<double> expected(static_cast<size_t>(L) * H, 0.0);
    double denom = 0.0;
    for (const auto& pair : probes) {
        std::vector<std::string> words;
        for (int id : pair.correct_tokens.ids) words.push_back(tok.word(id));
        const TokenSequence& seq =
            contains_negation_cue(words) ? pair.correct_tokens : pair.foil_tokens;
        TextActs acts;
        text_forward(m, seq, {}, acts);
        const int T = acts.T;
        for (int neg : pair.negator_positions) {
            denom += 1.0;
            int control = neg + 1 < T ? neg + 1 : neg - 1;
            for (int l = 0; l < L; ++l) {
                for (int h = 0; h < H; ++h) {
                    double dneg = 0.0, dctl = 0.0;
                    for (int i = 0; i < T; ++i) {
                        dneg += acts.blocks[static_cast<size_t>(l)].att[(static_cast<size_t>(h) * T + i) * T + neg];
                        dctl += acts.blocks[static_cast<size_t>(l)].att[(static_cast<size_t>(h) * T + i) * T + control];
                    }
                    expected[static_cast<size_t>(l) * H + h] += (dneg - dctl) / T;
                }
            }
        }
    }
    for (double& v : expected) v /= denom;
    for (size_t i = 0; i < expected.size(); ++i) CHECK(rep.head_selectivity[i] == expected[i]);

    // a single-probe report equals that probe's own values
    std::vector<ProbePair> one = {probes[0]};
    auto rep1 = negator_attention_report(m, one, tok);
    CHECK(rep1.head_selectivity.size() == static_cast<size_t>(L * H));
}

TEST_CASE("layer weight artifacts round-trip through JSON") {
    LayerWeights w;
    w.cte_layer = {0.4, 0.9, 0.1};
    w.alpha = {0.375, 1.0, 0.0};
    auto j = layer_weights_json(w, 50, 3);
    CHECK(j["layers"] == 3);
    CHECK(j["num_pairs"] == 50);
    CHECK(j["num_filtered"] == 3);
    auto back = layer_weights_from_json(j);
    CHECK(back.alpha == w.alpha);
    CHECK(back.cte_layer == w.cte_layer);
}

TEST_CASE("heatmap SVG has a grid and a legend") {
    TraceResult r;
    r.valid = true;
    r.cte = {{0.0, 0.0}, {0.5, 1.0}};
    r.negator_positions = {1};
    auto svg = cte_heatmap_svg({r});
    CHECK(svg.find("<svg") != std::string::npos);
    // 2x2 grid plus legend swatches
    size_t rects = 0, from = 0;
    while ((from = svg.find("<rect", from)) != std::string::npos) {
        rects++;
        from++;
    }
    CHECK(rects >= 4 + 21);
}
