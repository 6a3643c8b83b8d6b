#pragma once

// Fine-tuning loop: combined contrastive + claim-ranking objective, per-layer
// gradient scaling by alpha^beta on the text-side adapters, AdamW updates, and
// a per-layer ledger of applied update magnitudes.

#include <map>
#include <string>
#include <vector>

#include "nast/common.hpp"
#include "nast/corpus.hpp"
#include "nast/encoder.hpp"
#include "nast/losses.hpp"
#include "nast/model.hpp"
#include "nast/tokenizer.hpp"

namespace nast {

struct TrainConfig {
    double learning_rate = 1e-3;
    double beta = 2.0;         // sharpness exponent on alpha
    double lambda_mix = 0.5;   // weight of the contrastive term
    int batch_size = 16;       // caption batch N
    int claim_batch_size = 4;  // claim batch M
    int steps = 300;
    double weight_decay = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 1;
    bool sample_with_replacement = true;

    void validate() const {
        require(beta >= 0.0, "beta must be nonnegative");
        require(lambda_mix >= 0.0 && lambda_mix <= 1.0, "lambda must lie in [0,1]");
        require(steps >= 1, "steps must be at least 1");
        require(batch_size >= 2, "caption batch needs at least 2 items");
        require(claim_batch_size >= 1, "claim batch needs at least 1 set");
        require(learning_rate > 0.0, "learning rate must be positive");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"learning_rate", learning_rate},
                              {"beta", beta},
                              {"lambda_mix", lambda_mix},
                              {"batch_size", batch_size},
                              {"claim_batch_size", claim_batch_size},
                              {"steps", steps},
                              {"weight_decay", weight_decay},
                              {"adam_beta1", adam_beta1},
                              {"adam_beta2", adam_beta2},
                              {"adam_eps", adam_eps},
                              {"seed", seed},
                              {"sample_with_replacement", sample_with_replacement}};
    }
};

struct CaptionBatch {
    struct Item {
        std::vector<double> features;
        TokenSequence tokens;
        std::string text;
    };
    std::vector<Item> items;

    void validate() const {
        require(items.size() >= 2, "caption batch needs at least 2 items");
        for (size_t i = 0; i < items.size(); ++i) {
            for (size_t j = i + 1; j < items.size(); ++j) {
                require(items[i].text != items[j].text, "caption batch has duplicate captions");
            }
        }
    }
};

struct ClaimBatch {
    struct Item {
        std::vector<double> features;
        std::vector<TokenSequence> claims;
        int correct = -1;
    };
    std::vector<Item> items;

    void validate() const {
        require(!items.empty(), "claim batch is empty");
        for (const auto& it : items) {
            require(it.claims.size() >= 2, "claim set needs at least 2 options");
            require(it.correct >= 0 && it.correct < static_cast<int>(it.claims.size()),
                    "correct claim index out of range");
        }
    }
};

// ----------------------------- forward/backward -----------------------------

struct LossBreakdown {
    double total = 0.0;
    double clip = 0.0;
    double claim = 0.0;
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

// One combined forward over both batches; when do_backward is set, gradients
// for every trainable tensor are accumulated into the model. Either batch may
// be null when its loss weight is zero.
inline LossBreakdown forward_backward(Model& m, const CaptionBatch* captions,
                                      const ClaimBatch* claims, double lambda_mix,
                                      bool do_backward = true) {
    require(lambda_mix >= 0.0 && lambda_mix <= 1.0, "lambda must lie in [0,1]");
    require(lambda_mix == 0.0 || captions != nullptr, "caption batch required when lambda > 0");
    require(lambda_mix == 1.0 || claims != nullptr, "claim batch required when lambda < 1");

    const double tau = m.temperature();
    LossBreakdown out;
    double d_logit_scale = 0.0;

    // --- contrastive term
    std::vector<ImageActs> cap_img;
    std::vector<TextActs> cap_txt;
    std::vector<double> cap_dimg, cap_dtxt;  // N x embed_dim gradients
    int n = 0;
    if (lambda_mix > 0.0) {
        captions->validate();
        n = static_cast<int>(captions->items.size());
        cap_img.resize(static_cast<size_t>(n));
        cap_txt.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            image_forward(m, captions->items[static_cast<size_t>(i)].features, cap_img[static_cast<size_t>(i)]);
            text_forward(m, captions->items[static_cast<size_t>(i)].tokens, {}, cap_txt[static_cast<size_t>(i)]);
        }
        std::vector<double> scores(static_cast<size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                scores[static_cast<size_t>(i) * n + j] =
                    tau * detail::dot(cap_img[static_cast<size_t>(i)].embedding, cap_txt[static_cast<size_t>(j)].embedding);
            }
        }
        auto cl = clip_loss_from_scores(scores, n);
        out.clip = cl.loss;
        if (do_backward) {
            const int e = m.cfg.embed_dim;
            cap_dimg.assign(static_cast<size_t>(n) * e, 0.0);
            cap_dtxt.assign(static_cast<size_t>(n) * e, 0.0);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    const double ds = lambda_mix * cl.d_scores[static_cast<size_t>(i) * n + j];
                    if (ds == 0.0) continue;
                    d_logit_scale += ds * scores[static_cast<size_t>(i) * n + j];
                    const auto& ie = cap_img[static_cast<size_t>(i)].embedding;
                    const auto& te = cap_txt[static_cast<size_t>(j)].embedding;
                    double* dim = cap_dimg.data() + static_cast<size_t>(i) * e;
                    double* dtx = cap_dtxt.data() + static_cast<size_t>(j) * e;
                    for (int c = 0; c < e; ++c) {
                        dim[c] += ds * tau * te[static_cast<size_t>(c)];
                        dtx[c] += ds * tau * ie[static_cast<size_t>(c)];
                    }
                }
            }
        }
    }

    // --- claim-ranking term
    std::vector<ImageActs> clm_img;
    std::vector<std::vector<TextActs>> clm_txt;
    std::vector<std::vector<double>> clm_dlogits;
    int mcount = 0;
    if (lambda_mix < 1.0) {
        claims->validate();
        mcount = static_cast<int>(claims->items.size());
        clm_img.resize(static_cast<size_t>(mcount));
        clm_txt.resize(static_cast<size_t>(mcount));
        clm_dlogits.resize(static_cast<size_t>(mcount));
        double acc = 0.0;
        for (int i = 0; i < mcount; ++i) {
            const auto& item = claims->items[static_cast<size_t>(i)];
            image_forward(m, item.features, clm_img[static_cast<size_t>(i)]);
            const int k = static_cast<int>(item.claims.size());
            clm_txt[static_cast<size_t>(i)].resize(static_cast<size_t>(k));
            std::vector<double> logits(static_cast<size_t>(k), 0.0);
            for (int j = 0; j < k; ++j) {
                text_forward(m, item.claims[static_cast<size_t>(j)], {}, clm_txt[static_cast<size_t>(i)][static_cast<size_t>(j)]);
                logits[static_cast<size_t>(j)] =
                    tau * detail::dot(clm_img[static_cast<size_t>(i)].embedding,
                                      clm_txt[static_cast<size_t>(i)][static_cast<size_t>(j)].embedding);
            }
            auto sl = claim_loss_from_logits(logits, item.correct);
            acc += sl.loss;
            if (do_backward) {
                auto& dl = clm_dlogits[static_cast<size_t>(i)];
                dl.assign(static_cast<size_t>(k), 0.0);
                const double w = (1.0 - lambda_mix) / mcount;
                for (int j = 0; j < k; ++j) {
                    dl[static_cast<size_t>(j)] = w * sl.d_logits[static_cast<size_t>(j)];
                    d_logit_scale += dl[static_cast<size_t>(j)] * logits[static_cast<size_t>(j)];
                }
            }
        }
        out.claim = acc / mcount;
    }

    out.total = combined_loss(out.clip, out.claim, lambda_mix);
    if (!std::isfinite(out.total)) throw NumericError("non-finite training loss");
    if (!do_backward) return out;

    // --- push embedding gradients through the encoders
    const int e = m.cfg.embed_dim;
    std::vector<double> d_emb(static_cast<size_t>(e));
    for (int i = 0; i < n; ++i) {
        std::copy(cap_dimg.begin() + static_cast<size_t>(i) * e,
                  cap_dimg.begin() + static_cast<size_t>(i + 1) * e, d_emb.begin());
        image_backward(m, cap_img[static_cast<size_t>(i)], d_emb);
        std::copy(cap_dtxt.begin() + static_cast<size_t>(i) * e,
                  cap_dtxt.begin() + static_cast<size_t>(i + 1) * e, d_emb.begin());
        text_backward(m, cap_txt[static_cast<size_t>(i)], d_emb);
    }
    for (int i = 0; i < mcount; ++i) {
        const auto& item = claims->items[static_cast<size_t>(i)];
        const int k = static_cast<int>(item.claims.size());
        std::fill(d_emb.begin(), d_emb.end(), 0.0);
        for (int j = 0; j < k; ++j) {
            const double dl = clm_dlogits[static_cast<size_t>(i)][static_cast<size_t>(j)];
            const auto& te = clm_txt[static_cast<size_t>(i)][static_cast<size_t>(j)].embedding;
            for (int c = 0; c < e; ++c) d_emb[static_cast<size_t>(c)] += dl * tau * te[static_cast<size_t>(c)];
        }
        image_backward(m, clm_img[static_cast<size_t>(i)], d_emb);
        for (int j = 0; j < k; ++j) {
            const double dl = clm_dlogits[static_cast<size_t>(i)][static_cast<size_t>(j)];
            const auto& ie = clm_img[static_cast<size_t>(i)].embedding;
            for (int c = 0; c < e; ++c) d_emb[static_cast<size_t>(c)] = dl * tau * ie[static_cast<size_t>(c)];
            text_backward(m, clm_txt[static_cast<size_t>(i)][static_cast<size_t>(j)], d_emb);
        }
    }
    m.tensor(m.logit_scale).grad[0] += d_logit_scale;

    for (const auto& p : m.params()) {
        if (p.trainable && !all_finite(p.grad))
            throw NumericError("non-finite gradient in " + p.name);
    }
    return out;
}

// ----------------------------- gradient scaling -----------------------------

// Multiplies every text-block adapter gradient by alpha_l^beta; projection
// heads, the image adapter, and the temperature stay unscaled. Returns the
// applied factor per tensor so callers can log the full mapping.
inline std::map<std::string, double> scale_gradients(Model& m, const std::vector<double>& alpha,
                                                     double beta) {
    require(beta >= 0.0, "beta must be nonnegative");
    require(static_cast<int>(alpha.size()) == m.cfg.n_layers,
            "alpha must have one entry per text layer");
    std::map<std::string, double> applied;
    for (auto& p : m.params()) {
        if (!p.trainable) continue;
        double factor = 1.0;
        if (p.text_layer >= 1) {
            require(p.text_layer <= m.cfg.n_layers, "gradient maps to no known layer");
            // std::pow(0,0) == 1, which is exactly the beta=0 uniform reduction
            factor = std::pow(alpha[static_cast<size_t>(p.text_layer - 1)], beta);
        }
        if (factor != 1.0) {
            for (double& g : p.grad) g *= factor;
        }
        applied[p.name] = factor;
    }
    return applied;
}

// ----------------------------- optimizer -----------------------------

// AdamW with bias correction and decoupled weight decay.
class AdamW {
public:
    AdamW(const Model& m, double lr, double beta1, double beta2, double eps, double weight_decay)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
        for (const auto& p : m.params()) {
            m_.emplace_back(p.trainable ? p.size() : 0, 0.0);
            v_.emplace_back(p.trainable ? p.size() : 0, 0.0);
        }
    }

    void step(Model& m) {
        t_ += 1;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t pi = 0; pi < m.params().size(); ++pi) {
            auto& p = m.params()[pi];
            if (!p.trainable) continue;
            auto& mm = m_[pi];
            auto& vv = v_[pi];
            for (size_t i = 0; i < p.size(); ++i) {
                const double g = p.grad[i];
                mm[i] = beta1_ * mm[i] + (1.0 - beta1_) * g;
                vv[i] = beta2_ * vv[i] + (1.0 - beta2_) * g * g;
                const double mhat = mm[i] / bc1;
                const double vhat = vv[i] / bc2;
                double upd = lr_ * mhat / (std::sqrt(vhat) + eps_);
                if (wd_ != 0.0) upd += lr_ * wd_ * p.data[i];
                if (!std::isfinite(upd)) throw NumericError("non-finite update in " + p.name);
                p.data[i] -= upd;
            }
        }
    }

    int steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_, wd_;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ----------------------------- update-norm ledger -----------------------------

struct UpdateNormLog {
    int n_layers = 0;
    std::vector<double> layer_norms;  // cumulative, index l-1 for text layer l
    double other_norm = 0.0;

    std::string to_csv() const {
        std::string s = "layer,update_norm\n";
        char buf[64];
        for (int l = 0; l < n_layers; ++l) {
            std::snprintf(buf, sizeof(buf), "%d,%.17g\n", l + 1, layer_norms[static_cast<size_t>(l)]);
            s += buf;
        }
        std::snprintf(buf, sizeof(buf), "other,%.17g\n", other_norm);
        s += buf;
        return s;
    }

    static UpdateNormLog from_csv(const std::string& text) {
        UpdateNormLog log;
        std::istringstream in(text);
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto comma = line.find(',');
            std::string key = line.substr(0, comma);
            double val = std::stod(line.substr(comma + 1));
            if (key == "other") {
                log.other_norm = val;
            } else {
                log.layer_norms.push_back(val);
            }
        }
        log.n_layers = static_cast<int>(log.layer_norms.size());
        return log;
    }
};

// Share (percent) of cumulative text-layer update magnitude landing in the
// top-k layers ranked by alpha. Ties resolve to the lower layer index.
inline double concentration_report(const UpdateNormLog& log, const std::vector<double>& alpha,
                                   int k) {
    require(k >= 1 && k <= log.n_layers, "top-k out of range");
    require(static_cast<int>(alpha.size()) == log.n_layers, "alpha size mismatch");
    double total = 0.0;
    for (double x : log.layer_norms) total += x;
    if (total <= 0.0) throw DataError("concentration undefined: all update norms are zero");

    std::vector<int> order(static_cast<size_t>(log.n_layers));
    for (int i = 0; i < log.n_layers; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (alpha[static_cast<size_t>(a)] != alpha[static_cast<size_t>(b)]) return alpha[static_cast<size_t>(a)] > alpha[static_cast<size_t>(b)];
        return a < b;
    });
    double top = 0.0;
    for (int i = 0; i < k; ++i) top += log.layer_norms[static_cast<size_t>(order[static_cast<size_t>(i)])];
    return 100.0 * top / total;
}

// ----------------------------- training loop -----------------------------

enum class GradScaling { uniform, cte_weighted };

struct TrainData {
    struct CaptionItem {
        const std::vector<double>* features;
        std::string text;
        TokenSequence tokens;
    };
    struct ClaimItem {
        const std::vector<double>* features;
        std::vector<TokenSequence> claims;
        int correct;
    };
    std::vector<CaptionItem> captions;  // negation-bearing single captions
    std::vector<ClaimItem> claim_sets;
};

// Contrastive supervision uses the explicitly negated single captions; the
// claim sets carry the counterfactual contrast supervision.
inline TrainData build_train_data(const Corpus& corpus, const Tokenizer& tok,
                                  const std::string& split) {
    TrainData data;
    for (const auto& s : corpus.studies) {
        if (s.split != split) continue;
        for (size_t ci = 0; ci < s.captions.size(); ++ci) {
            const auto& fact = s.facts[static_cast<size_t>(s.caption_fact[ci])];
            if (fact.existence != Existence::absent) continue;
            data.captions.push_back({&s.image_features, s.captions[ci], tok.tokenize(s.captions[ci])});
        }
        for (const auto& cs : s.claim_sets) {
            TrainData::ClaimItem item;
            item.features = &s.image_features;
            item.correct = cs.correct_index;
            for (const auto& c : cs.claims) item.claims.push_back(tok.tokenize(c));
            data.claim_sets.push_back(std::move(item));
        }
    }
    if (data.captions.empty()) throw DataError("no negated captions in split '" + split + "'");
    if (data.claim_sets.empty()) throw DataError("no claim sets in split '" + split + "'");
    return data;
}

struct StepRecord {
    int step;
    double loss_total, loss_clip, loss_claim;
};

struct TrainResult {
    std::vector<StepRecord> curve;
    UpdateNormLog update_log;
};

inline TrainResult train(Model& m, const TrainData& data, const std::vector<double>& alpha,
                         const TrainConfig& cfg, GradScaling scaling) {
    cfg.validate();
    if (scaling == GradScaling::cte_weighted)
        require(static_cast<int>(alpha.size()) == m.cfg.n_layers, "alpha size mismatch");

    Rng rng(derive_seed(cfg.seed, "train-batches"));
    AdamW opt(m, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
              cfg.weight_decay);

    TrainResult result;
    result.update_log.n_layers = m.cfg.n_layers;
    result.update_log.layer_norms.assign(static_cast<size_t>(m.cfg.n_layers), 0.0);

    // without-replacement mode consumes seeded permutations
    std::vector<size_t> cap_queue, clm_queue;
    size_t cap_next = 0, clm_next = 0;
    if (!cfg.sample_with_replacement) {
        cap_queue.resize(data.captions.size());
        for (size_t i = 0; i < cap_queue.size(); ++i) cap_queue[i] = i;
        rng.shuffle(cap_queue);
        clm_queue.resize(data.claim_sets.size());
        for (size_t i = 0; i < clm_queue.size(); ++i) clm_queue[i] = i;
        rng.shuffle(clm_queue);
    }

    auto draw_caption = [&]() -> size_t {
        if (cfg.sample_with_replacement) return rng.below(data.captions.size());
        if (cap_next >= cap_queue.size()) throw DataError("caption pool exhausted");
        return cap_queue[cap_next++];
    };
    auto draw_claim = [&]() -> size_t {
        if (cfg.sample_with_replacement) return rng.below(data.claim_sets.size());
        if (clm_next >= clm_queue.size()) throw DataError("claim pool exhausted");
        return clm_queue[clm_next++];
    };

    std::vector<double> before;
    for (int step = 0; step < cfg.steps; ++step) {
        CaptionBatch cap;
        if (cfg.lambda_mix > 0.0) {
            std::set<std::string> seen;
            int guard = 0;
            while (static_cast<int>(cap.items.size()) < cfg.batch_size) {
                const auto& item = data.captions[draw_caption()];
                if (seen.count(item.text)) {
                    if (++guard > 10000) throw DataError("cannot fill caption batch with distinct captions");
                    continue;
                }
                seen.insert(item.text);
                cap.items.push_back({*item.features, item.tokens, item.text});
            }
        }
        ClaimBatch clm;
        if (cfg.lambda_mix < 1.0) {
            for (int i = 0; i < cfg.claim_batch_size; ++i) {
                const auto& item = data.claim_sets[draw_claim()];
                clm.items.push_back({*item.features, item.claims, item.correct});
            }
        }

        m.zero_grad();
        auto loss = forward_backward(m, cfg.lambda_mix > 0.0 ? &cap : nullptr,
                                     cfg.lambda_mix < 1.0 ? &clm : nullptr, cfg.lambda_mix, true);
        if (scaling == GradScaling::cte_weighted) scale_gradients(m, alpha, cfg.beta);

        // snapshot trainables so the applied update can be measured
        size_t total_trainable = 0;
        for (const auto& p : m.params()) {
            if (p.trainable) total_trainable += p.size();
        }
        before.resize(total_trainable);
        size_t off = 0;
        for (const auto& p : m.params()) {
            if (!p.trainable) continue;
            std::copy(p.data.begin(), p.data.end(), before.begin() + static_cast<std::ptrdiff_t>(off));
            off += p.size();
        }

        opt.step(m);

        off = 0;
        std::vector<double> layer_sq(static_cast<size_t>(m.cfg.n_layers), 0.0);
        double other_sq = 0.0;
        for (const auto& p : m.params()) {
            if (!p.trainable) continue;
            double sq = 0.0;
            for (size_t i = 0; i < p.size(); ++i) {
                const double delta = p.data[i] - before[off + i];
                sq += delta * delta;
            }
            off += p.size();
            if (p.text_layer >= 1) {
                layer_sq[static_cast<size_t>(p.text_layer - 1)] += sq;
            } else {
                other_sq += sq;
            }
        }
        for (int l = 0; l < m.cfg.n_layers; ++l)
            result.update_log.layer_norms[static_cast<size_t>(l)] += std::sqrt(layer_sq[static_cast<size_t>(l)]);
        result.update_log.other_norm += std::sqrt(other_sq);

        result.curve.push_back({step, loss.total, loss.clip, loss.claim});
    }
    return result;
}

}  // namespace nast
