#pragma once

// Forward and reverse passes for both encoders. The text side is a
// bidirectional (mask-free) pre-LN transformer; "hidden state at layer l" is
// the residual stream after block l, with layer 0 the embedding output.
// Interventions overwrite state (l, p) before block l+1 consumes it; for l = L
// the patch lands immediately before pooling. Pooling reads the final-layer
// state at the EOS position only.

#include <optional>
#include <vector>

#include "nast/common.hpp"
#include "nast/model.hpp"
#include "nast/tokenizer.hpp"

namespace nast {

struct Intervention {
    int layer = 0;     // 1..L
    int position = 0;  // 0..length-1
    std::vector<double> replacement;  // d_model values
};

struct HiddenStateTrace {
    int layers = 0;  // L (states has L+1 rows)
    int length = 0;
    int d_model = 0;
    std::vector<std::vector<double>> states;  // states[l] is length x d_model

    const double* at(int layer, int pos) const {
        return states[static_cast<size_t>(layer)].data() +
               static_cast<size_t>(pos) * static_cast<size_t>(d_model);
    }
};

namespace detail {

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
    return cdf + x * pdf;
}

// out[j] = b[j] + sum_i W[j,i] x[i]; W row-major (dout x din)
inline void linear(const double* W, const double* b, const double* x, double* out, int dout,
                   int din) {
    for (int j = 0; j < dout; ++j) {
        double acc = b ? b[j] : 0.0;
        const double* row = W + static_cast<size_t>(j) * din;
        for (int i = 0; i < din; ++i) acc += row[i] * x[i];
        out[j] = acc;
    }
}

// dx[i] += sum_j W[j,i] dout[j]
inline void linear_backward_input(const double* W, const double* dout, double* dx, int dout_n,
                                  int din) {
    for (int j = 0; j < dout_n; ++j) {
        const double* row = W + static_cast<size_t>(j) * din;
        const double g = dout[j];
        for (int i = 0; i < din; ++i) dx[i] += row[i] * g;
    }
}

// dW[j,i] += dout[j] * x[i]
inline void linear_backward_weight(double* dW, const double* dout, const double* x, int dout_n,
                                   int din) {
    for (int j = 0; j < dout_n; ++j) {
        double* row = dW + static_cast<size_t>(j) * din;
        const double g = dout[j];
        for (int i = 0; i < din; ++i) row[i] += g * x[i];
    }
}

inline void layernorm(const double* x, const double* gamma, const double* beta, double* out,
                      double* mean_out, double* rstd_out, int d) {
    double m = 0.0;
    for (int i = 0; i < d; ++i) m += x[i];
    m /= d;
    double v = 0.0;
    for (int i = 0; i < d; ++i) {
        double c = x[i] - m;
        v += c * c;
    }
    v /= d;
    double rstd = 1.0 / std::sqrt(v + 1e-5);
    for (int i = 0; i < d; ++i) out[i] = (x[i] - m) * rstd * gamma[i] + beta[i];
    *mean_out = m;
    *rstd_out = rstd;
}

inline void layernorm_backward(const double* x, const double* gamma, double mean, double rstd,
                               const double* dy, double* dx, int d) {
    double mean_dyh = 0.0, mean_dyh_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
        double dyh = dy[i] * gamma[i];
        double xhat = (x[i] - mean) * rstd;
        mean_dyh += dyh;
        mean_dyh_xhat += dyh * xhat;
    }
    mean_dyh /= d;
    mean_dyh_xhat /= d;
    for (int i = 0; i < d; ++i) {
        double dyh = dy[i] * gamma[i];
        double xhat = (x[i] - mean) * rstd;
        dx[i] += rstd * (dyh - mean_dyh - xhat * mean_dyh_xhat);
    }
}

}  // namespace detail

// ----------------------------- activations -----------------------------

struct BlockActs {
    std::vector<double> x_in;                 // T x d
    std::vector<double> ln1_out;              // T x d
    std::vector<double> ln1_mean, ln1_rstd;   // T
    std::vector<double> q, k, v;              // T x d
    std::vector<double> q_down, v_down;       // T x r (LoRA bottleneck outputs)
    std::vector<double> att;                  // H x T x T (softmax rows)
    std::vector<double> att_out;              // T x d
    std::vector<double> x_mid;                // T x d
    std::vector<double> ln2_out;              // T x d
    std::vector<double> ln2_mean, ln2_rstd;   // T
    std::vector<double> fc1_out;              // T x F (pre-activation)
    std::vector<double> act_out;              // T x F
    std::vector<double> x_out;                // T x d, post-intervention
};

struct TextActs {
    TokenSequence tokens;
    int T = 0;
    bool intervened = false;
    std::vector<double> emb;  // layer-0 state, T x d
    std::vector<BlockActs> blocks;
    std::vector<double> lnf_out;  // d (EOS position)
    double lnf_mean = 0, lnf_rstd = 0;
    std::vector<double> proj_out;  // embed_dim, pre-normalization
    double norm = 0;
    std::vector<double> embedding;  // unit vector

    const std::vector<double>& state(int layer) const {
        return layer == 0 ? emb : blocks[static_cast<size_t>(layer - 1)].x_out;
    }
};

struct ImageActs {
    std::vector<double> features;
    std::vector<double> down_out;  // r (pre-activation)
    std::vector<double> act_out;   // r
    std::vector<double> hidden;    // din: features + scaled adapter output
    std::vector<double> proj_out;  // embed_dim
    double norm = 0;
    std::vector<double> embedding;
};

// ----------------------------- text forward -----------------------------

inline void text_forward(const Model& m, const TokenSequence& tokens,
                         const std::vector<Intervention>& interventions, TextActs& acts) {
    const int d = m.cfg.d_model, H = m.cfg.n_heads, hd = m.cfg.head_dim();
    const int F = m.cfg.d_ff(), r = m.cfg.lora_rank, L = m.cfg.n_layers;
    const int T = tokens.length();
    const double sc = m.cfg.adapter_scale();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    require(T >= 2 && T <= m.cfg.max_seq_len, "token sequence length out of range");
    for (int id : tokens.ids) require(id >= 0 && id < m.cfg.vocab_size, "token id out of range");
    for (const auto& iv : interventions) {
        require(iv.layer >= 1 && iv.layer <= L, "intervention layer out of range");
        require(iv.position >= 0 && iv.position < T, "intervention position out of range");
        require(static_cast<int>(iv.replacement.size()) == d, "intervention replacement size");
    }

    acts.tokens = tokens;
    acts.T = T;
    acts.intervened = !interventions.empty();
    acts.blocks.assign(static_cast<size_t>(L), BlockActs{});

    const auto& tok = m.tensor(m.tok_embed).data;
    const auto& pos = m.tensor(m.pos_embed).data;
    acts.emb.assign(static_cast<size_t>(T) * d, 0.0);
    for (int p = 0; p < T; ++p) {
        const double* te = tok.data() + static_cast<size_t>(tokens.ids[static_cast<size_t>(p)]) * d;
        const double* pe = pos.data() + static_cast<size_t>(p) * d;
        double* out = acts.emb.data() + static_cast<size_t>(p) * d;
        for (int i = 0; i < d; ++i) out[i] = te[i] + pe[i];
    }

    const std::vector<double>* x = &acts.emb;
    for (int l = 0; l < L; ++l) {
        const auto& bp = m.blocks[static_cast<size_t>(l)];
        BlockActs& B = acts.blocks[static_cast<size_t>(l)];
        B.x_in = *x;
        B.ln1_out.assign(static_cast<size_t>(T) * d, 0.0);
        B.ln1_mean.assign(static_cast<size_t>(T), 0.0);
        B.ln1_rstd.assign(static_cast<size_t>(T), 0.0);
        B.q.assign(static_cast<size_t>(T) * d, 0.0);
        B.k.assign(static_cast<size_t>(T) * d, 0.0);
        B.v.assign(static_cast<size_t>(T) * d, 0.0);
        B.q_down.assign(static_cast<size_t>(T) * r, 0.0);
        B.v_down.assign(static_cast<size_t>(T) * r, 0.0);

        const auto& ln1g = m.tensor(bp.ln1_g).data;
        const auto& ln1b = m.tensor(bp.ln1_b).data;
        const auto& qw = m.tensor(bp.q_w).data;
        const auto& qb = m.tensor(bp.q_b).data;
        const auto& kw = m.tensor(bp.k_w).data;
        const auto& kb = m.tensor(bp.k_b).data;
        const auto& vw = m.tensor(bp.v_w).data;
        const auto& vb = m.tensor(bp.v_b).data;
        const auto& q_ld = m.tensor(bp.q_lora_down).data;
        const auto& q_lu = m.tensor(bp.q_lora_up).data;
        const auto& v_ld = m.tensor(bp.v_lora_down).data;
        const auto& v_lu = m.tensor(bp.v_lora_up).data;

        for (int p = 0; p < T; ++p) {
            const double* xin = B.x_in.data() + static_cast<size_t>(p) * d;
            double* h = B.ln1_out.data() + static_cast<size_t>(p) * d;
            detail::layernorm(xin, ln1g.data(), ln1b.data(), h, &B.ln1_mean[static_cast<size_t>(p)],
                              &B.ln1_rstd[static_cast<size_t>(p)], d);
            double* qp = B.q.data() + static_cast<size_t>(p) * d;
            double* kp = B.k.data() + static_cast<size_t>(p) * d;
            double* vp = B.v.data() + static_cast<size_t>(p) * d;
            double* qd = B.q_down.data() + static_cast<size_t>(p) * r;
            double* vd = B.v_down.data() + static_cast<size_t>(p) * r;
            detail::linear(qw.data(), qb.data(), h, qp, d, d);
            detail::linear(kw.data(), kb.data(), h, kp, d, d);
            detail::linear(vw.data(), vb.data(), h, vp, d, d);
            detail::linear(q_ld.data(), nullptr, h, qd, r, d);
            detail::linear(v_ld.data(), nullptr, h, vd, r, d);
            for (int j = 0; j < d; ++j) {
                double accq = 0.0, accv = 0.0;
                const double* qrow = q_lu.data() + static_cast<size_t>(j) * r;
                const double* vrow = v_lu.data() + static_cast<size_t>(j) * r;
                for (int i = 0; i < r; ++i) {
                    accq += qrow[i] * qd[i];
                    accv += vrow[i] * vd[i];
                }
                qp[j] += sc * accq;
                vp[j] += sc * accv;
            }
        }

        B.att.assign(static_cast<size_t>(H) * T * T, 0.0);
        B.att_out.assign(static_cast<size_t>(T) * d, 0.0);
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < T; ++i) {
                double* row = B.att.data() + (static_cast<size_t>(h) * T + i) * T;
                double maxv = -1e300;
                for (int j = 0; j < T; ++j) {
                    const double* qi = B.q.data() + static_cast<size_t>(i) * d + h * hd;
                    const double* kj = B.k.data() + static_cast<size_t>(j) * d + h * hd;
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    row[j] = s;
                    if (s > maxv) maxv = s;
                }
                double sum = 0.0;
                for (int j = 0; j < T; ++j) {
                    row[j] = std::exp(row[j] - maxv);
                    sum += row[j];
                }
                for (int j = 0; j < T; ++j) row[j] /= sum;
                double* out = B.att_out.data() + static_cast<size_t>(i) * d + h * hd;
                for (int j = 0; j < T; ++j) {
                    const double* vj = B.v.data() + static_cast<size_t>(j) * d + h * hd;
                    const double a = row[j];
                    for (int c = 0; c < hd; ++c) out[c] += a * vj[c];
                }
            }
        }

        const auto& ow = m.tensor(bp.o_w).data;
        const auto& ob = m.tensor(bp.o_b).data;
        const auto& ln2g = m.tensor(bp.ln2_g).data;
        const auto& ln2b = m.tensor(bp.ln2_b).data;
        const auto& w1 = m.tensor(bp.fc1_w).data;
        const auto& b1 = m.tensor(bp.fc1_b).data;
        const auto& w2 = m.tensor(bp.fc2_w).data;
        const auto& b2 = m.tensor(bp.fc2_b).data;

        B.x_mid.assign(static_cast<size_t>(T) * d, 0.0);
        B.ln2_out.assign(static_cast<size_t>(T) * d, 0.0);
        B.ln2_mean.assign(static_cast<size_t>(T), 0.0);
        B.ln2_rstd.assign(static_cast<size_t>(T), 0.0);
        B.fc1_out.assign(static_cast<size_t>(T) * F, 0.0);
        B.act_out.assign(static_cast<size_t>(T) * F, 0.0);
        B.x_out.assign(static_cast<size_t>(T) * d, 0.0);

        std::vector<double> tmp(static_cast<size_t>(d), 0.0);
        std::vector<double> tmp2(static_cast<size_t>(d), 0.0);
        for (int p = 0; p < T; ++p) {
            detail::linear(ow.data(), ob.data(), B.att_out.data() + static_cast<size_t>(p) * d,
                           tmp.data(), d, d);
            double* xm = B.x_mid.data() + static_cast<size_t>(p) * d;
            const double* xin = B.x_in.data() + static_cast<size_t>(p) * d;
            for (int i = 0; i < d; ++i) xm[i] = xin[i] + tmp[i];

            double* h2 = B.ln2_out.data() + static_cast<size_t>(p) * d;
            detail::layernorm(xm, ln2g.data(), ln2b.data(), h2, &B.ln2_mean[static_cast<size_t>(p)],
                              &B.ln2_rstd[static_cast<size_t>(p)], d);
            double* u = B.fc1_out.data() + static_cast<size_t>(p) * F;
            detail::linear(w1.data(), b1.data(), h2, u, F, d);
            double* g = B.act_out.data() + static_cast<size_t>(p) * F;
            for (int i = 0; i < F; ++i) g[i] = detail::gelu(u[i]);
            detail::linear(w2.data(), b2.data(), g, tmp2.data(), d, F);
            double* xo = B.x_out.data() + static_cast<size_t>(p) * d;
            for (int i = 0; i < d; ++i) xo[i] = xm[i] + tmp2[i];
        }

        for (const auto& iv : interventions) {
            if (iv.layer != l + 1) continue;
            double* xo = B.x_out.data() + static_cast<size_t>(iv.position) * d;
            for (int i = 0; i < d; ++i) xo[i] = iv.replacement[static_cast<size_t>(i)];
        }
        x = &B.x_out;
    }

    const int eos = tokens.eos_position();
    acts.lnf_out.assign(static_cast<size_t>(d), 0.0);
    detail::layernorm(x->data() + static_cast<size_t>(eos) * d, m.tensor(m.lnf_g).data.data(),
                      m.tensor(m.lnf_b).data.data(), acts.lnf_out.data(), &acts.lnf_mean,
                      &acts.lnf_rstd, d);
    acts.proj_out.assign(static_cast<size_t>(m.cfg.embed_dim), 0.0);
    detail::linear(m.tensor(m.text_proj).data.data(), nullptr, acts.lnf_out.data(),
                   acts.proj_out.data(), m.cfg.embed_dim, d);
    acts.norm = l2_norm(acts.proj_out);
    if (!(acts.norm > 1e-12)) throw NumericError("text embedding collapsed to zero norm");
    acts.embedding.assign(acts.proj_out.begin(), acts.proj_out.end());
    for (double& v : acts.embedding) v /= acts.norm;
    check_finite(acts.embedding, "text embedding");
}

// ----------------------------- text backward -----------------------------

// Accumulates gradients of the trainable tensors; frozen tensors only relay
// the chain to their inputs. acts must come from an intervention-free forward.
inline void text_backward(Model& m, const TextActs& acts, const std::vector<double>& d_embedding) {
    require(!acts.intervened, "text_backward: cannot differentiate a patched forward");
    const int d = m.cfg.d_model, H = m.cfg.n_heads, hd = m.cfg.head_dim();
    const int F = m.cfg.d_ff(), r = m.cfg.lora_rank, L = m.cfg.n_layers;
    const int T = acts.T;
    const double sc = m.cfg.adapter_scale();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const int eos = acts.tokens.eos_position();

    // l2-normalize backward
    std::vector<double> d_proj(static_cast<size_t>(m.cfg.embed_dim), 0.0);
    double dot = 0.0;
    for (int i = 0; i < m.cfg.embed_dim; ++i) dot += acts.embedding[static_cast<size_t>(i)] * d_embedding[static_cast<size_t>(i)];
    for (int i = 0; i < m.cfg.embed_dim; ++i) {
        d_proj[static_cast<size_t>(i)] =
            (d_embedding[static_cast<size_t>(i)] - acts.embedding[static_cast<size_t>(i)] * dot) / acts.norm;
    }

    // projection head
    auto& proj = m.tensor(m.text_proj);
    detail::linear_backward_weight(proj.grad.data(), d_proj.data(), acts.lnf_out.data(),
                                   m.cfg.embed_dim, d);
    std::vector<double> d_lnf(static_cast<size_t>(d), 0.0);
    detail::linear_backward_input(proj.data.data(), d_proj.data(), d_lnf.data(), m.cfg.embed_dim, d);

    // final layernorm at EOS
    std::vector<double> d_x(static_cast<size_t>(T) * d, 0.0);
    const auto& final_state = acts.state(L);
    detail::layernorm_backward(final_state.data() + static_cast<size_t>(eos) * d,
                               m.tensor(m.lnf_g).data.data(), acts.lnf_mean, acts.lnf_rstd,
                               d_lnf.data(), d_x.data() + static_cast<size_t>(eos) * d, d);

    std::vector<double> d_h1(static_cast<size_t>(T) * d);
    std::vector<double> d_q(static_cast<size_t>(T) * d);
    std::vector<double> d_k(static_cast<size_t>(T) * d);
    std::vector<double> d_v(static_cast<size_t>(T) * d);
    std::vector<double> d_att_out(static_cast<size_t>(T) * d);
    std::vector<double> d_scores(static_cast<size_t>(T), 0.0);
    std::vector<double> d_down(static_cast<size_t>(r), 0.0);
    std::vector<double> d_u(static_cast<size_t>(F), 0.0);
    std::vector<double> d_g(static_cast<size_t>(F), 0.0);
    std::vector<double> d_h2(static_cast<size_t>(d), 0.0);
    std::vector<double> d_xmid(static_cast<size_t>(T) * d);

    for (int l = L - 1; l >= 0; --l) {
        const auto& bp = m.blocks[static_cast<size_t>(l)];
        const BlockActs& B = acts.blocks[static_cast<size_t>(l)];

        // --- mlp sublayer: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
        std::fill(d_xmid.begin(), d_xmid.end(), 0.0);
        const auto& w1 = m.tensor(bp.fc1_w).data;
        const auto& w2 = m.tensor(bp.fc2_w).data;
        for (int p = 0; p < T; ++p) {
            const double* dxo = d_x.data() + static_cast<size_t>(p) * d;
            double* dxm = d_xmid.data() + static_cast<size_t>(p) * d;
            for (int i = 0; i < d; ++i) dxm[i] += dxo[i];  // residual branch

            std::fill(d_g.begin(), d_g.end(), 0.0);
            detail::linear_backward_input(w2.data(), dxo, d_g.data(), d, F);
            const double* u = B.fc1_out.data() + static_cast<size_t>(p) * F;
            for (int i = 0; i < F; ++i) d_u[static_cast<size_t>(i)] = d_g[static_cast<size_t>(i)] * detail::gelu_grad(u[i]);
            std::fill(d_h2.begin(), d_h2.end(), 0.0);
            detail::linear_backward_input(w1.data(), d_u.data(), d_h2.data(), F, d);
            detail::layernorm_backward(B.x_mid.data() + static_cast<size_t>(p) * d,
                                       m.tensor(bp.ln2_g).data.data(), B.ln2_mean[static_cast<size_t>(p)],
                                       B.ln2_rstd[static_cast<size_t>(p)], d_h2.data(), dxm, d);
        }

        // --- attention sublayer: x_mid = x_in + Wo att_out + bo
        std::fill(d_att_out.begin(), d_att_out.end(), 0.0);
        std::fill(d_x.begin(), d_x.end(), 0.0);  // becomes d(x_in)
        const auto& ow = m.tensor(bp.o_w).data;
        for (int p = 0; p < T; ++p) {
            const double* dxm = d_xmid.data() + static_cast<size_t>(p) * d;
            double* dxi = d_x.data() + static_cast<size_t>(p) * d;
            for (int i = 0; i < d; ++i) dxi[i] += dxm[i];  // residual branch
            detail::linear_backward_input(ow.data(), dxm, d_att_out.data() + static_cast<size_t>(p) * d,
                                          d, d);
        }

        std::fill(d_q.begin(), d_q.end(), 0.0);
        std::fill(d_k.begin(), d_k.end(), 0.0);
        std::fill(d_v.begin(), d_v.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            for (int i = 0; i < T; ++i) {
                const double* arow = B.att.data() + (static_cast<size_t>(h) * T + i) * T;
                const double* dao = d_att_out.data() + static_cast<size_t>(i) * d + h * hd;
                // d att[i][j] = dao . v_j ; then softmax backward to scores
                double inner = 0.0;
                for (int j = 0; j < T; ++j) {
                    const double* vj = B.v.data() + static_cast<size_t>(j) * d + h * hd;
                    double da = 0.0;
                    for (int c = 0; c < hd; ++c) da += dao[c] * vj[c];
                    d_scores[static_cast<size_t>(j)] = da;
                    inner += da * arow[j];
                    double* dvj = d_v.data() + static_cast<size_t>(j) * d + h * hd;
                    const double a = arow[j];
                    for (int c = 0; c < hd; ++c) dvj[c] += a * dao[c];
                }
                for (int j = 0; j < T; ++j) {
                    const double ds = arow[j] * (d_scores[static_cast<size_t>(j)] - inner) * inv_sqrt_hd;
                    double* dqi = d_q.data() + static_cast<size_t>(i) * d + h * hd;
                    double* dkj = d_k.data() + static_cast<size_t>(j) * d + h * hd;
                    const double* qi = B.q.data() + static_cast<size_t>(i) * d + h * hd;
                    const double* kj = B.k.data() + static_cast<size_t>(j) * d + h * hd;
                    for (int c = 0; c < hd; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        // q/k/v projections (q and v carry LoRA branches)
        std::fill(d_h1.begin(), d_h1.end(), 0.0);
        auto& q_ld = m.tensor(bp.q_lora_down);
        auto& q_lu = m.tensor(bp.q_lora_up);
        auto& v_ld = m.tensor(bp.v_lora_down);
        auto& v_lu = m.tensor(bp.v_lora_up);
        const auto& qw = m.tensor(bp.q_w).data;
        const auto& kw = m.tensor(bp.k_w).data;
        const auto& vw = m.tensor(bp.v_w).data;
        for (int p = 0; p < T; ++p) {
            const double* h1 = B.ln1_out.data() + static_cast<size_t>(p) * d;
            const double* dqp = d_q.data() + static_cast<size_t>(p) * d;
            const double* dkp = d_k.data() + static_cast<size_t>(p) * d;
            const double* dvp = d_v.data() + static_cast<size_t>(p) * d;
            double* dh1 = d_h1.data() + static_cast<size_t>(p) * d;

            detail::linear_backward_input(qw.data(), dqp, dh1, d, d);
            detail::linear_backward_input(kw.data(), dkp, dh1, d, d);
            detail::linear_backward_input(vw.data(), dvp, dh1, d, d);

            // LoRA q: q += sc * up(down(h1))
            const double* qd = B.q_down.data() + static_cast<size_t>(p) * r;
            std::fill(d_down.begin(), d_down.end(), 0.0);
            for (int j = 0; j < d; ++j) {
                double* up_grad = q_lu.grad.data() + static_cast<size_t>(j) * r;
                const double* up_row = q_lu.data.data() + static_cast<size_t>(j) * r;
                const double g = sc * dqp[j];
                for (int i = 0; i < r; ++i) {
                    up_grad[i] += g * qd[i];
                    d_down[static_cast<size_t>(i)] += g * up_row[i];
                }
            }
            detail::linear_backward_weight(q_ld.grad.data(), d_down.data(), h1, r, d);
            detail::linear_backward_input(q_ld.data.data(), d_down.data(), dh1, r, d);

            // LoRA v
            const double* vd = B.v_down.data() + static_cast<size_t>(p) * r;
            std::fill(d_down.begin(), d_down.end(), 0.0);
            for (int j = 0; j < d; ++j) {
                double* up_grad = v_lu.grad.data() + static_cast<size_t>(j) * r;
                const double* up_row = v_lu.data.data() + static_cast<size_t>(j) * r;
                const double g = sc * dvp[j];
                for (int i = 0; i < r; ++i) {
                    up_grad[i] += g * vd[i];
                    d_down[static_cast<size_t>(i)] += g * up_row[i];
                }
            }
            detail::linear_backward_weight(v_ld.grad.data(), d_down.data(), h1, r, d);
            detail::linear_backward_input(v_ld.data.data(), d_down.data(), dh1, r, d);

            detail::layernorm_backward(B.x_in.data() + static_cast<size_t>(p) * d,
                                       m.tensor(bp.ln1_g).data.data(), B.ln1_mean[static_cast<size_t>(p)],
                                       B.ln1_rstd[static_cast<size_t>(p)], dh1,
                                       d_x.data() + static_cast<size_t>(p) * d, d);
        }
        // d_x now holds the gradient w.r.t. this block's input (= previous state)
    }
    // layer 0 is the frozen embedding table; the chain stops here
}

// ----------------------------- image encoder -----------------------------

inline void image_forward(const Model& m, const std::vector<double>& features, ImageActs& acts) {
    const int din = m.cfg.image_feature_dim, r = m.cfg.lora_rank, e = m.cfg.embed_dim;
    if (static_cast<int>(features.size()) != din)
        throw DataError("image feature dimension mismatch: got " +
                        std::to_string(features.size()) + ", want " + std::to_string(din));
    check_finite(features, "image features");
    const double sc = m.cfg.adapter_scale();

    acts.features = features;
    acts.down_out.assign(static_cast<size_t>(r), 0.0);
    detail::linear(m.tensor(m.img_adapter_down).data.data(), nullptr, features.data(),
                   acts.down_out.data(), r, din);
    acts.act_out.assign(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < r; ++i) acts.act_out[static_cast<size_t>(i)] = detail::gelu(acts.down_out[static_cast<size_t>(i)]);

    // frozen backbone is the identity; the bottleneck rides on top of it
    acts.hidden = features;
    const auto& up = m.tensor(m.img_adapter_up).data;
    for (int j = 0; j < din; ++j) {
        const double* row = up.data() + static_cast<size_t>(j) * r;
        double acc = 0.0;
        for (int i = 0; i < r; ++i) acc += row[i] * acts.act_out[static_cast<size_t>(i)];
        acts.hidden[static_cast<size_t>(j)] += sc * acc;
    }

    acts.proj_out.assign(static_cast<size_t>(e), 0.0);
    detail::linear(m.tensor(m.img_proj).data.data(), m.tensor(m.img_proj_b).data.data(),
                   acts.hidden.data(), acts.proj_out.data(), e, din);
    acts.norm = l2_norm(acts.proj_out);
    if (!(acts.norm > 1e-12)) throw NumericError("image embedding collapsed to zero norm");
    acts.embedding.assign(acts.proj_out.begin(), acts.proj_out.end());
    for (double& v : acts.embedding) v /= acts.norm;
    check_finite(acts.embedding, "image embedding");
}

inline void image_backward(Model& m, const ImageActs& acts, const std::vector<double>& d_embedding) {
    const int din = m.cfg.image_feature_dim, r = m.cfg.lora_rank, e = m.cfg.embed_dim;
    const double sc = m.cfg.adapter_scale();

    std::vector<double> d_proj(static_cast<size_t>(e), 0.0);
    double dot = 0.0;
    for (int i = 0; i < e; ++i) dot += acts.embedding[static_cast<size_t>(i)] * d_embedding[static_cast<size_t>(i)];
    for (int i = 0; i < e; ++i)
        d_proj[static_cast<size_t>(i)] = (d_embedding[static_cast<size_t>(i)] - acts.embedding[static_cast<size_t>(i)] * dot) / acts.norm;

    auto& proj = m.tensor(m.img_proj);
    auto& proj_b = m.tensor(m.img_proj_b);
    detail::linear_backward_weight(proj.grad.data(), d_proj.data(), acts.hidden.data(), e, din);
    for (int i = 0; i < e; ++i) proj_b.grad[static_cast<size_t>(i)] += d_proj[static_cast<size_t>(i)];
    std::vector<double> d_hidden(static_cast<size_t>(din), 0.0);
    detail::linear_backward_input(proj.data.data(), d_proj.data(), d_hidden.data(), e, din);

    auto& up = m.tensor(m.img_adapter_up);
    auto& down = m.tensor(m.img_adapter_down);
    std::vector<double> d_act(static_cast<size_t>(r), 0.0);
    for (int j = 0; j < din; ++j) {
        double* up_grad = up.grad.data() + static_cast<size_t>(j) * r;
        const double* up_row = up.data.data() + static_cast<size_t>(j) * r;
        const double g = sc * d_hidden[static_cast<size_t>(j)];
        for (int i = 0; i < r; ++i) {
            up_grad[i] += g * acts.act_out[static_cast<size_t>(i)];
            d_act[static_cast<size_t>(i)] += g * up_row[i];
        }
    }
    std::vector<double> d_down(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < r; ++i)
        d_down[static_cast<size_t>(i)] = d_act[static_cast<size_t>(i)] * detail::gelu_grad(acts.down_out[static_cast<size_t>(i)]);
    detail::linear_backward_weight(down.grad.data(), d_down.data(), acts.features.data(), r, din);
}

// ----------------------------- public ops -----------------------------

struct EncodeResult {
    std::vector<double> embedding;
    std::optional<HiddenStateTrace> trace;
};

inline EncodeResult encode_text(const Model& m, const TokenSequence& tokens,
                                const std::vector<Intervention>& interventions = {},
                                bool record = false) {
    TextActs acts;
    text_forward(m, tokens, interventions, acts);
    EncodeResult res;
    res.embedding = acts.embedding;
    if (record) {
        HiddenStateTrace tr;
        tr.layers = m.cfg.n_layers;
        tr.length = acts.T;
        tr.d_model = m.cfg.d_model;
        tr.states.push_back(acts.emb);
        for (const auto& b : acts.blocks) tr.states.push_back(b.x_out);
        for (const auto& s : tr.states) check_finite(s, "hidden state trace");
        res.trace = std::move(tr);
    }
    return res;
}

inline std::vector<double> encode_image(const Model& m, const std::vector<double>& features) {
    ImageActs acts;
    image_forward(m, features, acts);
    return acts.embedding;
}

// tau * cosine; both inputs must already be unit vectors.
inline double similarity(const Model& m, const std::vector<double>& img,
                         const std::vector<double>& txt) {
    require(img.size() == txt.size(), "similarity: embedding dims differ");
    if (std::abs(l2_norm(img) - 1.0) > 1e-6 || std::abs(l2_norm(txt) - 1.0) > 1e-6)
        throw ContractError("similarity: inputs must be unit-norm");
    double dot = 0.0;
    for (size_t i = 0; i < img.size(); ++i) dot += img[i] * txt[i];
    return m.temperature() * dot;
}

}  // namespace nast
