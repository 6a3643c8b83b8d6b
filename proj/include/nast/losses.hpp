#pragma once

// Training objectives over similarity scores: symmetric contrastive loss with
// diagonal targets, and the claim-ranking negative log-likelihood.

#include <vector>

#include "nast/common.hpp"

namespace nast {

namespace detail {

inline double logsumexp(const double* x, int n) {
    double maxv = x[0];
    for (int i = 1; i < n; ++i) {
        if (x[i] > maxv) maxv = x[i];
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(x[i] - maxv);
    return maxv + std::log(sum);
}

}  // namespace detail

// 0.5 * (mean row cross-entropy + mean column cross-entropy) over an NxN score
// matrix, targets on the diagonal. d_scores has the same layout as scores.
struct ClipLossResult {
    double loss = 0.0;
    std::vector<double> d_scores;
};

inline ClipLossResult clip_loss_from_scores(const std::vector<double>& scores, int n) {
    require(n >= 2, "contrastive loss needs at least 2 items");
    require(static_cast<int>(scores.size()) == n * n, "score matrix must be NxN");
    ClipLossResult res;
    res.d_scores.assign(static_cast<size_t>(n) * n, 0.0);
    const double w = 0.5 / n;

    std::vector<double> col(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = scores.data() + static_cast<size_t>(i) * n;
        double lse = detail::logsumexp(row, n);
        res.loss += w * (lse - row[i]);
        for (int j = 0; j < n; ++j) {
            double p = std::exp(row[j] - lse);
            res.d_scores[static_cast<size_t>(i) * n + j] += w * (p - (i == j ? 1.0 : 0.0));
        }
    }
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) col[static_cast<size_t>(i)] = scores[static_cast<size_t>(i) * n + j];
        double lse = detail::logsumexp(col.data(), n);
        res.loss += w * (lse - col[static_cast<size_t>(j)]);
        for (int i = 0; i < n; ++i) {
            double p = std::exp(col[static_cast<size_t>(i)] - lse);
            res.d_scores[static_cast<size_t>(i) * n + j] += w * (p - (i == j ? 1.0 : 0.0));
        }
    }
    return res;
}

// Negative log-likelihood of the correct claim under a softmax over the K
// option logits of one set. Callers average over sets themselves.
struct ClaimSetLossResult {
    double loss = 0.0;
    std::vector<double> d_logits;
};

inline ClaimSetLossResult claim_loss_from_logits(const std::vector<double>& logits, int correct) {
    const int k = static_cast<int>(logits.size());
    require(k >= 2, "claim loss needs at least 2 options");
    require(correct >= 0 && correct < k, "correct index out of range");
    ClaimSetLossResult res;
    double lse = detail::logsumexp(logits.data(), k);
    res.loss = lse - logits[static_cast<size_t>(correct)];
    res.d_logits.assign(static_cast<size_t>(k), 0.0);
    for (int j = 0; j < k; ++j)
        res.d_logits[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - lse) - (j == correct ? 1.0 : 0.0);
    return res;
}

inline double combined_loss(double clip_loss, double claim_loss, double lambda_mix) {
    require(lambda_mix >= 0.0 && lambda_mix <= 1.0, "lambda must lie in [0,1]");
    return lambda_mix * clip_loss + (1.0 - lambda_mix) * claim_loss;
}

}  // namespace nast
