// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "aqa/ops.hpp"
#include "aqa/tensor.hpp"

namespace aqa {

// ---------------------------------------------------------------------------
// hard ranks and Spearman correlation (exact, non-differentiable)
// ---------------------------------------------------------------------------

// Ascending ranks 1..n; tied entries share the average of their positions.
template <class Real>
std::vector<Real> hard_rank(const std::vector<Real>& x) {
    const size_t n = x.size();
    if (n == 0) throw Error("hard_rank: empty input");
    for (Real v : x)
        if (std::isnan(static_cast<double>(v))) throw Error("hard_rank: NaN input");

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });

    std::vector<Real> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const Real avg = static_cast<Real>(i + j) / Real(2) + Real(1);
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

namespace detail {

template <class Real>
Real pearson_on(const std::vector<Real>& p, const std::vector<Real>& q, const char* who) {
    const size_t n = p.size();
    Real pm = 0, qm = 0;
    for (size_t i = 0; i < n; ++i) {
        pm += p[i];
        qm += q[i];
    }
    pm /= static_cast<Real>(n);
    qm /= static_cast<Real>(n);
    Real spq = 0, spp = 0, sqq = 0;
    for (size_t i = 0; i < n; ++i) {
        const Real dp = p[i] - pm, dq = q[i] - qm;
        spq += dp * dq;
        spp += dp * dp;
        sqq += dq * dq;
    }
    if (spp == Real(0) || sqq == Real(0))
        throw Error(cat(who, ": correlation undefined, an argument has zero rank variance "
                             "(all values tied)"));
    return spq / (std::sqrt(spp) * std::sqrt(sqq));
}

} // namespace detail

// Pearson correlation of the two rank vectors.
template <class Real>
Real spearman(const std::vector<Real>& y, const std::vector<Real>& y_hat) {
    if (y.size() != y_hat.size())
        throw Error(cat("spearman: length mismatch ", y.size(), " vs ", y_hat.size()));
    if (y.size() < 2) throw Error("spearman: need at least 2 samples");
    const std::vector<Real> p = hard_rank(y);
    const std::vector<Real> q = hard_rank(y_hat);
    return detail::pearson_on(p, q, "spearman");
}

// ---------------------------------------------------------------------------
// soft rank: Euclidean projection of x/epsilon onto the permutahedron of
// (1..n), solved by isotonic regression (pool-adjacent-violators) on the
// descending-sorted sequence. Piecewise linear; the Jacobian is identity
// minus block-averaging over the PAV blocks, scaled by 1/epsilon.
// ---------------------------------------------------------------------------

template <class Real>
struct SoftRankResult {
    std::vector<Real> rank;        // soft ranks in input order
    std::vector<size_t> order;     // descending sort permutation: order[pos] = input index
    std::vector<int> block_of;     // PAV block id per sorted position
    std::vector<int> block_size;   // size per block id
    Real epsilon = Real(0);
};

template <class Real>
SoftRankResult<Real> soft_rank_raw(const std::vector<Real>& x, Real epsilon) {
    if (epsilon <= Real(0)) throw Error(cat("soft_rank: epsilon must be positive, got ", epsilon));
    const size_t n = x.size();
    if (n == 0) throw Error("soft_rank: empty input");
    for (Real v : x)
        if (!std::isfinite(static_cast<double>(v))) throw Error("soft_rank: non-finite input");

    SoftRankResult<Real> res;
    res.epsilon = epsilon;
    res.order.resize(n);
    std::iota(res.order.begin(), res.order.end(), size_t{0});
    std::stable_sort(res.order.begin(), res.order.end(),
                     [&](size_t a, size_t b) { return x[a] > x[b]; });

    // s = z_sorted - (n, n-1, ..., 1), then fit the best nonincreasing vector.
    std::vector<Real> s(n);
    for (size_t i = 0; i < n; ++i)
        s[i] = x[res.order[i]] / epsilon - static_cast<Real>(n - i);

    // PAV with a block stack: (sum, count, start). Merge while the newest
    // block average exceeds its predecessor's.
    std::vector<Real> bsum;
    std::vector<int> bcount;
    bsum.reserve(n);
    bcount.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        bsum.push_back(s[i]);
        bcount.push_back(1);
        while (bsum.size() > 1) {
            const size_t t = bsum.size() - 1;
            if (bsum[t] * static_cast<Real>(bcount[t - 1]) >
                bsum[t - 1] * static_cast<Real>(bcount[t])) {
                bsum[t - 1] += bsum[t];
                bcount[t - 1] += bcount[t];
                bsum.pop_back();
                bcount.pop_back();
            } else {
                break;
            }
        }
    }

    res.block_of.resize(n);
    res.block_size.assign(bcount.begin(), bcount.end());
    res.rank.resize(n);
    size_t pos = 0;
    for (size_t b = 0; b < bsum.size(); ++b) {
        const Real fitted = bsum[b] / static_cast<Real>(bcount[b]);
        for (int k = 0; k < bcount[b]; ++k, ++pos) {
            res.block_of[pos] = static_cast<int>(b);
            // projection = z - fitted isotonic vector, unsorted back
            res.rank[res.order[pos]] = x[res.order[pos]] / epsilon - fitted;
        }
    }
    return res;
}

// Differentiable tensor form (rank-1 input).
template <class Real>
TensorT<Real> soft_rank(const TensorT<Real>& x, Real epsilon) {
    if (x.rank() != 1)
        throw Error(cat("soft_rank: want rank-1 tensor, got ", shape_str(x.shape())));
    auto res = soft_rank_raw(x.value(), epsilon);
    const size_t n = x.value().size();

    auto* px = x.node();
    std::vector<Real> out = res.rank;
    return custom_op<Real>(
        "soft_rank", x.shape(), std::move(out), {x},
        [px, res = std::move(res), n](TensorNodeT<Real>& self) {
            px->ensure_grad();
            const Real* g = self.grad.data();
            // block means of the upstream gradient (in sorted order)
            std::vector<Real> bmean(res.block_size.size(), Real(0));
            for (size_t pos = 0; pos < n; ++pos)
                bmean[static_cast<size_t>(res.block_of[pos])] += g[res.order[pos]];
            for (size_t b = 0; b < bmean.size(); ++b)
                bmean[b] /= static_cast<Real>(res.block_size[b]);
            const Real inv_eps = Real(1) / res.epsilon;
            for (size_t pos = 0; pos < n; ++pos) {
                const size_t j = res.order[pos];
                px->grad[j] += (g[j] - bmean[static_cast<size_t>(res.block_of[pos])]) * inv_eps;
            }
        });
}

// ---------------------------------------------------------------------------
// differentiable Spearman and the combined loss
// ---------------------------------------------------------------------------

// Pearson correlation between constant hard ranks of y and soft ranks of
// y_hat. Gradient flows to y_hat only.
template <class Real>
TensorT<Real> soft_spearman(const std::vector<Real>& y, const TensorT<Real>& y_hat, Real epsilon) {
    if (y_hat.rank() != 1)
        throw Error(cat("soft_spearman: want rank-1 predictions, got ", shape_str(y_hat.shape())));
    const size_t n = y.size();
    if (static_cast<std::int64_t>(n) != y_hat.size())
        throw Error(cat("soft_spearman: length mismatch ", n, " vs ", y_hat.size()));
    if (n < 2) throw Error("soft_spearman: need at least 2 samples");

    const std::vector<Real> p = hard_rank(y);
    Real pm = 0;
    for (Real v : p) pm += v;
    pm /= static_cast<Real>(n);
    std::vector<Real> pc(n);
    Real spp = 0;
    for (size_t i = 0; i < n; ++i) {
        pc[i] = p[i] - pm;
        spp += pc[i] * pc[i];
    }
    if (spp == Real(0))
        throw Error("soft_spearman: correlation undefined, targets all tied");

    TensorT<Real> q = soft_rank(y_hat, epsilon);
    {
        // exact zero spread happens only for exactly constant predictions
        Real qmin = q.value()[0], qmax = q.value()[0];
        for (Real v : q.value()) {
            qmin = std::min(qmin, v);
            qmax = std::max(qmax, v);
        }
        if (qmin == qmax)
            throw Error("soft_spearman: correlation undefined, predictions all tied");
    }

    TensorT<Real> qc = sub(q, mean_all(q));
    TensorT<Real> pct = TensorT<Real>::from({static_cast<int>(n)}, pc);
    TensorT<Real> num = sum_all(mul(pct, qc));
    TensorT<Real> den = scale(sqrt_t(sum_all(mul(qc, qc))), std::sqrt(spp));
    return div(num, den);
}

// Weights for the combined objective: alpha * MSE - beta * SpCorr, plus the
// soft-rank regularization strength.
struct LossConfig {
    double alpha = 1.0;
    double beta = 1.0;
    double epsilon = 0.1;

    void validate() const {
        if (alpha < 0 || beta < 0) throw Error("loss: alpha and beta must be nonnegative");
        if (alpha + beta <= 0) throw Error("loss: alpha + beta must be positive");
        if (epsilon <= 0) throw Error("loss: epsilon must be positive");
    }
};

// y: per-sample (normalized score, difficulty) targets. y_hat: [B, 2]
// predictions. MSE averages over batch and both components; the Spearman
// term correlates per-sample final scores (the product of the two
// components) across the batch.
template <class Real>
TensorT<Real> mse_spearman_loss(const std::vector<std::array<Real, 2>>& y,
                                const TensorT<Real>& y_hat, const LossConfig& cfg) {
    cfg.validate();
    const size_t b = y.size();
    if (y_hat.rank() != 2 || y_hat.shape()[1] != 2)
        throw Error(cat("loss: predictions must be [B, 2], got ", shape_str(y_hat.shape())));
    if (static_cast<std::int64_t>(b) != y_hat.shape()[0])
        throw Error(cat("loss: batch size mismatch: ", b, " targets vs ", y_hat.shape()[0],
                        " predictions"));
    if (b == 0) throw Error("loss: empty batch");
    if (cfg.beta > 0 && b < 2)
        throw Error("loss: Spearman term needs batch size >= 2");

    std::vector<Real> flat(b * 2);
    for (size_t i = 0; i < b; ++i) {
        flat[2 * i] = y[i][0];
        flat[2 * i + 1] = y[i][1];
    }
    TensorT<Real> target = TensorT<Real>::from({static_cast<int>(b), 2}, std::move(flat));

    TensorT<Real> loss;
    if (cfg.alpha > 0) {
        TensorT<Real> mse = mean_all(square(sub(y_hat, target)));
        loss = scale(mse, static_cast<Real>(cfg.alpha));
    }
    if (cfg.beta > 0) {
        std::vector<Real> finals_true(b);
        for (size_t i = 0; i < b; ++i) finals_true[i] = y[i][0] * y[i][1];
        const int bi = static_cast<int>(b);
        TensorT<Real> ns = reshape(slice(y_hat, 1, 0, 1), {bi});
        TensorT<Real> dd = reshape(slice(y_hat, 1, 1, 2), {bi});
        TensorT<Real> finals_pred = mul(ns, dd);
        TensorT<Real> corr = soft_spearman(finals_true, finals_pred, static_cast<Real>(cfg.epsilon));
        TensorT<Real> term = scale(corr, static_cast<Real>(-cfg.beta));
        loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
}

} // namespace aqa
