#pragma once

#include <cstdint>
#include <vector>

#include "s3c/inference.hpp"
#include "s3c/model.hpp"

namespace s3c {

/// Exact posterior of a small model, computed by enumerating all 2^N spike patterns.
struct ExactPosterior {
    struct Pattern {
        std::uint64_t bits;         // bit i set <=> h_i = 1
        double log_probability;     // log p(h | v), normalized
    };

    double log_marginal = 0.0;      // log p(v)
    Vector p_on;                    // p(h_i = 1 | v)
    Vector e_hs;                    // E[h_i s_i | v]
    Vector e_hs2;                   // E[h_i s_i^2 | v]
    std::vector<Pattern> patterns;
};

/// Verification oracle. Within each pattern s_A | v, h is Gaussian with precision
/// diag(alpha_A) + W_A^T beta W_A; inactive slabs keep their N(0, 1/alpha) prior.
inline ExactPosterior exact_posterior(const ModelParams& p, const Vector& v,
                                      int enumeration_limit = kDefaultEnumerationLimit) {
    detail::require_enumerable(p, enumeration_limit);
    detail::require_visible(p, v);
    const Index n = p.n_hidden();
    const std::uint64_t count = std::uint64_t{1} << n;

    std::vector<double> log_w(count);
    std::vector<Vector> cond_mean(count);
    std::vector<Vector> cond_var(count);
    const Vector beta_v = p.beta.cwiseProduct(v);
    for (std::uint64_t bits = 0; bits < count; ++bits) {
        log_w[bits] = detail::log_pattern_evidence(p, v, bits);

        std::vector<Index> active;
        for (Index i = 0; i < n; ++i) {
            if ((bits >> i) & 1U) {
                active.push_back(i);
            }
        }
        const auto k = static_cast<Index>(active.size());
        Matrix WA(p.n_visible(), k);
        Vector rhs(k);
        Vector alpha_a(k);
        for (Index a = 0; a < k; ++a) {
            const Index i = active[static_cast<std::size_t>(a)];
            WA.col(a) = p.W.col(i);
            alpha_a[a] = p.alpha[i];
            rhs[a] = p.alpha[i] * p.mu[i] + p.W.col(i).dot(beta_v);
        }
        Matrix precision = WA.transpose() * p.beta.asDiagonal() * WA;
        precision.diagonal() += alpha_a;
        Eigen::LLT<Matrix> llt(precision);
        if (llt.info() != Eigen::Success) {
            throw Error("posterior slab precision is singular for spike pattern " + std::to_string(bits));
        }
        Vector mean = Vector::Zero(n);
        Vector var = p.alpha.cwiseInverse();
        if (k > 0) {
            const Vector m = llt.solve(rhs);
            const Matrix cov = llt.solve(Matrix::Identity(k, k));
            for (Index a = 0; a < k; ++a) {
                const Index i = active[static_cast<std::size_t>(a)];
                mean[i] = m[a];
                var[i] = cov(a, a);
            }
        }
        cond_mean[bits] = std::move(mean);
        cond_var[bits] = std::move(var);
    }

    ExactPosterior out;
    out.log_marginal = detail::log_sum_exp(log_w);
    out.p_on = Vector::Zero(n);
    out.e_hs = Vector::Zero(n);
    out.e_hs2 = Vector::Zero(n);
    out.patterns.reserve(count);
    for (std::uint64_t bits = 0; bits < count; ++bits) {
        const double lp = log_w[bits] - out.log_marginal;
        const double w = std::exp(lp);
        out.patterns.push_back({bits, lp});
        for (Index i = 0; i < n; ++i) {
            if ((bits >> i) & 1U) {
                out.p_on[i] += w;
                out.e_hs[i] += w * cond_mean[bits][i];
                out.e_hs2[i] += w * (cond_mean[bits][i] * cond_mean[bits][i] + cond_var[bits][i]);
            }
        }
    }
    return out;
}

}  // namespace s3c
