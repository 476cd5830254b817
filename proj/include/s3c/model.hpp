#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "s3c/types.hpp"

namespace s3c {

/// Parameters of the spike-and-slab sparse coding model.
///
///   h_i ~ Bernoulli(sigmoid(b_i))
///   s_i | h_i ~ N(h_i mu_i, 1 / alpha_i)
///   v | s, h ~ N(W (h o s), diag(beta)^-1)
///
/// W is D x N with unit-norm columns. beta is stored as a length-D diagonal;
/// a scalar precision is broadcast by `with_scalar_beta`.
struct ModelParams {
    Matrix W;
    Vector b;
    Vector mu;
    Vector alpha;
    Vector beta;

    Index n_visible() const noexcept { return W.rows(); }
    Index n_hidden() const noexcept { return W.cols(); }

    static ModelParams with_scalar_beta(Matrix W, Vector b, Vector mu, Vector alpha, double beta) {
        ModelParams p{std::move(W), std::move(b), std::move(mu), std::move(alpha), Vector()};
        p.beta = Vector::Constant(p.W.rows(), beta);
        return p;
    }

    /// W_i^T diag(beta) W_i for every column.
    Vector weighted_column_norms() const {
        return (W.array().square().colwise() * beta.array()).colwise().sum().transpose();
    }
};

using SpikeVector = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1>;

/// One joint draw (v, s, h) of the generative process.
struct CompleteConfiguration {
    Vector v;
    Vector s;
    SpikeVector h;
};

struct Violation {
    enum class Kind { dimension, column_norm, alpha_positivity, beta_positivity, non_finite };

    Kind kind;
    Index index;  // offending column / entry, -1 when not applicable
    double value;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const noexcept { return violations.empty(); }

    std::string to_string() const {
        if (ok()) {
            return "ok";
        }
        std::ostringstream os;
        for (const auto& v : violations) {
            os << v.message << '\n';
        }
        return os.str();
    }
};

inline constexpr double kUnitNormTolerance = 1e-6;

/// Collects every constraint violation; never throws.
inline ValidationReport validate(const ModelParams& p, double norm_tol = kUnitNormTolerance) {
    ValidationReport report;
    auto add = [&](Violation::Kind kind, Index i, double value, std::string msg) {
        report.violations.push_back({kind, i, value, std::move(msg)});
    };

    const Index n = p.n_hidden();
    const Index d = p.n_visible();
    if (n < 1 || d < 1) {
        add(Violation::Kind::dimension, -1, 0.0,
            "W must have at least one row and one column (got " + std::to_string(d) + "x" +
                std::to_string(n) + ")");
    }
    auto check_len = [&](const Vector& x, Index expected, const char* name) {
        if (x.size() != expected) {
            add(Violation::Kind::dimension, -1, static_cast<double>(x.size()),
                std::string(name) + " has length " + std::to_string(x.size()) + ", expected " +
                    std::to_string(expected));
            return false;
        }
        return true;
    };
    const bool b_ok = check_len(p.b, n, "b");
    const bool mu_ok = check_len(p.mu, n, "mu");
    const bool alpha_ok = check_len(p.alpha, n, "alpha");
    const bool beta_ok = check_len(p.beta, d, "beta");

    if (!p.W.allFinite()) {
        add(Violation::Kind::non_finite, -1, 0.0, "W contains non-finite entries");
    }
    if ((b_ok && !p.b.allFinite()) || (mu_ok && !p.mu.allFinite())) {
        add(Violation::Kind::non_finite, -1, 0.0, "b or mu contains non-finite entries");
    }
    for (Index i = 0; i < n; ++i) {
        const double norm = p.W.col(i).norm();
        if (!(std::abs(norm - 1.0) <= norm_tol)) {
            add(Violation::Kind::column_norm, i, norm,
                "column " + std::to_string(i) + " of W has norm " + std::to_string(norm));
        }
    }
    if (alpha_ok) {
        for (Index i = 0; i < n; ++i) {
            if (!(p.alpha[i] > 0.0) || !std::isfinite(p.alpha[i])) {
                add(Violation::Kind::alpha_positivity, i, p.alpha[i],
                    "alpha[" + std::to_string(i) + "] = " + std::to_string(p.alpha[i]) +
                        " is not a positive finite precision");
            }
        }
    }
    if (beta_ok) {
        for (Index j = 0; j < d; ++j) {
            if (!(p.beta[j] > 0.0) || !std::isfinite(p.beta[j])) {
                add(Violation::Kind::beta_positivity, j, p.beta[j],
                    "beta[" + std::to_string(j) + "] = " + std::to_string(p.beta[j]) +
                        " is not a positive finite precision");
            }
        }
    }
    return report;
}

/// Projects every column of W back onto the unit sphere. Zero columns are left alone.
inline void renormalize_columns(Matrix& W) {
    for (Index i = 0; i < W.cols(); ++i) {
        const double norm = W.col(i).norm();
        if (norm > 0.0) {
            W.col(i) /= norm;
        }
    }
}

namespace detail {

inline void require_shape(const ModelParams& p, const CompleteConfiguration& cfg) {
    if (cfg.v.size() != p.n_visible() || cfg.s.size() != p.n_hidden() ||
        cfg.h.size() != p.n_hidden()) {
        throw DimensionError("configuration dimensions do not match the model (D=" +
                             std::to_string(p.n_visible()) + ", N=" +
                             std::to_string(p.n_hidden()) + ")");
    }
    for (Index i = 0; i < cfg.h.size(); ++i) {
        if (cfg.h[i] > 1) {
            throw Error("spike vector entries must be 0 or 1");
        }
    }
}

inline Vector spikes_as_real(const SpikeVector& h) { return h.cast<double>(); }

}  // namespace detail

/// E(v,s,h) = 1/2 (v - W(h o s))^T beta (v - W(h o s)) + 1/2 sum alpha_i (s_i - mu_i h_i)^2 - b^T h
inline double energy(const ModelParams& p, const CompleteConfiguration& cfg) {
    detail::require_shape(p, cfg);
    const Vector h = detail::spikes_as_real(cfg.h);
    const Vector residual = cfg.v - p.W * h.cwiseProduct(cfg.s);
    const double visible = 0.5 * residual.cwiseAbs2().dot(p.beta);
    const double slab = 0.5 * (cfg.s - p.mu.cwiseProduct(h)).cwiseAbs2().dot(p.alpha);
    return visible + slab - p.b.dot(h);
}

/// Fully normalized log p(v, s, h).
inline double log_joint(const ModelParams& p, const CompleteConfiguration& cfg) {
    detail::require_shape(p, cfg);
    const Index n = p.n_hidden();
    const Index d = p.n_visible();
    auto log_normal = [](double x, double mean, double precision) {
        const double z = x - mean;
        return 0.5 * (std::log(precision) - kLog2Pi - precision * z * z);
    };
    double lp = 0.0;
    for (Index i = 0; i < n; ++i) {
        lp += cfg.h[i] ? log_sigmoid(p.b[i]) : log_sigmoid(-p.b[i]);
        lp += log_normal(cfg.s[i], cfg.h[i] ? p.mu[i] : 0.0, p.alpha[i]);
    }
    const Vector mean = p.W * detail::spikes_as_real(cfg.h).cwiseProduct(cfg.s);
    for (Index j = 0; j < d; ++j) {
        lp += log_normal(cfg.v[j], mean[j], p.beta[j]);
    }
    return lp;
}

inline constexpr int kDefaultEnumerationLimit = 15;

namespace detail {

inline void require_enumerable(const ModelParams& p, int limit) {
    if (limit > 62) {
        limit = 62;
    }
    if (p.n_hidden() > limit) {
        throw Error("exact enumeration needs N <= " + std::to_string(limit) + " (got N=" +
                    std::to_string(p.n_hidden()) + ")");
    }
}

inline double log_sum_exp(const std::vector<double>& xs) {
    const double m = *std::max_element(xs.begin(), xs.end());
    if (!std::isfinite(m)) {
        return m;
    }
    double acc = 0.0;
    for (double x : xs) {
        acc += std::exp(x - m);
    }
    return m + std::log(acc);
}

/// log p(h) + log p(v | h) for one spike pattern, with s integrated out:
/// v | h ~ N(W (h o mu), diag(beta)^-1 + W diag(h / alpha) W^T).
inline double log_pattern_evidence(const ModelParams& p, const Eigen::Ref<const Vector>& v,
                                   std::uint64_t bits) {
    const Index n = p.n_hidden();
    const Index d = p.n_visible();
    double log_prior = 0.0;
    Vector mean = Vector::Zero(d);
    Matrix cov = p.beta.cwiseInverse().asDiagonal();
    for (Index i = 0; i < n; ++i) {
        if ((bits >> i) & 1U) {
            log_prior += log_sigmoid(p.b[i]);
            mean += p.mu[i] * p.W.col(i);
            cov.noalias() += (1.0 / p.alpha[i]) * p.W.col(i) * p.W.col(i).transpose();
        } else {
            log_prior += log_sigmoid(-p.b[i]);
        }
    }
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) {
        throw Error("marginal covariance of v is singular for spike pattern " +
                    std::to_string(bits));
    }
    const Vector centered = v - mean;
    const Vector z = llt.matrixL().solve(centered);
    const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return log_prior - 0.5 * (static_cast<double>(d) * kLog2Pi + log_det + z.squaredNorm());
}

}  // namespace detail

/// Exact log p(v) by enumerating all 2^N spike patterns. Verification use only.
inline double exact_log_marginal(const ModelParams& p, const Eigen::Ref<const Vector>& v,
                                 int enumeration_limit = kDefaultEnumerationLimit) {
    detail::require_enumerable(p, enumeration_limit);
    if (v.size() != p.n_visible()) {
        throw DimensionError("visible vector has length " + std::to_string(v.size()) +
                             ", model expects " + std::to_string(p.n_visible()));
    }
    const std::uint64_t patterns = std::uint64_t{1} << p.n_hidden();
    std::vector<double> terms(patterns);
    for (std::uint64_t bits = 0; bits < patterns; ++bits) {
        terms[bits] = detail::log_pattern_evidence(p, v, bits);
    }
    return detail::log_sum_exp(terms);
}

/// Ancestral sampling; identical seeds give identical draws.
inline std::vector<CompleteConfiguration> sample(const ModelParams& p, Index count,
                                                 std::uint64_t seed) {
    const Index n = p.n_hidden();
    const Index d = p.n_visible();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    const Vector on_prob = p.b.unaryExpr([](double x) { return sigmoid(x); });
    const Vector slab_sd = p.alpha.cwiseInverse().cwiseSqrt();
    const Vector visible_sd = p.beta.cwiseInverse().cwiseSqrt();

    std::vector<CompleteConfiguration> out;
    out.reserve(static_cast<std::size_t>(std::max<Index>(count, 0)));
    for (Index m = 0; m < count; ++m) {
        CompleteConfiguration cfg{Vector(d), Vector(n), SpikeVector(n)};
        for (Index i = 0; i < n; ++i) {
            cfg.h[i] = uniform(rng) < on_prob[i] ? 1 : 0;
        }
        for (Index i = 0; i < n; ++i) {
            cfg.s[i] = (cfg.h[i] ? p.mu[i] : 0.0) + slab_sd[i] * normal(rng);
        }
        const Vector state = cfg.h.cast<double>().cwiseProduct(cfg.s);
        cfg.v = p.W * state;
        for (Index j = 0; j < d; ++j) {
            cfg.v[j] += visible_sd[j] * normal(rng);
        }
        out.push_back(std::move(cfg));
    }
    return out;
}

/// Visible parts of `sample` packed as a D x count batch.
inline PatchBatch sample_visible(const ModelParams& p, Index count, std::uint64_t seed) {
    const auto draws = sample(p, count, seed);
    PatchBatch V(p.n_visible(), count);
    for (Index m = 0; m < count; ++m) {
        V.col(m) = draws[static_cast<std::size_t>(m)].v;
    }
    return V;
}

}  // namespace s3c
