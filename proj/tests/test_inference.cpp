#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "s3c/exact_posterior.hpp"
#include "s3c/inference.hpp"
#include "test_support.hpp"

namespace s3c {
namespace {

using testing::random_model;
using testing::random_vector;

VariationalState random_state(const ModelParams& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.02, 0.98);
    VariationalState st = init_state(p);
    for (Index i = 0; i < p.n_hidden(); ++i) {
        st.h_hat[i] = u(rng);
    }
    st.s_hat = random_vector(p.n_hidden(), seed + 7, 1.5);
    return st;
}

// ---------------------------------------------------------------------------
// Loop-based oracles: the displayed update formulas evaluated one unit at a
// time with explicit sums, no matrix shortcuts.

Vector s_star_loop(const ModelParams& p, const VariationalState& st, const Vector& v) {
    const Index n = p.n_hidden(), d = p.n_visible();
    Vector out(n);
    for (Index i = 0; i < n; ++i) {
        double vbw = 0.0, wbw = 0.0, inhibition = 0.0;
        for (Index r = 0; r < d; ++r) {
            vbw += v[r] * p.beta[r] * p.W(r, i);
            wbw += p.W(r, i) * p.beta[r] * p.W(r, i);
            double others = 0.0;
            for (Index j = 0; j < n; ++j) {
                if (j != i) {
                    others += p.W(r, j) * st.h_hat[j] * st.s_hat[j];
                }
            }
            inhibition += p.W(r, i) * p.beta[r] * others;
        }
        out[i] = (p.mu[i] * p.alpha[i] + vbw - inhibition) / (p.alpha[i] + wbw);
    }
    return out;
}

Vector h_star_loop(const ModelParams& p, const Vector& h_prev, const Vector& s_new, const Vector& v) {
    const Index n = p.n_hidden(), d = p.n_visible();
    Vector out(n);
    for (Index i = 0; i < n; ++i) {
        double dot = 0.0, wbw = 0.0;
        for (Index r = 0; r < d; ++r) {
            double resid = v[r];
            for (Index j = 0; j < n; ++j) {
                if (j != i) {
                    resid -= p.W(r, j) * s_new[j] * h_prev[j];
                }
            }
            resid -= 0.5 * p.W(r, i) * s_new[i];
            dot += resid * p.beta[r] * p.W(r, i) * s_new[i];
            wbw += p.W(r, i) * p.beta[r] * p.W(r, i);
        }
        const double arg = dot + p.b[i] - 0.5 * p.alpha[i] * (s_new[i] - p.mu[i]) * (s_new[i] - p.mu[i]) -
                           0.5 * std::log(p.alpha[i] + wbw) + 0.5 * std::log(p.alpha[i]);
        out[i] = 1.0 / (1.0 + std::exp(-arg));
    }
    return out;
}

/// Sequential coordinate ascent: exact per-factor optimum, one unit at a time.
VariationalState coordinate_ascent(const ModelParams& p, const Vector& v, int sweeps, std::vector<double>* trace) {
    VariationalState st = init_state(p);
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        for (Index i = 0; i < p.n_hidden(); ++i) {
            st.s_hat[i] = s_star_loop(p, st, v)[i];
            Vector h_new = h_star_loop(p, st.h_hat, st.s_hat, v);
            st.h_hat[i] = std::clamp(h_new[i], 1e-7, 1.0 - 1e-7);
            if (trace != nullptr) {
                trace->push_back(energy_functional(p, st, v));
            }
        }
    }
    return st;
}

double relative_error(const Vector& a, const Vector& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

ModelParams one_unit(double w_scale, double b, double mu, double alpha, double beta, Index d = 1) {
    Matrix W = Matrix::Constant(d, 1, w_scale);
    renormalize_columns(W);
    return ModelParams::with_scalar_beta(W, Vector::Constant(1, b), Vector::Constant(1, mu),
                                         Vector::Constant(1, alpha), beta);
}

// ---------------------------------------------------------------------------

TEST(InitState, SigmoidOfBiasAndSlabMeans) {
    auto p = random_model(3, 2, 1);
    p.b.setZero();
    p.mu << 1.5, -2.0;
    const auto st = init_state(p);
    EXPECT_DOUBLE_EQ(st.h_hat[0], 0.5);
    EXPECT_DOUBLE_EQ(st.h_hat[1], 0.5);
    EXPECT_DOUBLE_EQ(st.s_hat[0], 1.5);
    EXPECT_DOUBLE_EQ(st.s_hat[1], -2.0);
}

TEST(InitState, SlabVariances) {
    const auto p = one_unit(1.0, 0.0, 0.0, 1.0, 1.0);
    const auto st = init_state(p);
    EXPECT_DOUBLE_EQ(st.slab_var_on[0], 0.5);
    EXPECT_DOUBLE_EQ(st.slab_var_off[0], 1.0);
}

TEST(InitState, ClampsExtremeBiases) {
    auto p = random_model(3, 2, 1);
    p.b << -40.0, 40.0;
    const auto st = init_state(p);
    EXPECT_DOUBLE_EQ(st.h_hat[0], 1e-7);
    EXPECT_DOUBLE_EQ(st.h_hat[1], 1.0 - 1e-7);
}

TEST(SlabVariances, OnVarianceBelowOffVariance) {
    const auto p = random_model(6, 5, 3);
    const auto st = init_state(p);
    for (Index i = 0; i < 5; ++i) {
        EXPECT_LT(st.slab_var_on[i], st.slab_var_off[i]);
        EXPECT_NEAR(st.slab_var_on[i], 1.0 / (p.alpha[i] + p.weighted_column_norms()[i]), 1e-12);
    }
}

TEST(SStar, SingleUnitSubstitution) {
    const auto p = one_unit(1.0, 0.0, 0.0, 1.0, 1.0);
    const auto st = init_state(p);
    EXPECT_DOUBLE_EQ(s_star(p, st, Vector::Constant(1, 1.0))[0], 0.5);
}

TEST(SStar, NoiselessSelfConsistentInput) {
    const double mu = 1.7, alpha = 2.3;
    const auto p = one_unit(1.0, 0.0, mu, alpha, 1.0, 4);
    const auto st = init_state(p);
    EXPECT_NEAR(s_star(p, st, mu * p.W.col(0))[0], mu, 1e-12);
}

TEST(SStar, MatchesPerUnitLoop) {
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_model(5, 3, 10 + trial);
        const auto st = random_state(p, 20 + trial);
        const Vector v = random_vector(5, 30 + trial);
        EXPECT_LT(relative_error(s_star(p, st, v), s_star_loop(p, st, v)), 1e-12);
    }
}

TEST(ClipReflections, TruthTable) {
    auto one = [](double star, double prev) {
        return clip_reflections(Vector::Constant(1, star), Vector::Constant(1, prev), 0.5)(0, 0);
    };
    EXPECT_EQ(one(-2.0, 1.0), -0.5);
    EXPECT_EQ(one(-0.3, 1.0), -0.3);
    EXPECT_EQ(one(4.0, 1.0), 4.0);
}

TEST(ClipReflections, ZeroHandling) {
    EXPECT_EQ(clip_reflection(0.0, -3.0, 0.5), 0.0);   // s* = 0 never clips
    EXPECT_EQ(clip_reflection(-2.0, 0.0, 0.5), -2.0);  // nothing to reflect
    EXPECT_EQ(clip_reflection(3.0, -1.0, 0.0), 0.0);   // rho = 0 zeroes reflections
    EXPECT_EQ(clip_reflection(-3.0, -1.0, 0.5), -3.0);
}

TEST(HStar, SingleUnitZeroSlab) {
    const auto p = one_unit(1.0, 0.0, 0.0, 1.0, 1.0, 3);
    const auto st = init_state(p);
    const double h = h_star(p, st, Vector::Zero(1), Vector::Constant(3, 0.4))[0];
    EXPECT_NEAR(h, 1.0 / (1.0 + std::sqrt(2.0)), 1e-12);
    EXPECT_NEAR(h, 0.41421356, 1e-8);
}

TEST(HStar, SaturatesForLargeNegativeBias) {
    auto p = random_model(4, 3, 5);
    p.b[1] = -30.0;
    const auto st = init_state(p);
    EXPECT_LT(h_star(p, st, st.s_hat, random_vector(4, 6, 0.5))[1], 1e-10);
}

TEST(HStar, MatchesPerUnitLoopUsingNewSlabsAndOldSpikes) {
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_model(5, 3, 40 + trial);
        const auto st = random_state(p, 50 + trial);
        const Vector v = random_vector(5, 60 + trial);
        const Vector s_new = random_vector(3, 70 + trial);
        EXPECT_LT(relative_error(h_star(p, st, s_new, v), h_star_loop(p, st.h_hat, s_new, v)), 1e-12);
    }
}

TEST(FixedPoint, UndampedSingleStepIsOneCoordinateUpdate) {
    const auto p = one_unit(1.0, 0.3, 0.8, 1.2, 2.0, 3);
    const Vector v = random_vector(3, 8) + p.W.col(0);
    InferenceConfig cfg;
    cfg.damping = 1.0;
    cfg.n_steps = 1;
    const auto res = fixed_point_estep(p, v, cfg);

    const auto st0 = init_state(p);
    const Vector c = clip_reflections(s_star_loop(p, st0, v), st0.s_hat, 0.5);
    const Vector h = h_star_loop(p, st0.h_hat, c, v);
    EXPECT_NEAR(res.state.s_hat[0], c[0], 1e-12);
    EXPECT_NEAR(res.state.h_hat[0], h[0], 1e-12);
}

TEST(FixedPoint, StronglyActiveUnitSwitchesOn) {
    testing::RandomModelOptions opt;
    auto p = random_model(8, 4, 80, opt);
    p.W = testing::near_orthogonal_dictionary(8, 4, 0.1, 81);
    p.mu.setConstant(2.0);
    p.b << 5.0, -5.0, -5.0, -5.0;
    const auto draws = sample(p, 20, 82);
    for (const auto& d : draws) {
        if (!d.h[0] || std::abs(d.s[0]) < 1.0) {
            continue;
        }
        const auto exact = exact_posterior(p, d.v);
        ASSERT_GT(exact.p_on[0], 0.9);
        const auto res = fixed_point_estep(p, d.v, InferenceConfig{});
        EXPECT_GT(res.state.h_hat[0], 0.9);
    }
}

// Damping must exceed 1 / (1 + rho) here: below it no slab can change sign
// (see StrongDampingFreezesSlabSigns) and units whose posterior slab sign
// differs from mu stay stuck near zero.
TEST(FixedPoint, ApproachesExactLogMarginalOnNearOrthogonalModel) {
    for (int trial = 0; trial < 20; ++trial) {
        testing::RandomModelOptions opt;
        opt.beta_lo = opt.beta_hi = 2.0;
        opt.mu_sd = 1.0;
        auto p = random_model(8, 4, 90 + trial, opt);
        p.W = testing::near_orthogonal_dictionary(8, 4, 0.02, 91 + trial);
        const auto draws = sample(p, 10, 92 + trial);
        for (const auto& d : draws) {
            InferenceConfig cfg;
            cfg.damping = 0.8;
            cfg.track_functional = true;
            const auto res = fixed_point_estep(p, d.v, cfg);
            const double exact = exact_log_marginal(p, d.v);
            EXPECT_LE(res.functional_trace.back(), exact + 1e-9);
            EXPECT_GT(res.functional_trace.back(), exact - 0.1);
        }
    }
}

TEST(FixedPoint, RejectsWrongMethodAndBadConfig) {
    const auto p = random_model(3, 2, 1);
    InferenceConfig cfg;
    cfg.method = InferenceMethod::conjugate_gradient;
    EXPECT_THROW(fixed_point_estep(p, Vector::Zero(3), cfg), Error);
    cfg.method = InferenceMethod::fixed_point;
    cfg.damping = 0.0;
    EXPECT_THROW(fixed_point_estep(p, Vector::Zero(3), cfg), Error);
    cfg.damping = 0.5;
    cfg.rho = 1.5;
    EXPECT_THROW(fixed_point_estep(p, Vector::Zero(3), cfg), Error);
}

TEST(FixedPoint, ReportsDivergence) {
    auto p = random_model(3, 2, 1);
    const Vector v = Vector::Constant(3, std::numeric_limits<double>::infinity());
    try {
        fixed_point_estep(p, v, InferenceConfig{});
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.index(), 0);
    }
}

// Finite-difference Hessian of F in s_hat, with h_hat fixed, at two base points.
TEST(ConjugateGradient, FunctionalIsQuadraticInSlabs) {
    const auto p = random_model(6, 4, 100);
    const Vector v = random_vector(6, 101);
    const auto base = random_state(p, 102);
    auto fd_hessian = [&](const Vector& s0) {
        const double step = 1e-2;
        Matrix Hm(4, 4);
        auto F = [&](const Vector& s) {
            VariationalState st = base;
            st.s_hat = s;
            return energy_functional(p, st, v);
        };
        for (Index i = 0; i < 4; ++i) {
            for (Index j = 0; j < 4; ++j) {
                Vector a = s0, b = s0, c = s0, d = s0;
                a[i] += step; a[j] += step;
                b[i] += step; b[j] -= step;
                c[i] -= step; c[j] += step;
                d[i] -= step; d[j] -= step;
                Hm(i, j) = (F(a) - F(b) - F(c) + F(d)) / (4 * step * step);
            }
        }
        return Hm;
    };
    const Matrix h1 = fd_hessian(random_vector(4, 103, 2.0));
    const Matrix h2 = fd_hessian(random_vector(4, 104, 2.0));
    EXPECT_LT((h1 - h2).cwiseAbs().maxCoeff() / h1.cwiseAbs().maxCoeff(), 1e-6);

    // The implicit Hessian-vector product agrees with the finite-difference matrix.
    const InferenceModel<double> model(p);
    const Matrix Hcol = base.h_hat;
    for (Index k = 0; k < 4; ++k) {
        const Matrix e = Vector::Unit(4, k);
        const Matrix hv = detail::slab_hessian_times(model, Hcol, e);
        EXPECT_LT((hv.col(0) + h1.col(k)).cwiseAbs().maxCoeff(), 1e-5);
    }
}

TEST(ConjugateGradient, PhaseNeverDecreasesFunctional) {
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_model(10, 8, 110 + trial % 10);
        const Vector v = random_vector(10, 120 + trial % 10, 2.0);
        InferenceConfig cfg;
        cfg.method = InferenceMethod::conjugate_gradient;
        cfg.track_functional = true;
        cfg.cg_steps_per_iteration = 5;
        cfg.cg_precondition = trial >= 10;
        const InferenceModel<double> model(p);
        const auto res = run_estep<double>(model, v, cfg);
        double prev = 0.0;
        for (const auto& rec : res.trace) {
            if (rec.phase == UpdatePhase::cg_step) {
                EXPECT_GE(rec.functional[0], prev - 1e-9);
            }
            prev = rec.functional[0];
        }
    }
}

TEST(ConjugateGradient, FunctionalPerIterationOnly) {
    const auto p = random_model(9, 7, 125);
    const Matrix V = sample_visible(p, 5, 126);
    InferenceConfig cfg;
    cfg.method = InferenceMethod::conjugate_gradient;
    cfg.track_functional = true;
    const InferenceModel<double> model(p);
    const auto every = run_estep<double>(model, V, cfg);
    cfg.functional_every_phase = false;
    const auto sparse = run_estep<double>(model, V, cfg);
    ASSERT_EQ(every.trace.size(), sparse.trace.size());
    for (std::size_t k = 0; k < every.trace.size(); ++k) {
        if (sparse.trace[k].phase == UpdatePhase::cg_step) {
            EXPECT_EQ(sparse.trace[k].functional.size(), 0);
        } else {
            EXPECT_EQ(sparse.trace[k].functional, every.trace[k].functional);
        }
    }
}

TEST(ConjugateGradient, ConvergesToStationarySlabs) {
    const auto p = random_model(7, 6, 130);
    const Vector v = random_vector(7, 131, 2.0);
    const auto st0 = random_state(p, 132);
    const InferenceModel<double> model(p);
    BatchState<double> st{st0.h_hat, st0.s_hat, st0.slab_var_on, st0.slab_var_off};
    const Matrix projected = model.project(v);
    for (bool precondition : {false, true}) {
        BatchState<double> run = st;
        conjugate_gradient_slab_phase(model, projected, run, 60, 0, [](int) {}, precondition);
        VariationalState out = run.example(0);
        EXPECT_LT(relative_error(out.s_hat, s_star_loop(p, out, v)), 1e-8) << precondition;
    }
}

TEST(ConjugateGradient, EStepRespectsBoundAndRuns) {
    const auto p = random_model(6, 5, 140);
    const Vector v = random_vector(6, 141);
    InferenceConfig cfg;
    cfg.method = InferenceMethod::conjugate_gradient;
    cfg.track_functional = true;
    const auto res = cg_estep(p, v, cfg);
    EXPECT_LE(res.functional_trace.back(), exact_log_marginal(p, v) + 1e-9);
    EXPECT_GE(res.cg_restarts, 0);
    cfg.method = InferenceMethod::fixed_point;
    EXPECT_THROW(cg_estep(p, v, cfg), Error);
}

TEST(EnergyFunctional, SpikeOffLimit) {
    const auto p = one_unit(1.0, -30.0, 1.0, 1.0, 2.0, 3);
    const Vector v = random_vector(3, 150, 0.7);
    const auto st = init_state(p);
    EXPECT_NEAR(energy_functional(p, st, v), exact_log_marginal(p, v), 1e-3);
}

TEST(EnergyFunctional, LowerBoundsLogMarginal) {
    for (int trial = 0; trial < 30; ++trial) {
        const Index n = 1 + trial % 10;
        const auto p = random_model(4, n, 160 + trial);
        const Vector v = random_vector(4, 170 + trial, 2.0);
        EXPECT_LE(energy_functional(p, random_state(p, 180 + trial), v), exact_log_marginal(p, v) + 1e-9);
    }
}

TEST(EnergyFunctional, ExactForSingleUnitPosterior) {
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_model(3, 1, 190 + trial);
        const Vector v = random_vector(3, 200 + trial, 1.5);
        // Bayes rule with the two Gaussian evidences, and the Gaussian slab posterior.
        const double wbw = p.weighted_column_norms()[0];
        const double prec = p.alpha[0] + wbw;
        const double mean = (p.alpha[0] * p.mu[0] + p.W.col(0).dot(p.beta.cwiseProduct(v))) / prec;
        auto log_evidence = [&](bool on) {
            Matrix cov = p.beta.cwiseInverse().asDiagonal();
            Vector m = Vector::Zero(3);
            if (on) {
                cov += p.W.col(0) * p.W.col(0).transpose() / p.alpha[0];
                m = p.mu[0] * p.W.col(0);
            }
            const Vector z = v - m;
            return -0.5 * (3 * std::log(2 * M_PI) + std::log(cov.determinant()) + z.dot(cov.inverse() * z));
        };
        const double lo = log_evidence(true) + std::log(1.0 / (1.0 + std::exp(-p.b[0])));
        const double lf = log_evidence(false) + std::log(1.0 / (1.0 + std::exp(p.b[0])));
        const double p_on = 1.0 / (1.0 + std::exp(lf - lo));
        VariationalState st = init_state(p);
        st.h_hat[0] = p_on;
        st.s_hat[0] = mean;
        const double log_v = std::max(lo, lf) + std::log(std::exp(lo - std::max(lo, lf)) + std::exp(lf - std::max(lo, lf)));
        EXPECT_NEAR(energy_functional(p, st, v), log_v, 1e-9);
        EXPECT_NEAR(exact_log_marginal(p, v), log_v, 1e-9);
    }
}

// Monte-Carlo oracle for the closed form: F = E_Q[log p(v,s,h) - log Q(h,s)].
TEST(EnergyFunctional, MatchesMonteCarloExpectation) {
    const auto p = random_model(4, 3, 210);
    const Vector v = random_vector(4, 211);
    const auto st = random_state(p, 212);
    std::mt19937_64 rng(213);
    std::uniform_real_distribution<double> u;
    std::normal_distribution<double> normal;
    const int draws = 400000;
    double sum = 0.0, sum_sq = 0.0;
    for (int k = 0; k < draws; ++k) {
        CompleteConfiguration cfg{v, Vector(3), SpikeVector(3)};
        double log_q = 0.0;
        for (Index i = 0; i < 3; ++i) {
            const bool on = u(rng) < st.h_hat[i];
            const double var = on ? st.slab_var_on[i] : st.slab_var_off[i];
            cfg.h[i] = on;
            cfg.s[i] = (on ? st.s_hat[i] : 0.0) + std::sqrt(var) * normal(rng);
            log_q += std::log(on ? st.h_hat[i] : 1.0 - st.h_hat[i]) +
                     testing::log_normal_pdf(cfg.s[i], on ? st.s_hat[i] : 0.0, var);
        }
        const double x = log_joint(p, cfg) - log_q;
        sum += x;
        sum_sq += x * x;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sum_sq / draws - mean * mean) / draws);
    EXPECT_NEAR(energy_functional(p, st, v), mean, 4.0 * se);
}

TEST(Moments, DirectFormulas) {
    const auto p = one_unit(1.0, 0.0, 0.0, 1.0, 1.0);
    VariationalState st = init_state(p);
    st.h_hat[0] = 1.0 - 1e-7;
    st.s_hat[0] = 2.0;
    auto m = compute_moments(p, st);
    EXPECT_NEAR(m.e_hs[0], 2.0, 1e-6);
    EXPECT_NEAR(m.e_hs2[0], 4.5, 1e-6);

    st.h_hat[0] = 1e-7;
    m = compute_moments(p, st);
    EXPECT_NEAR(m.e_hs[0], 0.0, 1e-6);
    EXPECT_NEAR(m.e_s2[0], st.slab_var_off[0], 1e-6);
}

TEST(Moments, SatisfyJensenAndOrdering) {
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_model(5, 6, 220 + trial);
        const auto m = compute_moments(p, random_state(p, 230 + trial));
        for (Index i = 0; i < 6; ++i) {
            EXPECT_GE(m.e_hs2[i] + 1e-12, m.e_hs[i] * m.e_hs[i] / std::max(m.e_h[i], 1e-7));
            EXPECT_GE(m.e_s2[i], m.e_hs2[i]);
            EXPECT_GE(m.e_hs2[i], 0.0);
        }
    }
}

TEST(Moments, MatchMonteCarloSamplesFromQ) {
    const auto p = random_model(3, 2, 240);
    const auto st = random_state(p, 241);
    const auto m = compute_moments(p, st);
    std::mt19937_64 rng(242);
    std::uniform_real_distribution<double> u;
    std::normal_distribution<double> normal;
    const int draws = 100000;
    for (Index i = 0; i < 2; ++i) {
        Vector sums = Vector::Zero(4), squares = Vector::Zero(4);
        for (int k = 0; k < draws; ++k) {
            const bool on = u(rng) < st.h_hat[i];
            const double s = (on ? st.s_hat[i] : 0.0) +
                             std::sqrt(on ? st.slab_var_on[i] : st.slab_var_off[i]) * normal(rng);
            Vector x(4);
            x << (on ? 1.0 : 0.0), (on ? s : 0.0), (on ? s * s : 0.0), s * s;
            sums += x;
            squares += x.cwiseAbs2();
        }
        const Vector mean = sums / draws;
        const Vector se = ((squares / draws - mean.cwiseAbs2()) / draws).cwiseSqrt();
        const Vector analytic = (Vector(4) << m.e_h[i], m.e_hs[i], m.e_hs2[i], m.e_s2[i]).finished();
        for (Index k = 0; k < 4; ++k) {
            EXPECT_NEAR(mean[k], analytic[k], 3.0 * se[k] + 1e-12) << "unit " << i << " moment " << k;
        }
    }
}

TEST(ExactPosterior, StrongNegativeBiasSwitchesEverythingOff) {
    auto p = random_model(4, 3, 250);
    p.b.setConstant(-30.0);
    const auto post = exact_posterior(p, random_vector(4, 251));
    EXPECT_LT(post.p_on.maxCoeff(), 1e-8);
}

TEST(ExactPosterior, SingleUnitBayesRule) {
    const auto p = random_model(2, 1, 260);
    const Vector v = random_vector(2, 261);
    auto evidence = [&](bool on) {
        const Matrix cov = Matrix(p.beta.cwiseInverse().asDiagonal()) +
                           (on ? Matrix(p.W.col(0) * p.W.col(0).transpose() / p.alpha[0]) : Matrix::Zero(2, 2));
        const Vector z = v - (on ? Vector(p.mu[0] * p.W.col(0)) : Vector::Zero(2));
        return std::exp(-0.5 * z.dot(cov.inverse() * z)) / (2 * M_PI * std::sqrt(cov.determinant()));
    };
    const double prior_on = 1.0 / (1.0 + std::exp(-p.b[0]));
    const double on = prior_on * evidence(true);
    const double off = (1.0 - prior_on) * evidence(false);
    EXPECT_NEAR(exact_posterior(p, v).p_on[0], on / (on + off), 1e-12);
}

TEST(ExactPosterior, NormalizationIdentity) {
    const auto p = random_model(5, 4, 270);
    const Vector v = random_vector(5, 271);
    const auto post = exact_posterior(p, v);
    double total = 0.0;
    for (const auto& pat : post.patterns) {
        total += std::exp(pat.log_probability);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_NEAR(post.log_marginal, exact_log_marginal(p, v), 1e-12);
}

TEST(Inference, PermutationEquivariance) {
    const auto p = random_model(6, 5, 280);
    const Vector v = random_vector(6, 281);
    const std::vector<Index> perm{3, 0, 4, 1, 2};
    ModelParams q = p;
    for (Index i = 0; i < 5; ++i) {
        const Index j = perm[static_cast<std::size_t>(i)];
        q.W.col(i) = p.W.col(j);
        q.b[i] = p.b[j];
        q.mu[i] = p.mu[j];
        q.alpha[i] = p.alpha[j];
    }
    for (auto method : {InferenceMethod::fixed_point, InferenceMethod::conjugate_gradient}) {
        InferenceConfig cfg;
        cfg.method = method;
        const auto a = detail::single_estep(p, v, cfg).state;
        const auto b = detail::single_estep(q, v, cfg).state;
        for (Index i = 0; i < 5; ++i) {
            const Index j = perm[static_cast<std::size_t>(i)];
            EXPECT_NEAR(b.h_hat[i], a.h_hat[j], 1e-10);
            EXPECT_NEAR(b.s_hat[i], a.s_hat[j], 1e-10);
        }
    }
}

TEST(Inference, SequentialCoordinateAscentIsMonotoneAndAgrees) {
    auto p = random_model(8, 4, 290);
    p.W = testing::near_orthogonal_dictionary(8, 4, 0.05, 291);
    const Vector v = sample_visible(p, 1, 292).col(0);
    std::vector<double> trace;
    const auto seq = coordinate_ascent(p, v, 30, &trace);
    for (std::size_t k = 1; k < trace.size(); ++k) {
        EXPECT_GE(trace[k], trace[k - 1] - 1e-9);
    }
    InferenceConfig cfg;
    cfg.n_steps = 100;
    const auto par = fixed_point_estep(p, v, cfg).state;
    EXPECT_NEAR(energy_functional(p, par, v), trace.back(), 1e-3);
    EXPECT_LT((par.h_hat - seq.h_hat).cwiseAbs().maxCoeff(), 1e-2);
}

// Mutually inhibitory units: nearly identical dictionary columns.
ModelParams correlated_model(Index n, std::uint64_t seed) {
    const Index d = 6;
    Matrix W = testing::random_vector(d, seed).replicate(1, n);
    W += 0.05 * testing::near_orthogonal_dictionary(d, n, 1.0, seed + 1);
    renormalize_columns(W);
    return ModelParams::with_scalar_beta(W, Vector::Constant(n, 10.0), Vector::Constant(n, 1.0),
                                         Vector::Constant(n, 0.5), 4.0);
}

TEST(Inference, ClippingKeepsSlabsBounded) {
    for (int trial = 0; trial < 5; ++trial) {
        const auto p = correlated_model(12, 300 + trial);
        const Vector v = 3.0 * p.W.col(0) + random_vector(6, 310 + trial, 0.3);
        InferenceConfig cfg;
        cfg.damping = 1.0;
        cfg.n_steps = 20;
        const double short_run = fixed_point_estep(p, v, cfg).state.s_hat.cwiseAbs().maxCoeff();
        cfg.n_steps = 200;
        const double long_run = fixed_point_estep(p, v, cfg).state.s_hat.cwiseAbs().maxCoeff();
        EXPECT_LE(long_run, 10.0 * short_run);
    }
}

// Slab-only parallel updates with every spike held on: the mutual inhibition
// failure mode. Unclipped, the slabs flip sign and grow; clipped, they stay bounded.
TEST(Inference, ClippingStopsMutualInhibitionBlowup) {
    const auto p = correlated_model(12, 300);
    const Vector v = 3.0 * p.W.col(0) + random_vector(6, 310, 0.3);
    auto run = [&](bool clip) {
        VariationalState st = init_state(p);
        st.h_hat.setConstant(1.0);
        for (int k = 0; k < 30; ++k) {
            const Vector star = s_star(p, st, v);
            st.s_hat = clip ? Vector(clip_reflections(star, st.s_hat, 0.5)) : star;
        }
        return st.s_hat.cwiseAbs().maxCoeff();
    };
    EXPECT_GT(run(false), 1e6);
    EXPECT_LT(run(true), 10.0);
}

// With eta (1 + rho) <= 1 a clipped step maps s to (1 - eta - eta rho) s, so a
// slab can shrink toward zero but never change sign.
TEST(Inference, StrongDampingFreezesSlabSigns) {
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_model(6, 8, 360 + trial);
        const PatchBatch V = sample_visible(p, 5, 370 + trial);
        InferenceConfig cfg;
        cfg.damping = 0.5;
        cfg.rho = 0.5;
        const auto res = run_estep<double>(InferenceModel<double>(p), V, cfg);
        for (Index m = 0; m < 5; ++m) {
            for (Index i = 0; i < 8; ++i) {
                EXPECT_GE(res.state.s_hat(i, m) * p.mu[i], 0.0);
            }
        }
    }
}

TEST(Inference, BatchMatchesSingleExample) {
    const auto p = random_model(6, 5, 320);
    const PatchBatch V = sample_visible(p, 7, 321);
    const InferenceModel<double> model(p);
    InferenceConfig cfg;
    const auto batch = infer_batch<double>(model, V, cfg);
    for (Index m = 0; m < 7; ++m) {
        const auto single = fixed_point_estep(p, V.col(m), cfg).state;
        EXPECT_LT((batch.h_hat.col(m) - single.h_hat).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((batch.s_hat.col(m) - single.s_hat).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Inference, SinglePrecisionTracksDoublePrecision) {
    const auto p = random_model(8, 6, 330);
    const PatchBatch V = sample_visible(p, 20, 331);
    InferenceConfig cfg;
    const auto d = infer_batch<double>(InferenceModel<double>(p), V, cfg);
    const auto f = infer_batch<float>(InferenceModel<float>(p), V.cast<float>(), cfg);
    EXPECT_LT((f.h_hat.cast<double>() - d.h_hat).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Inference, WarmStartContinuesFromGivenState) {
    const auto p = random_model(6, 5, 340);
    const PatchBatch V = sample_visible(p, 3, 341);
    const InferenceModel<double> model(p);
    InferenceConfig cfg;
    cfg.n_steps = 10;
    const auto first = run_estep<double>(model, V, cfg);
    const auto second = run_estep<double>(model, V, cfg, &first.state);
    cfg.n_steps = 20;
    const auto straight = run_estep<double>(model, V, cfg);
    EXPECT_LT((second.state.h_hat - straight.state.h_hat).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Inference, TraceRecordsCountsAndFunctional) {
    const auto p = random_model(6, 5, 350);
    const PatchBatch V = sample_visible(p, 4, 351);
    InferenceConfig cfg;
    cfg.track_functional = true;
    cfg.n_steps = 5;
    const auto res = run_estep<double>(InferenceModel<double>(p), V, cfg);
    ASSERT_EQ(res.trace.size(), 1U + 2U * 5U);
    for (const auto& rec : res.trace) {
        EXPECT_EQ(rec.functional.size(), 4);
        EXPECT_EQ(rec.active_half.size(), 4);
        EXPECT_TRUE((rec.active_half.array() <= rec.active_percent.array()).all());
    }
    EXPECT_EQ(res.iterations, 5);
}

}  // namespace
}  // namespace s3c
