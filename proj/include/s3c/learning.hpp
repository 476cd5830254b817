#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "s3c/inference.hpp"
#include "s3c/model.hpp"

namespace s3c {

struct InitConfig {
    double bias = -2.0;
    double mu = 1.0;
    double alpha = 1.0;
    double beta = 1.0;
};

/// W columns isotropic Gaussian then normalized; constant b, mu, alpha, beta.
inline ModelParams init_params(Index n_visible, Index n_hidden, std::uint64_t seed,
                               const InitConfig& cfg = {}) {
    if (n_visible < 1 || n_hidden < 1) {
        throw Error("init_params needs D >= 1 and N >= 1");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix W(n_visible, n_hidden);
    for (Index c = 0; c < n_hidden; ++c) {
        for (Index r = 0; r < n_visible; ++r) {
            W(r, c) = normal(rng);
        }
    }
    renormalize_columns(W);
    return ModelParams::with_scalar_beta(std::move(W), Vector::Constant(n_hidden, cfg.bias),
                                         Vector::Constant(n_hidden, cfg.mu),
                                         Vector::Constant(n_hidden, cfg.alpha), cfg.beta);
}

// Defaults from a pilot on synthetic recovery data (D=16, N=8, batch 100).
struct LearningRates {
    double W = 0.1;
    double b = 0.1;
    double mu = 0.1;
    double alpha = 0.1;
    double beta = 0.1;
};

struct Bounds {
    double lo;
    double hi;
};

struct TrainConfig {
    Index n_hidden = 64;
    Index batch_size = 100;
    int n_epochs = 5;
    LearningRates learning_rates;
    Bounds alpha_bounds{1e-3, 1e6};
    Bounds beta_bounds{1e-3, 1e6};
    InferenceConfig inference;
    InitConfig init;
    std::uint64_t seed = 0;
    bool shuffle = true;
    bool warm_start = false;
    bool single_precision = false;  // run the E-step in float32

    void check() const {
        const auto& lr = learning_rates;
        if (!(lr.W > 0 && lr.b > 0 && lr.mu > 0 && lr.alpha > 0 && lr.beta > 0)) {
            throw Error("learning rates must be positive");
        }
        for (const Bounds& bnd : {alpha_bounds, beta_bounds}) {
            if (!(bnd.lo > 0.0) || !(bnd.hi >= bnd.lo)) {
                throw Error("precision bounds must satisfy 0 < lo <= hi");
            }
        }
        if (batch_size < 1 || n_epochs < 1 || n_hidden < 1) {
            throw Error("batch_size, n_epochs and n_hidden must be positive");
        }
        inference.check();
    }
};

/// Gradients of the M-step objective, one member per parameter group.
struct Gradients {
    Matrix W;
    Vector b;
    Vector mu;
    Vector alpha;
    Vector beta;

    bool all_finite() const {
        return W.allFinite() && b.allFinite() && mu.allFinite() && alpha.allFinite() && beta.allFinite();
    }
};

struct BatchDiagnostics {
    int epoch;
    Index batch;
    double mean_functional;
    double grad_norm_W;
    double grad_norm_b;
    double grad_norm_mu;
    double grad_norm_alpha;
    double grad_norm_beta;
    double mean_h;
    double frac_h_below_001;
};

struct TrainDiagnostics {
    std::vector<BatchDiagnostics> batches;

    /// Mean of the per-batch F values of each epoch.
    std::vector<double> epoch_mean_functional() const {
        std::vector<double> sums;
        std::vector<int> counts;
        for (const auto& b : batches) {
            const auto e = static_cast<std::size_t>(b.epoch);
            if (sums.size() <= e) {
                sums.resize(e + 1, 0.0);
                counts.resize(e + 1, 0);
            }
            sums[e] += b.mean_functional;
            counts[e] += 1;
        }
        for (std::size_t e = 0; e < sums.size(); ++e) {
            sums[e] /= std::max(counts[e], 1);
        }
        return sums;
    }
};

namespace detail {

inline void require_batch(const ModelParams& p, const PatchBatch& V, const BatchState<double>& st) {
    if (V.rows() != p.n_visible()) {
        throw DimensionError("batch has " + std::to_string(V.rows()) + " rows, model expects D=" +
                             std::to_string(p.n_visible()));
    }
    if (st.size() != V.cols() || st.h_hat.rows() != p.n_hidden() || st.s_hat.rows() != p.n_hidden() ||
        st.s_hat.cols() != V.cols() || st.slab_var_on.size() != p.n_hidden() ||
        st.slab_var_off.size() != p.n_hidden()) {
        throw DimensionError("need one variational state per example, sized for the model");
    }
    if (V.cols() == 0) {
        throw DimensionError("empty batch");
    }
}

}  // namespace detail

inline BatchState<double> stack_states(const std::vector<VariationalState>& states) {
    if (states.empty()) {
        throw DimensionError("no variational states");
    }
    const Index n = states.front().h_hat.size();
    BatchState<double> st{Matrix(n, static_cast<Index>(states.size())), Matrix(n, static_cast<Index>(states.size())),
                          states.front().slab_var_on, states.front().slab_var_off};
    for (std::size_t m = 0; m < states.size(); ++m) {
        if (states[m].h_hat.size() != n || states[m].s_hat.size() != n) {
            throw DimensionError("variational states have inconsistent sizes");
        }
        st.h_hat.col(static_cast<Index>(m)) = states[m].h_hat;
        st.s_hat.col(static_cast<Index>(m)) = states[m].s_hat;
    }
    return st;
}

/// Batch mean of E_Q[log p(v, s, h)]: the parameter-dependent part of F.
/// Q, including its slab variances, is held fixed.
inline double mstep_objective(const ModelParams& p, const PatchBatch& V, const BatchState<double>& states) {
    detail::require_batch(p, V, states);
    const InferenceModel<double> model(p);
    return expected_log_joint_batch<double>(model, V, states).mean();
}

inline double mstep_objective(const ModelParams& p, const PatchBatch& V,
                              const std::vector<VariationalState>& states) {
    return mstep_objective(p, V, stack_states(states));
}

/// Analytic gradients of `mstep_objective`. Cross moments factorize across units,
/// E[h_i s_i h_j s_j] = E[h_i s_i] E[h_j s_j] for i != j.
inline Gradients mstep_gradients(const ModelParams& p, const PatchBatch& V, const BatchState<double>& st) {
    detail::require_batch(p, V, st);
    const double inv_m = 1.0 / static_cast<double>(V.cols());
    const Matrix& H = st.h_hat;
    const Matrix hs = H.cwiseProduct(st.s_hat);
    const Matrix e_hs2 = H.cwiseProduct(st.s_hat.cwiseAbs2().colwise() + st.slab_var_on);
    const Matrix e_s2 = e_hs2 + st.slab_var_off.asDiagonal() * (Matrix::Ones(H.rows(), H.cols()) - H);
    const Matrix spread = e_hs2 - hs.cwiseAbs2();  // E[h s^2] - E[h s]^2
    const Matrix residual = V - p.W * hs;

    const Vector mean_h = H.rowwise().mean();
    const Vector mean_hs = hs.rowwise().mean();
    const Vector mean_spread = spread.rowwise().mean();

    Gradients g;
    g.b = mean_h - p.b.unaryExpr([](double x) { return sigmoid(x); });
    g.mu = p.alpha.cwiseProduct(mean_hs - p.mu.cwiseProduct(mean_h));
    const Vector slab_sq = (e_s2 - 2.0 * p.mu.asDiagonal() * hs + p.mu.cwiseAbs2().asDiagonal() * H).rowwise().mean();
    g.alpha = 0.5 * p.alpha.cwiseInverse() - 0.5 * slab_sq;
    const Vector visible_sq =
        (residual.cwiseAbs2() + p.W.cwiseAbs2() * spread).rowwise().mean();
    g.beta = 0.5 * p.beta.cwiseInverse() - 0.5 * visible_sq;
    g.W = p.beta.asDiagonal() * ((residual * hs.transpose()) * inv_m - p.W * mean_spread.asDiagonal());
    return g;
}

inline Gradients mstep_gradients(const ModelParams& p, const PatchBatch& V,
                                 const std::vector<VariationalState>& states) {
    return mstep_gradients(p, V, stack_states(states));
}

/// One ascent step per group, then projection back onto the constraint set.
inline ModelParams mstep_update(const ModelParams& p, const Gradients& g, const TrainConfig& cfg) {
    if (!g.all_finite()) {
        throw Error("non-finite M-step gradient");
    }
    const auto& lr = cfg.learning_rates;
    ModelParams out = p;
    out.W += lr.W * g.W;
    renormalize_columns(out.W);
    out.b += lr.b * g.b;
    out.mu += lr.mu * g.mu;
    out.alpha = (out.alpha + lr.alpha * g.alpha).cwiseMax(cfg.alpha_bounds.lo).cwiseMin(cfg.alpha_bounds.hi);
    out.beta = (out.beta + lr.beta * g.beta).cwiseMax(cfg.beta_bounds.lo).cwiseMin(cfg.beta_bounds.hi);
    if (!out.W.allFinite() || !out.b.allFinite() || !out.mu.allFinite()) {
        throw Error("non-finite parameters after M-step update");
    }
    return out;
}

/// Runs the configured E-step on a batch in the configured precision.
inline BatchState<double> infer_states(const ModelParams& p, const PatchBatch& V, const InferenceConfig& cfg,
                                       bool single_precision, const BatchState<double>* warm = nullptr) {
    if (single_precision) {
        const InferenceModel<float> model(p);
        const MatrixX<float> Vf = V.cast<float>();
        std::optional<BatchState<float>> warm_f;
        if (warm != nullptr) {
            warm_f = BatchState<float>{warm->h_hat.cast<float>(), warm->s_hat.cast<float>(), model.var_on,
                                       model.var_off};
        }
        const auto st = infer_batch<float>(model, Vf, cfg, warm_f ? &*warm_f : nullptr);
        const InferenceModel<double> model_d(p);
        return {st.h_hat.cast<double>(), st.s_hat.cast<double>(), model_d.var_on, model_d.var_off};
    }
    const InferenceModel<double> model(p);
    return infer_batch<double>(model, V, cfg, warm);
}

struct TrainResult {
    ModelParams params;
    TrainDiagnostics diagnostics;
};

/// Divergence during training, with the parameters the failing batch started
/// from and the diagnostics collected so far.
class TrainingDiverged : public DivergenceError {
public:
    TrainingDiverged(const std::string& what, long batch, ModelParams last, TrainDiagnostics diag)
        : DivergenceError(what, batch), params(std::move(last)), diagnostics(std::move(diag)) {}

    ModelParams params;
    TrainDiagnostics diagnostics;
};

using EpochCallback = std::function<void(int epoch, const ModelParams&, const TrainDiagnostics&)>;

/// Variational EM: for every minibatch an E-step from a fresh (or warm) state,
/// then one gradient step on the M-step objective.
inline TrainResult train(const PatchBatch& data, ModelParams params, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
    cfg.check();
    if (data.rows() != params.n_visible()) {
        throw DimensionError("training data has " + std::to_string(data.rows()) + " rows, model expects D=" +
                             std::to_string(params.n_visible()));
    }
    if (data.cols() == 0) {
        throw Error("no training data");
    }
    const Index m = data.cols();
    const Index n = params.n_hidden();
    std::mt19937_64 rng(cfg.seed ^ 0x5DEECE66DULL);
    std::vector<Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), Index{0});

    Matrix warm_h;
    Matrix warm_s;
    if (cfg.warm_start) {
        const InferenceModel<double> model(params);
        const auto init = init_batch_state(model, m, cfg.inference.eps_h);
        warm_h = init.h_hat;
        warm_s = init.s_hat;
    }

    TrainResult result{std::move(params), {}};
    Index global_batch = 0;
    for (int epoch = 0; epoch < cfg.n_epochs; ++epoch) {
        if (cfg.shuffle) {
            std::shuffle(order.begin(), order.end(), rng);
        }
        for (Index start = 0; start < m; start += cfg.batch_size, ++global_batch) {
            const Index len = std::min(cfg.batch_size, m - start);
            PatchBatch V(data.rows(), len);
            for (Index c = 0; c < len; ++c) {
                V.col(c) = data.col(order[static_cast<std::size_t>(start + c)]);
            }
            auto& p = result.params;
            std::optional<BatchState<double>> warm;
            if (cfg.warm_start) {
                const InferenceModel<double> model(p);
                warm = BatchState<double>{Matrix(n, len), Matrix(n, len), model.var_on, model.var_off};
                for (Index c = 0; c < len; ++c) {
                    warm->h_hat.col(c) = warm_h.col(order[static_cast<std::size_t>(start + c)]);
                    warm->s_hat.col(c) = warm_s.col(order[static_cast<std::size_t>(start + c)]);
                }
            }
            BatchState<double> st;
            try {
                st = infer_states(p, V, cfg.inference, cfg.single_precision, warm ? &*warm : nullptr);
            } catch (const DivergenceError& e) {
                throw TrainingDiverged(std::string("training diverged in the E-step (") + e.what() + ")",
                                       static_cast<long>(global_batch), p, result.diagnostics);
            }
            if (cfg.warm_start) {
                for (Index c = 0; c < len; ++c) {
                    warm_h.col(order[static_cast<std::size_t>(start + c)]) = st.h_hat.col(c);
                    warm_s.col(order[static_cast<std::size_t>(start + c)]) = st.s_hat.col(c);
                }
            }

            const InferenceModel<double> model(p);
            const Vector f_end = energy_functional_batch<double>(model, V, st);
            // An E-step that ends below where it started has run away (parallel
            // updates on a coherent dictionary); its gradient would wreck W.
            const Vector f_start =
                energy_functional_batch<double>(model, V, warm ? *warm : init_batch_state(model, len, cfg.inference.eps_h));
            Index worst = 0;
            const double gain = (f_end - f_start).minCoeff(&worst);
            if (!(gain >= -1e-6 * (1.0 + std::abs(f_start[worst])))) {
                std::ostringstream msg;
                msg << "E-step runaway on example " << worst << " of the batch: F fell from " << f_start[worst]
                    << " to " << f_end[worst]
                    << " (try a smaller inference.damping or inference.method = conjugate_gradient)";
                throw TrainingDiverged(msg.str(), static_cast<long>(global_batch), p, result.diagnostics);
            }
            const double mean_f = f_end.mean();
            if (!std::isfinite(mean_f)) {
                throw TrainingDiverged("training diverged: non-finite energy functional",
                                       static_cast<long>(global_batch), p, result.diagnostics);
            }
            const Gradients g = mstep_gradients(p, V, st);
            if (!g.all_finite()) {
                throw TrainingDiverged("training diverged: non-finite gradient", static_cast<long>(global_batch), p,
                                       result.diagnostics);
            }
            result.diagnostics.batches.push_back(
                {epoch, global_batch, mean_f, g.W.norm(), g.b.norm(), g.mu.norm(), g.alpha.norm(), g.beta.norm(),
                 st.h_hat.mean(), (st.h_hat.array() < 0.01).template cast<double>().mean()});
            p = mstep_update(p, g, cfg);
        }
        if (on_epoch) {
            on_epoch(epoch, result.params, result.diagnostics);
        }
    }
    return result;
}

/// Trains from `init_params(D, cfg.n_hidden, cfg.seed, cfg.init)`.
inline TrainResult train(const PatchBatch& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    return train(data, init_params(data.rows(), cfg.n_hidden, cfg.seed, cfg.init), cfg, on_epoch);
}

}  // namespace s3c
