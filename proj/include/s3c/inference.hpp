#pragma once

#include <algorithm>
#include <chrono>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "s3c/model.hpp"
#include "s3c/parallel.hpp"
#include "s3c/types.hpp"

namespace s3c {

enum class InferenceMethod { fixed_point, conjugate_gradient };

inline const char* to_string(InferenceMethod m) {
    return m == InferenceMethod::fixed_point ? "fixed_point" : "conjugate_gradient";
}

inline InferenceMethod parse_inference_method(const std::string& name) {
    if (name == "fixed_point" || name == "heuristic") {
        return InferenceMethod::fixed_point;
    }
    if (name == "conjugate_gradient" || name == "cg") {
        return InferenceMethod::conjugate_gradient;
    }
    throw Error("unknown inference method '" + name + "' (expected fixed_point or conjugate_gradient)");
}

/// Settings of the variational E-step.
struct InferenceConfig {
    int n_steps = 20;         // K outer iterations
    double damping = 0.5;     // eta in (0, 1]
    double rho = 0.5;         // reflection clipping factor in [0, 1]
    InferenceMethod method = InferenceMethod::fixed_point;
    int cg_steps_per_iteration = 3;
    bool cg_precondition = false;  // Jacobi preconditioner diag(h_hat (alpha + W^T beta W)) in the CG phase
    bool track_functional = false;
    bool functional_every_phase = true;  // false: F only after the initial state and each spike update
    double eps_h = 1e-7;      // h_hat is kept in [eps_h, 1 - eps_h]
    bool clip = true;
    double tolerance = 0.0;   // stop once max |delta h_hat| < tolerance; 0 runs all K steps

    void check() const {
        if (n_steps < 1) {
            throw Error("inference n_steps must be >= 1");
        }
        if (!(damping > 0.0 && damping <= 1.0)) {
            throw Error("inference damping must lie in (0, 1]");
        }
        if (!(rho >= 0.0 && rho <= 1.0)) {
            throw Error("inference rho must lie in [0, 1]");
        }
        if (cg_steps_per_iteration < 1) {
            throw Error("cg_steps_per_iteration must be >= 1");
        }
        if (!(eps_h > 0.0 && eps_h < 0.5)) {
            throw Error("eps_h must lie in (0, 0.5)");
        }
    }
};

/// Variational parameters for one example. Q(h_i) = h_hat_i and
/// Q(s_i | h_i) = N(h_i s_hat_i, slab_var_on_i if h_i else slab_var_off_i).
struct VariationalState {
    Vector h_hat;
    Vector s_hat;
    Vector slab_var_on;   // 1 / (alpha_i + W_i^T beta W_i)
    Vector slab_var_off;  // 1 / alpha_i
};

/// States for a minibatch: column m of h_hat / s_hat belongs to example m.
/// The slab variances depend only on the model and are shared by all columns.
template <typename Scalar>
struct BatchState {
    MatrixX<Scalar> h_hat;
    MatrixX<Scalar> s_hat;
    VectorX<Scalar> slab_var_on;
    VectorX<Scalar> slab_var_off;

    Index size() const noexcept { return h_hat.cols(); }

    VariationalState example(Index m) const {
        return {h_hat.col(m).template cast<double>(), s_hat.col(m).template cast<double>(),
                slab_var_on.template cast<double>(), slab_var_off.template cast<double>()};
    }
};

struct PosteriorMoments {
    Vector e_h;    // E[h_i]
    Vector e_hs;   // E[h_i s_i]
    Vector e_hs2;  // E[h_i s_i^2]
    Vector e_s2;   // E[s_i^2]
};

/// Model quantities reused by every update, converted to the working precision.
template <typename Scalar>
struct InferenceModel {
    MatrixX<Scalar> W;
    MatrixX<Scalar> beta_W;       // diag(beta) W
    VectorX<Scalar> b, mu, alpha, beta;
    VectorX<Scalar> wbw;          // W_i^T beta W_i
    VectorX<Scalar> var_on, var_off;
    VectorX<Scalar> alpha_mu;
    VectorX<Scalar> spike_offset; // 1/2 log alpha - 1/2 log(alpha + wbw)
    VectorX<Scalar> log_sig_b, log_sig_neg_b;
    Scalar visible_log_norm;      // sum_d 1/2 (log beta_d - log 2 pi)
    Scalar slab_log_norm;         // sum_i 1/2 (log alpha_i - log 2 pi)

    explicit InferenceModel(const ModelParams& p) {
        const auto report = validate(p);
        for (const auto& v : report.violations) {
            if (v.kind != Violation::Kind::column_norm) {
                throw Error("invalid model: " + v.message);
            }
        }
        const Vector wbw_d = p.weighted_column_norms();
        W = p.W.cast<Scalar>();
        beta_W = (p.beta.asDiagonal() * p.W).cast<Scalar>();
        b = p.b.cast<Scalar>();
        mu = p.mu.cast<Scalar>();
        alpha = p.alpha.cast<Scalar>();
        beta = p.beta.cast<Scalar>();
        wbw = wbw_d.cast<Scalar>();
        var_on = (p.alpha + wbw_d).cwiseInverse().cast<Scalar>();
        var_off = p.alpha.cwiseInverse().cast<Scalar>();
        alpha_mu = p.alpha.cwiseProduct(p.mu).cast<Scalar>();
        spike_offset =
            (0.5 * (p.alpha.array().log() - (p.alpha + wbw_d).array().log())).matrix().cast<Scalar>();
        log_sig_b = p.b.unaryExpr([](double x) { return log_sigmoid(x); }).template cast<Scalar>();
        log_sig_neg_b = p.b.unaryExpr([](double x) { return log_sigmoid(-x); }).template cast<Scalar>();
        visible_log_norm = static_cast<Scalar>(
            0.5 * (p.beta.array().log().sum() - static_cast<double>(p.n_visible()) * kLog2Pi));
        slab_log_norm = static_cast<Scalar>(
            0.5 * (p.alpha.array().log().sum() - static_cast<double>(p.n_hidden()) * kLog2Pi));
    }

    Index n_hidden() const noexcept { return W.cols(); }
    Index n_visible() const noexcept { return W.rows(); }

    /// (beta W)^T V; constant for the whole E-step.
    MatrixX<Scalar> project(const Eigen::Ref<const MatrixX<Scalar>>& V) const {
        return beta_W.transpose() * V;
    }

    /// (beta W)^T W X without forming the N x N Gram matrix.
    MatrixX<Scalar> gram_times(const MatrixX<Scalar>& X) const {
        const MatrixX<Scalar> recon = W * X;
        return beta_W.transpose() * recon;
    }
};

// ---------------------------------------------------------------------------
// Elementwise rules

/// Reflection clipping. A sign flip whose magnitude exceeds rho |s_prev| is
/// shrunk to rho |s_prev| with the new sign. sign(0) counts as positive; a zero
/// previous value has nothing to reflect and never clips.
template <typename Scalar>
inline Scalar clip_reflection(Scalar s_star, Scalar s_prev, Scalar rho) {
    if (s_prev == Scalar(0)) {
        return s_star;
    }
    const bool star_positive = s_star >= Scalar(0);
    const bool prev_positive = s_prev >= Scalar(0);
    if (star_positive != prev_positive && std::abs(s_star) > rho * std::abs(s_prev)) {
        return (star_positive ? rho : -rho) * std::abs(s_prev);
    }
    return s_star;
}

template <typename Derived1, typename Derived2>
auto clip_reflections(const Eigen::MatrixBase<Derived1>& s_star, const Eigen::MatrixBase<Derived2>& s_prev,
                      typename Derived1::Scalar rho) {
    using Scalar = typename Derived1::Scalar;
    if (s_star.rows() != s_prev.rows() || s_star.cols() != s_prev.cols()) {
        throw DimensionError("clip_reflections: shape mismatch");
    }
    MatrixX<Scalar> out(s_star.rows(), s_star.cols());
    for (Index c = 0; c < out.cols(); ++c) {
        for (Index r = 0; r < out.rows(); ++r) {
            out(r, c) = clip_reflection<Scalar>(s_star(r, c), s_prev(r, c), rho);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched updates. V is D x M, states are N x M.

template <typename Scalar>
BatchState<Scalar> init_batch_state(const InferenceModel<Scalar>& model, Index m, double eps_h) {
    VectorX<Scalar> h0 = model.b.unaryExpr([](Scalar x) { return sigmoid(x); });
    h0 = h0.cwiseMax(Scalar(eps_h)).cwiseMin(Scalar(1.0 - eps_h));
    BatchState<Scalar> st;
    st.h_hat = h0.replicate(1, m);
    st.s_hat = model.mu.replicate(1, m);
    st.slab_var_on = model.var_on;
    st.slab_var_off = model.var_off;
    return st;
}

/// Individually optimal s_hat for every unit, all from the current state.
/// The sum over j != i is the full reconstruction minus the unit's own term.
template <typename Scalar>
MatrixX<Scalar> s_star_batch(const InferenceModel<Scalar>& model, const MatrixX<Scalar>& projected_v,
                             const MatrixX<Scalar>& h_hat, const MatrixX<Scalar>& s_hat) {
    const MatrixX<Scalar> hs = h_hat.cwiseProduct(s_hat);
    MatrixX<Scalar> numer = projected_v - model.gram_times(hs);
    numer += hs.cwiseProduct(model.wbw.replicate(1, hs.cols()));
    numer.colwise() += model.alpha_mu;
    const VectorX<Scalar> denom_inv = (model.alpha + model.wbw).cwiseInverse();
    return denom_inv.asDiagonal() * numer;
}

/// Individually optimal h_hat given the new s_hat and the previous h_hat.
template <typename Scalar>
MatrixX<Scalar> h_star_batch(const InferenceModel<Scalar>& model, const MatrixX<Scalar>& projected_v,
                             const MatrixX<Scalar>& h_prev, const MatrixX<Scalar>& s_new) {
    const Index m = s_new.cols();
    const MatrixX<Scalar> hs = h_prev.cwiseProduct(s_new);
    const MatrixX<Scalar> wbw = model.wbw.replicate(1, m);
    // s_i [ (beta W)^T (v - sum_{j != i} W_j s_j h_j) ]_i - 1/2 wbw_i s_i^2
    MatrixX<Scalar> arg = s_new.cwiseProduct(projected_v - model.gram_times(hs) + wbw.cwiseProduct(hs));
    arg -= Scalar(0.5) * wbw.cwiseProduct(s_new.cwiseAbs2());
    const MatrixX<Scalar> dev = s_new.colwise() - model.mu;
    arg -= Scalar(0.5) * model.alpha.asDiagonal() * dev.cwiseAbs2();
    arg.colwise() += model.b + model.spike_offset;
    return arg.unaryExpr([](Scalar x) { return sigmoid(x); });
}

/// E_Q[log p(v, s, h)] per example, for Q described by (h_hat, s_hat) and the
/// slab variances stored in `state`.
template <typename Scalar>
VectorX<double> expected_log_joint_batch(const InferenceModel<Scalar>& model,
                                         const Eigen::Ref<const MatrixX<Scalar>>& V,
                                         const BatchState<Scalar>& state) {
    const auto& H = state.h_hat;
    const auto& S = state.s_hat;
    const Index m = H.cols();
    const MatrixX<Scalar> hs = H.cwiseProduct(S);
    const MatrixX<Scalar> on_sq = (S.cwiseAbs2().colwise() + state.slab_var_on);
    const MatrixX<Scalar> e_hs2 = H.cwiseProduct(on_sq);
    const MatrixX<Scalar> ones = MatrixX<Scalar>::Ones(H.rows(), m);
    const MatrixX<Scalar> e_s2 = e_hs2 + state.slab_var_off.asDiagonal() * (ones - H);

    const RowVectorX<Scalar> spike_term =
        (model.log_sig_b.asDiagonal() * H + model.log_sig_neg_b.asDiagonal() * (ones - H)).colwise().sum();

    // E[(s - mu h)^2] = E[s^2] - 2 mu E[hs] + mu^2 E[h]
    const MatrixX<Scalar> slab_sq =
        e_s2 - Scalar(2) * model.mu.asDiagonal() * hs + model.mu.cwiseAbs2().asDiagonal() * H;
    const RowVectorX<Scalar> slab_term =
        (model.alpha.asDiagonal() * slab_sq).colwise().sum() * Scalar(-0.5);

    const MatrixX<Scalar> residual = V - model.W * hs;
    const RowVectorX<Scalar> fit = (model.beta.asDiagonal() * residual.cwiseAbs2()).colwise().sum();
    const RowVectorX<Scalar> spread =
        (model.wbw.asDiagonal() * (e_hs2 - hs.cwiseAbs2())).colwise().sum();
    const RowVectorX<Scalar> visible_term = (fit + spread) * Scalar(-0.5);

    VectorX<double> out(m);
    for (Index c = 0; c < m; ++c) {
        out[c] = static_cast<double>(spike_term[c]) + static_cast<double>(slab_term[c]) +
                 static_cast<double>(visible_term[c]) + static_cast<double>(model.slab_log_norm) +
                 static_cast<double>(model.visible_log_norm);
    }
    return out;
}

/// H(Q) per example.
template <typename Scalar>
VectorX<double> entropy_batch(const BatchState<Scalar>& state) {
    const Index n = state.h_hat.rows();
    const Index m = state.h_hat.cols();
    VectorX<double> out = VectorX<double>::Zero(m);
    for (Index c = 0; c < m; ++c) {
        double h = 0.0;
        for (Index i = 0; i < n; ++i) {
            const double q = static_cast<double>(state.h_hat(i, c));
            h += bernoulli_entropy(q) + q * gaussian_entropy(static_cast<double>(state.slab_var_on[i])) +
                 (1.0 - q) * gaussian_entropy(static_cast<double>(state.slab_var_off[i]));
        }
        out[c] = h;
    }
    return out;
}

/// Energy functional F(Q) = E_Q[log p(v,s,h)] + H(Q) per example.
template <typename Scalar>
VectorX<double> energy_functional_batch(const InferenceModel<Scalar>& model,
                                        const Eigen::Ref<const MatrixX<Scalar>>& V,
                                        const BatchState<Scalar>& state) {
    return expected_log_joint_batch(model, V, state) + entropy_batch(state);
}

// ---------------------------------------------------------------------------
// E-step drivers

enum class UpdatePhase { initial, slab, cg_step, spike };

/// Snapshot taken after an update. `functional` is empty unless tracking is on.
struct TraceRecord {
    int iteration;     // outer iteration, 0-based; -1 for the initial state
    UpdatePhase phase;
    int cg_step;       // 0-based CG step within the phase, -1 otherwise
    Vector functional; // per-example F
    Eigen::VectorXi active_half;     // #{h_hat > 0.5} per example
    Eigen::VectorXi active_percent;  // #{h_hat > 0.01} per example
    double elapsed_seconds;          // inference time only, excludes tracking
};

template <typename Scalar>
struct EStepResult {
    BatchState<Scalar> state;
    std::vector<TraceRecord> trace;
    int iterations = 0;
    long cg_restarts = 0;
    double seconds = 0.0;
};

namespace detail {

template <typename Scalar>
void require_finite(const MatrixX<Scalar>& X, const char* what, int iteration) {
    if (!X.allFinite()) {
        throw DivergenceError(std::string("non-finite values in ") + what + " during inference", iteration);
    }
}

template <typename Scalar>
void clamp_spikes(MatrixX<Scalar>& H, double eps_h) {
    H = H.cwiseMax(Scalar(eps_h)).cwiseMin(Scalar(1.0 - eps_h));
}

/// Gradient of F with respect to s_hat (h_hat fixed).
template <typename Scalar>
MatrixX<Scalar> slab_gradient(const InferenceModel<Scalar>& model, const MatrixX<Scalar>& projected_v,
                              const MatrixX<Scalar>& H, const MatrixX<Scalar>& S) {
    const MatrixX<Scalar> hs = H.cwiseProduct(S);
    MatrixX<Scalar> g = projected_v - model.gram_times(hs);
    g.colwise() += model.alpha_mu;
    g += model.wbw.asDiagonal() * hs;
    g -= (model.alpha + model.wbw).asDiagonal() * S;
    return H.cwiseProduct(g);
}

/// Product of the (positive definite) Hessian of -F in s_hat with P, via the
/// R-operator on the gradient: never materializes the N x N matrix.
template <typename Scalar>
MatrixX<Scalar> slab_hessian_times(const InferenceModel<Scalar>& model, const MatrixX<Scalar>& H,
                                   const MatrixX<Scalar>& P) {
    const MatrixX<Scalar> hp = H.cwiseProduct(P);
    MatrixX<Scalar> out = model.gram_times(hp);
    out -= model.wbw.asDiagonal() * hp;
    out += (model.alpha + model.wbw).asDiagonal() * P;
    return H.cwiseProduct(out);
}

}  // namespace detail

/// Linear CG on the quadratic -F(s_hat) with h_hat held fixed, optionally
/// Jacobi-preconditioned. Each step is an exact line search along its
/// direction, so F never decreases. Returns the number of restarts (loss of
/// conjugacy or non-positive curvature); `on_step(t)` runs after step t.
template <typename Scalar, typename OnStep>
long conjugate_gradient_slab_phase(const InferenceModel<Scalar>& model, const MatrixX<Scalar>& projected_v,
                                   BatchState<Scalar>& st, int steps, int iteration, OnStep&& on_step,
                                   bool precondition = false) {
    long restarts = 0;
    const Index m = st.s_hat.cols();
    const MatrixX<Scalar> H = st.h_hat;
    const MatrixX<Scalar> diag = (model.alpha + model.wbw).asDiagonal() * H;
    auto apply_preconditioner = [&](const MatrixX<Scalar>& r) -> MatrixX<Scalar> {
        return precondition ? MatrixX<Scalar>(r.cwiseQuotient(diag)) : r;
    };

    MatrixX<Scalar> R = detail::slab_gradient(model, projected_v, H, st.s_hat);
    MatrixX<Scalar> Z = apply_preconditioner(R);
    MatrixX<Scalar> P = Z;
    RowVectorX<Scalar> rz = R.cwiseProduct(Z).colwise().sum();

    for (int t = 0; t < steps; ++t) {
        const MatrixX<Scalar> HP = detail::slab_hessian_times(model, H, P);
        const RowVectorX<Scalar> rp = R.cwiseProduct(P).colwise().sum();
        const RowVectorX<Scalar> curvature = P.cwiseProduct(HP).colwise().sum();
        RowVectorX<Scalar> step = RowVectorX<Scalar>::Zero(m);
        std::vector<bool> bad_curvature(static_cast<std::size_t>(m), false);
        for (Index c = 0; c < m; ++c) {
            const Scalar pc = curvature[c];
            if (!(pc > Scalar(0)) || !std::isfinite(static_cast<double>(pc))) {
                bad_curvature[static_cast<std::size_t>(c)] = rz[c] > Scalar(0);
            } else {
                step[c] = rp[c] / pc;
            }
        }
        st.s_hat += P * step.asDiagonal();
        detail::require_finite(st.s_hat, "s_hat", iteration);
        if ((t + 1) % 32 == 0) {
            // Refresh the recursively updated residual against drift.
            R = detail::slab_gradient(model, projected_v, H, st.s_hat);
        } else {
            R -= HP * step.asDiagonal();
        }

        const MatrixX<Scalar> Z_new = apply_preconditioner(R);
        const RowVectorX<Scalar> rz_new = R.cwiseProduct(Z_new).colwise().sum();
        const RowVectorX<Scalar> overlap = R.cwiseProduct(Z).colwise().sum();
        RowVectorX<Scalar> beta(m);
        for (Index c = 0; c < m; ++c) {
            const bool lost_conjugacy = std::abs(overlap[c]) >= Scalar(0.2) * rz_new[c];
            if (rz[c] <= Scalar(0) || rz_new[c] <= Scalar(0)) {
                beta[c] = Scalar(0);
            } else if (lost_conjugacy || bad_curvature[static_cast<std::size_t>(c)]) {
                beta[c] = Scalar(0);
                ++restarts;
            } else {
                beta[c] = rz_new[c] / rz[c];
            }
        }
        P = Z_new + P * beta.asDiagonal();
        Z = Z_new;
        rz = rz_new;
        on_step(t);
    }
    return restarts;
}

template <typename Scalar>
class EStepRunner {
public:
    EStepRunner(const InferenceModel<Scalar>& model, const InferenceConfig& cfg)
        : model_(model), cfg_(cfg) {
        cfg_.check();
    }

    EStepResult<Scalar> run(const Eigen::Ref<const MatrixX<Scalar>>& V,
                            const BatchState<Scalar>* warm_start = nullptr) {
        if (V.rows() != model_.n_visible()) {
            throw DimensionError("visible batch has " + std::to_string(V.rows()) +
                                 " rows, model expects D=" + std::to_string(model_.n_visible()));
        }
        result_ = EStepResult<Scalar>{};
        V_ = &V;
        elapsed_ = 0.0;
        auto t0 = Clock::now();

        auto& st = result_.state;
        if (warm_start != nullptr) {
            if (warm_start->size() != V.cols() || warm_start->h_hat.rows() != model_.n_hidden()) {
                throw DimensionError("warm-start state does not match the batch");
            }
            st = *warm_start;
            st.slab_var_on = model_.var_on;
            st.slab_var_off = model_.var_off;
        } else {
            st = init_batch_state(model_, V.cols(), cfg_.eps_h);
        }
        projected_ = model_.project(V);
        t0 = record(UpdatePhase::initial, -1, -1, t0);

        const Scalar eta = static_cast<Scalar>(cfg_.damping);
        for (int k = 0; k < cfg_.n_steps; ++k) {
            if (cfg_.method == InferenceMethod::fixed_point) {
                MatrixX<Scalar> target = s_star_batch(model_, projected_, st.h_hat, st.s_hat);
                if (cfg_.clip) {
                    target = clip_reflections(target, st.s_hat, static_cast<Scalar>(cfg_.rho));
                }
                st.s_hat = eta * target + (Scalar(1) - eta) * st.s_hat;
                detail::require_finite(st.s_hat, "s_hat", k);
                t0 = record(UpdatePhase::slab, k, -1, t0);
            } else {
                t0 = conjugate_gradient_phase(k, t0);
            }

            MatrixX<Scalar> h_target = h_star_batch(model_, projected_, st.h_hat, st.s_hat);
            MatrixX<Scalar> h_new = eta * h_target + (Scalar(1) - eta) * st.h_hat;
            detail::clamp_spikes(h_new, cfg_.eps_h);
            detail::require_finite(h_new, "h_hat", k);
            const Scalar change = (h_new - st.h_hat).cwiseAbs().maxCoeff();
            st.h_hat = std::move(h_new);
            result_.iterations = k + 1;
            t0 = record(UpdatePhase::spike, k, -1, t0);
            if (cfg_.tolerance > 0.0 && static_cast<double>(change) < cfg_.tolerance) {
                break;
            }
        }
        elapsed_ += seconds_since(t0);
        result_.seconds = elapsed_;
        V_ = nullptr;
        return std::move(result_);
    }

private:
    using Clock = std::chrono::steady_clock;

    static double seconds_since(Clock::time_point t) {
        return std::chrono::duration<double>(Clock::now() - t).count();
    }

    /// Appends a trace record; returns the time point from which inference timing resumes.
    Clock::time_point record(UpdatePhase phase, int iteration, int cg_step, Clock::time_point t0) {
        elapsed_ += seconds_since(t0);
        const auto& st = result_.state;
        TraceRecord rec{iteration, phase, cg_step, Vector(), Eigen::VectorXi(), Eigen::VectorXi(), elapsed_};
        if (cfg_.track_functional &&
            (cfg_.functional_every_phase || phase == UpdatePhase::spike || phase == UpdatePhase::initial)) {
            rec.functional = energy_functional_batch(model_, *V_, st);
        }
        rec.active_half = (st.h_hat.array() > Scalar(0.5)).template cast<int>().colwise().sum().transpose();
        rec.active_percent = (st.h_hat.array() > Scalar(0.01)).template cast<int>().colwise().sum().transpose();
        result_.trace.push_back(std::move(rec));
        return Clock::now();
    }

    Clock::time_point conjugate_gradient_phase(int iteration, Clock::time_point t0) {
        result_.cg_restarts += conjugate_gradient_slab_phase(
            model_, projected_, result_.state, cfg_.cg_steps_per_iteration, iteration,
            [&](int step) { t0 = record(UpdatePhase::cg_step, iteration, step, t0); }, cfg_.cg_precondition);
        return t0;
    }

    const InferenceModel<Scalar>& model_;
    InferenceConfig cfg_;
    EStepResult<Scalar> result_;
    const Eigen::Ref<const MatrixX<Scalar>>* V_ = nullptr;
    MatrixX<Scalar> projected_;
    double elapsed_ = 0.0;
};

/// One E-step over a batch (single thread, full trace).
template <typename Scalar>
EStepResult<Scalar> run_estep(const InferenceModel<Scalar>& model, const Eigen::Ref<const MatrixX<Scalar>>& V,
                              const InferenceConfig& cfg, const BatchState<Scalar>* warm_start = nullptr) {
    EStepRunner<Scalar> runner(model, cfg);
    return runner.run(V, warm_start);
}

inline constexpr Index kInferenceChunk = 256;

/// E-step over a large batch, split into fixed-size column chunks processed in
/// parallel. Chunking is independent of the thread count, so results are too.
template <typename Scalar>
BatchState<Scalar> infer_batch(const InferenceModel<Scalar>& model, const Eigen::Ref<const MatrixX<Scalar>>& V,
                               InferenceConfig cfg, const BatchState<Scalar>* warm_start = nullptr) {
    cfg.track_functional = false;
    const Index m = V.cols();
    BatchState<Scalar> out;
    out.h_hat.resize(model.n_hidden(), m);
    out.s_hat.resize(model.n_hidden(), m);
    out.slab_var_on = model.var_on;
    out.slab_var_off = model.var_off;
    const Index chunks = (m + kInferenceChunk - 1) / kInferenceChunk;
    parallel_for(chunks, [&](Index c) {
        const Index start = c * kInferenceChunk;
        const Index len = std::min(kInferenceChunk, m - start);
        std::optional<BatchState<Scalar>> warm;
        if (warm_start != nullptr) {
            warm = BatchState<Scalar>{warm_start->h_hat.middleCols(start, len),
                                      warm_start->s_hat.middleCols(start, len), warm_start->slab_var_on,
                                      warm_start->slab_var_off};
        }
        auto res = run_estep<Scalar>(model, V.middleCols(start, len), cfg, warm ? &*warm : nullptr);
        out.h_hat.middleCols(start, len) = res.state.h_hat;
        out.s_hat.middleCols(start, len) = res.state.s_hat;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Single-example interface on float64 parameters

namespace detail {

inline BatchState<double> as_batch(const VariationalState& st) {
    return {st.h_hat, st.s_hat, st.slab_var_on, st.slab_var_off};
}

inline void require_state(const ModelParams& p, const VariationalState& st) {
    const Index n = p.n_hidden();
    if (st.h_hat.size() != n || st.s_hat.size() != n || st.slab_var_on.size() != n ||
        st.slab_var_off.size() != n) {
        throw DimensionError("variational state does not match the model (N=" + std::to_string(n) + ")");
    }
}

inline void require_visible(const ModelParams& p, const Vector& v) {
    if (v.size() != p.n_visible()) {
        throw DimensionError("visible vector has length " + std::to_string(v.size()) + ", model expects D=" +
                             std::to_string(p.n_visible()));
    }
}

}  // namespace detail

inline VariationalState init_state(const ModelParams& p, double eps_h = 1e-7) {
    const InferenceModel<double> model(p);
    return init_batch_state(model, 1, eps_h).example(0);
}

inline Vector s_star(const ModelParams& p, const VariationalState& st, const Vector& v) {
    detail::require_state(p, st);
    detail::require_visible(p, v);
    const InferenceModel<double> model(p);
    return s_star_batch<double>(model, model.project(v), st.h_hat, st.s_hat).col(0);
}

inline Vector h_star(const ModelParams& p, const VariationalState& st, const Vector& s_new, const Vector& v) {
    detail::require_state(p, st);
    detail::require_visible(p, v);
    const InferenceModel<double> model(p);
    return h_star_batch<double>(model, model.project(v), st.h_hat, s_new).col(0);
}

inline double energy_functional(const ModelParams& p, const VariationalState& st, const Vector& v) {
    detail::require_state(p, st);
    detail::require_visible(p, v);
    const InferenceModel<double> model(p);
    return energy_functional_batch<double>(model, v, detail::as_batch(st))[0];
}

inline PosteriorMoments compute_moments(const ModelParams& p, const VariationalState& st) {
    detail::require_state(p, st);
    PosteriorMoments out;
    out.e_h = st.h_hat;
    out.e_hs = st.h_hat.cwiseProduct(st.s_hat);
    out.e_hs2 = st.h_hat.cwiseProduct(st.s_hat.cwiseAbs2() + st.slab_var_on);
    out.e_s2 = out.e_hs2 + (Vector::Ones(st.h_hat.size()) - st.h_hat).cwiseProduct(st.slab_var_off);
    return out;
}

/// Result of a single-example E-step: final state and F after every half-update
/// (empty unless tracking is enabled).
struct SingleEStep {
    VariationalState state;
    std::vector<double> functional_trace;
    long cg_restarts = 0;
};

namespace detail {

inline SingleEStep single_estep(const ModelParams& p, const Vector& v, const InferenceConfig& cfg) {
    detail::require_visible(p, v);
    const InferenceModel<double> model(p);
    auto res = run_estep<double>(model, v, cfg);
    SingleEStep out{res.state.example(0), {}, res.cg_restarts};
    for (const auto& rec : res.trace) {
        if (rec.functional.size() == 1) {
            out.functional_trace.push_back(rec.functional[0]);
        }
    }
    return out;
}

}  // namespace detail

inline SingleEStep fixed_point_estep(const ModelParams& p, const Vector& v, InferenceConfig cfg) {
    if (cfg.method != InferenceMethod::fixed_point) {
        throw Error("fixed_point_estep requires method = fixed_point");
    }
    return detail::single_estep(p, v, cfg);
}

inline SingleEStep cg_estep(const ModelParams& p, const Vector& v, InferenceConfig cfg) {
    if (cfg.method != InferenceMethod::conjugate_gradient) {
        throw Error("cg_estep requires method = conjugate_gradient");
    }
    return detail::single_estep(p, v, cfg);
}

}  // namespace s3c
