#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "s3c/inference.hpp"

namespace s3c {

/*
 * Speed comparison of the two E-steps on a fixed example set.
 *
 * Every configuration in the grids first runs max_iterations outer iterations
 * with the mean functional recorded after each one. The common target is the
 * best mean F reached by any run, minus `slack` nats. A run's time to target is
 * the inference time (functional evaluation excluded) up to the end of the
 * first iteration whose mean F reaches the target. That first pass counts as
 * one timing; the other repeats - 1 rerun the configuration up to that
 * iteration only, untracked, and the minimum is kept. The F trajectories
 * themselves are deterministic.
 */
struct BenchConfig {
    Index examples = 100;
    int max_iterations = 100;
    double slack = 0.5;
    int repeats = 3;
    std::vector<double> fp_damping{0.3, 0.5, 0.7, 0.9, 1.0};
    std::vector<double> cg_damping{0.3, 0.5, 0.7, 0.9, 1.0};
    std::vector<int> cg_steps{1, 2, 3, 5, 10};
    bool single_precision = false;
    std::uint64_t seed = 0;

    void check() const {
        if (examples < 1 || max_iterations < 1 || repeats < 1 || !(slack >= 0.0)) {
            throw Error("bench needs examples, max_iterations, repeats >= 1 and slack >= 0");
        }
        if (fp_damping.empty() && cg_damping.empty()) {
            throw Error("bench grids are empty");
        }
        for (double eta : fp_damping) {
            if (!(eta > 0.0 && eta <= 1.0)) {
                throw Error("bench damping values must lie in (0, 1]");
            }
        }
        for (double eta : cg_damping) {
            if (!(eta > 0.0 && eta <= 1.0)) {
                throw Error("bench damping values must lie in (0, 1]");
            }
        }
        for (int k : cg_steps) {
            if (k < 1) {
                throw Error("bench CG step counts must be positive");
            }
        }
    }
};

struct BenchRun {
    InferenceMethod method;
    double damping;
    int cg_steps;                   // 0 for the heuristic method
    std::vector<double> mean_f;     // after each outer iteration
    std::vector<double> seconds;    // cumulative, from the tracked pass
    double final_f = 0.0;
    double best_f = 0.0;
    std::optional<int> iterations_to_target;
    double time_to_target = std::numeric_limits<double>::infinity();
};

struct BenchResult {
    double target = 0.0;
    std::vector<BenchRun> runs;

    /// Fastest time to target of a method (infinity if no run reached it).
    double best_time(InferenceMethod m) const {
        double t = std::numeric_limits<double>::infinity();
        for (const auto& r : runs) {
            if (r.method == m) {
                t = std::min(t, r.time_to_target);
            }
        }
        return t;
    }
};

/// Columns of V chosen by a seeded draw without replacement (all of them if
/// there are fewer than `count`), kept in their original order.
inline PatchBatch bench_examples(const PatchBatch& V, Index count, std::uint64_t seed) {
    if (V.cols() <= count) {
        return V;
    }
    const std::vector<Index> idx = sample_indices(V.cols(), count, seed);
    PatchBatch out(V.rows(), count);
    for (Index k = 0; k < count; ++k) {
        out.col(k) = V.col(idx[static_cast<std::size_t>(k)]);
    }
    return out;
}

namespace detail {

template <typename Scalar>
BenchRun trajectory(const InferenceModel<Scalar>& model, const MatrixX<Scalar>& V, InferenceConfig cfg) {
    cfg.track_functional = true;
    cfg.functional_every_phase = false;
    BenchRun run{cfg.method, cfg.damping,
                 cfg.method == InferenceMethod::conjugate_gradient ? cfg.cg_steps_per_iteration : 0, {}, {}};
    const auto res = run_estep<Scalar>(model, V, cfg);
    for (const auto& rec : res.trace) {
        if (rec.phase == UpdatePhase::spike) {
            run.mean_f.push_back(rec.functional.mean());
            run.seconds.push_back(rec.elapsed_seconds);
        }
    }
    run.final_f = run.mean_f.back();
    run.best_f = *std::max_element(run.mean_f.begin(), run.mean_f.end());
    return run;
}

}  // namespace detail

template <typename Scalar>
BenchResult run_bench_typed(const ModelParams& params, const PatchBatch& examples, const BenchConfig& bc,
                            const InferenceConfig& base) {
    const InferenceModel<Scalar> model(params);
    const MatrixX<Scalar> V = examples.cast<Scalar>();
    BenchResult out;
    std::vector<InferenceConfig> configs;
    InferenceConfig cfg = base;
    cfg.n_steps = bc.max_iterations;
    cfg.tolerance = 0.0;
    cfg.method = InferenceMethod::fixed_point;
    for (double eta : bc.fp_damping) {
        cfg.damping = eta;
        configs.push_back(cfg);
    }
    cfg.method = InferenceMethod::conjugate_gradient;
    for (double eta : bc.cg_damping) {
        for (int steps : bc.cg_steps) {
            cfg.damping = eta;
            cfg.cg_steps_per_iteration = steps;
            configs.push_back(cfg);
        }
    }
    for (const auto& c : configs) {
        out.runs.push_back(detail::trajectory(model, V, c));
    }

    double best = -std::numeric_limits<double>::infinity();
    for (const auto& r : out.runs) {
        if (std::isfinite(r.best_f)) {
            best = std::max(best, r.best_f);
        }
    }
    out.target = best - bc.slack;
    for (std::size_t i = 0; i < out.runs.size(); ++i) {
        auto& r = out.runs[i];
        for (std::size_t k = 0; k < r.mean_f.size(); ++k) {
            if (r.mean_f[k] >= out.target) {
                r.iterations_to_target = static_cast<int>(k + 1);
                r.time_to_target = r.seconds[k];
                break;
            }
        }
        if (!r.iterations_to_target) {
            continue;
        }
        InferenceConfig timed = configs[i];
        timed.n_steps = *r.iterations_to_target;
        timed.track_functional = false;
        for (int rep = 1; rep < bc.repeats; ++rep) {
            r.time_to_target = std::min(r.time_to_target, run_estep<Scalar>(model, V, timed).seconds);
        }
    }
    return out;
}

inline BenchResult run_bench(const ModelParams& params, const PatchBatch& data, const BenchConfig& bc,
                             const InferenceConfig& base = {}) {
    bc.check();
    if (data.rows() != params.n_visible()) {
        throw DimensionError("bench data has " + std::to_string(data.rows()) + " rows, model expects D=" +
                             std::to_string(params.n_visible()));
    }
    const PatchBatch examples = bench_examples(data, bc.examples, bc.seed);
    return bc.single_precision ? run_bench_typed<float>(params, examples, bc, base)
                               : run_bench_typed<double>(params, examples, bc, base);
}

/// One row per configuration. Unreached targets leave the iteration and time
/// columns empty and set reached = 0.
inline void write_bench_csv(std::ostream& os, const BenchResult& r) {
    os << "method,damping,cg_steps,reached,iterations_to_target,time_to_target,final_F,best_F,target_F\n";
    os.precision(10);
    for (const auto& run : r.runs) {
        os << to_string(run.method) << ',' << run.damping << ',' << run.cg_steps << ','
           << (run.iterations_to_target ? 1 : 0) << ',';
        if (run.iterations_to_target) {
            os << *run.iterations_to_target << ',' << run.time_to_target;
        } else {
            os << ',';
        }
        os << ',' << run.final_f << ',' << run.best_f << ',' << r.target << '\n';
    }
}

/// Mean F trajectory of every configuration: method, damping, cg_steps,
/// iteration (1-based), F, seconds.
inline void write_bench_trajectories(std::ostream& os, const BenchResult& r) {
    os << "method,damping,cg_steps,iteration,F,seconds\n";
    os.precision(10);
    for (const auto& run : r.runs) {
        for (std::size_t k = 0; k < run.mean_f.size(); ++k) {
            os << to_string(run.method) << ',' << run.damping << ',' << run.cg_steps << ',' << k + 1 << ','
               << run.mean_f[k] << ',' << run.seconds[k] << '\n';
        }
    }
}

/// Inference trace of one example: one row per outer iteration (row 0 is the
/// initial state) with F and the number of units above 0.5 and 0.01.
template <typename Scalar>
void write_trace_csv(std::ostream& os, const EStepResult<Scalar>& res, Index example) {
    os << "iteration,F,n_active@0.5,n_active@0.01\n";
    os.precision(12);
    for (const auto& rec : res.trace) {
        if (rec.phase != UpdatePhase::initial && rec.phase != UpdatePhase::spike) {
            continue;
        }
        if (rec.functional.size() <= example) {
            throw Error("trace was recorded without the functional, or the example index is out of range");
        }
        os << rec.iteration + 1 << ',' << rec.functional[example] << ',' << rec.active_half[example] << ','
           << rec.active_percent[example] << '\n';
    }
}

}  // namespace s3c
