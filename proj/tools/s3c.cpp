#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "s3c/bench.hpp"
#include "s3c/checkpoint.hpp"
#include "s3c/config.hpp"
#include "s3c/io.hpp"
#include "s3c/learning.hpp"
#include "s3c/pipeline.hpp"
#include "s3c/synthetic.hpp"

namespace fs = std::filesystem;
using namespace s3c;

namespace {

// Exit codes: 1 runtime/data error, 2 usage or config error, 3 divergence,
// 4 inspect found constraint violations.
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitInvalidModel = 4;

struct ConfigOptions {
    std::string path;
    std::vector<std::string> overrides;

    void attach(CLI::App* app) {
        app->add_option("-c,--config", path, "key = value config file");
        app->add_option("--set", overrides, "override one config key (key=value); repeatable");
    }

    RunConfig resolve() const {
        RunConfig c;
        if (!path.empty()) {
            std::ifstream is(path);
            if (!is) {
                throw ConfigError("cannot open config file " + path);
            }
            parse_config(is, c, path);
        }
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("--set expects key=value, got '" + kv + "'");
            }
            try {
                set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
            } catch (const Error& e) {
                throw ConfigError("--set " + kv + ": " + e.what());
            }
        }
        finalize_config(c);
        return c;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    os << text;
    if (!os) {
        throw Error("cannot write " + path.string());
    }
}

void echo_config(const fs::path& path, const RunConfig& c) {
    write_text(path, "# resolved configuration\n" + format_config(c));
}

struct Dataset {
    std::optional<ImageBatch> images;
    PatchBatch vectors;  // D x M when the file is an S3F1 tensor
    std::vector<std::uint8_t> labels;
};

Dataset load_dataset(const fs::path& path, Index max_images) {
    if (!fs::exists(path)) {
        throw Error("cannot open data file " + path.string());
    }
    Dataset ds;
    if (is_tensor_file(path)) {
        Tensor t = load_tensor(path);
        ds.vectors = t.rows.cast<double>();
        ds.labels = std::move(t.labels);
        if (max_images > 0 && ds.vectors.cols() > max_images) {
            ds.vectors.conservativeResize(Eigen::NoChange, max_images);
            ds.labels.resize(static_cast<std::size_t>(max_images));
        }
    } else {
        ds.images = read_cifar(path, max_images);
        ds.labels = ds.images->labels;
    }
    return ds;
}

Preprocessor load_or_fail(const fs::path& path) {
    if (!fs::exists(path)) {
        throw Error("preprocessor " + path.string() +
                    " not found (train on images writes it; or pass --fit-preprocessor)");
    }
    return load_preprocessor(path);
}

// Whitened patches drawn from images with the run's patch settings.
PatchBatch whitened_patches(const Preprocessor& pre, const ImageBatch& images, Index count, std::uint64_t seed) {
    return apply_preprocessor(pre, extract_patches(images, pre.patch_side, 1, count, seed));
}

void write_diagnostics(const fs::path& path, const TrainDiagnostics& d) {
    std::ofstream os(path);
    os << "epoch,batch,mean_F,grad_norm_W,grad_norm_b,grad_norm_mu,grad_norm_alpha,grad_norm_beta,mean_h,"
          "frac_h_below_0.01\n"
       << std::setprecision(12);
    for (const auto& b : d.batches) {
        os << b.epoch << ',' << b.batch << ',' << b.mean_functional << ',' << b.grad_norm_W << ',' << b.grad_norm_b
           << ',' << b.grad_norm_mu << ',' << b.grad_norm_alpha << ',' << b.grad_norm_beta << ',' << b.mean_h << ','
           << b.frac_h_below_001 << '\n';
    }
    if (!os) {
        throw Error("cannot write " + path.string());
    }
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    ConfigOptions config;
    std::string data, output, init, diagnostics;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    const RunConfig cfg = a.config.resolve();
    Dataset ds = load_dataset(a.data, cfg.max_images);
    const fs::path out(a.output);

    std::optional<Preprocessor> pre;
    PatchBatch data;
    if (ds.images) {
        const PatchBatch raw = extract_patches(*ds.images, cfg.patch_side, 1, cfg.n_patches, cfg.patch_seed);
        pre = fit_zca(raw, cfg.patch_side, ds.images->channels, cfg.eps_c, cfg.eps_z);
        data = apply_preprocessor(*pre, raw);
        ds.images.reset();
        std::cerr << "train: " << data.cols() << " whitened " << cfg.patch_side << "x" << cfg.patch_side
                  << " patches (D=" << data.rows() << ")\n";
    } else {
        data = std::move(ds.vectors);
        std::cerr << "train: " << data.cols() << " vectors (D=" << data.rows() << ")\n";
    }

    ModelParams start = a.init.empty() ? init_params(data.rows(), cfg.train.n_hidden, cfg.train.seed, cfg.train.init)
                                       : load_checkpoint(a.init);
    if (!a.init.empty() && start.n_hidden() != cfg.train.n_hidden) {
        std::cerr << "train: using N=" << start.n_hidden() << " from " << a.init << " (config says "
                  << cfg.train.n_hidden << ")\n";
    }
    echo_config(out.string() + ".cfg", cfg);
    if (pre) {
        save_preprocessor(preprocessor_path(out), *pre);
    }

    const auto t0 = std::chrono::steady_clock::now();
    const auto on_epoch = [&](int epoch, const ModelParams& p, const TrainDiagnostics& d) {
        if (!a.quiet) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::cerr << "epoch " << epoch + 1 << "/" << cfg.train.n_epochs << "  mean F "
                      << std::setprecision(8) << d.epoch_mean_functional().back() << "  (" << std::setprecision(3)
                      << secs << " s)\n";
        }
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.train.n_epochs) {
            save_checkpoint(out.string() + ".epoch" + std::to_string(epoch + 1), p);
        }
    };
    const fs::path diag_path = a.diagnostics.empty() ? fs::path(out.string() + ".diag.csv") : fs::path(a.diagnostics);
    std::optional<TrainResult> trained;
    try {
        trained = train(data, std::move(start), cfg.train, on_epoch);
    } catch (const TrainingDiverged& e) {
        // Keep the state the failing batch started from for post-mortems.
        save_checkpoint(out.string() + ".diverged", e.params);
        write_diagnostics(diag_path, e.diagnostics);
        std::cerr << "train: parameters before the failing batch saved to " << out.string() << ".diverged\n";
        throw;
    }
    const TrainResult& res = *trained;
    save_checkpoint(out, res.params);
    write_diagnostics(diag_path, res.diagnostics);
    const auto report = validate(res.params);
    if (!report.ok()) {
        std::cerr << "train: warning: trained model fails validation:\n" << report.to_string();
    }
    std::cout << "wrote " << out.string() << " (D=" << res.params.n_visible() << ", N=" << res.params.n_hidden()
              << ")\n";
    return 0;
}

struct ExtractArgs {
    ConfigOptions config;
    std::string model, data, output, grids, preprocessor, csv;
    bool fit_preprocessor = false;
};

int cmd_extract(const ExtractArgs& a) {
    RunConfig cfg = a.config.resolve();
    if (!a.grids.empty()) {
        cfg.extract.grids = parse_grids(a.grids);
    }
    const ModelParams params = load_checkpoint(a.model);
    const Dataset ds = load_dataset(a.data, cfg.max_images);
    if (!ds.images) {
        throw Error("extract needs images in CIFAR binary format; " + a.data + " is an S3F1 tensor");
    }
    Preprocessor pre;
    if (a.fit_preprocessor) {
        pre = fit_zca(extract_patches(*ds.images, cfg.patch_side, 1, cfg.n_patches, cfg.patch_seed), cfg.patch_side,
                      ds.images->channels, cfg.eps_c, cfg.eps_z);
    } else {
        pre = load_or_fail(a.preprocessor.empty() ? preprocessor_path(a.model) : fs::path(a.preprocessor));
    }
    const PooledFeatures f = extract_features(params, pre, *ds.images, cfg.extract);
    save_tensor(a.output, f.values, f.labels);
    if (!a.csv.empty()) {
        std::ofstream os(a.csv);
        write_tensor_csv(os, f.values, f.labels);
    }
    echo_config(a.output + ".cfg", cfg);
    std::cout << "features per image: " << f.feature_length << " (N=" << params.n_hidden() << ", grids "
              << format_grids(cfg.extract.grids) << ")\n"
              << "wrote " << f.count() << " rows to " << a.output << "\n";
    return 0;
}

struct SampleArgs {
    std::string model, output;
    Index count = 1000;
    std::uint64_t seed = 0;
};

int cmd_sample(const SampleArgs& a) {
    const ModelParams params = load_checkpoint(a.model);
    const PatchBatch v = sample_visible(params, a.count, a.seed);
    save_tensor(a.output, v.cast<float>(), std::vector<std::uint8_t>(static_cast<std::size_t>(a.count), 0));
    std::cout << "wrote " << a.count << " samples of dimension " << params.n_visible() << " to " << a.output << "\n";
    return 0;
}

// Examples for bench and trace: the tensor's vectors, or whitened patches of
// the images through the model's preprocessor.
PatchBatch inference_examples(const Dataset& ds, const std::string& model, const std::string& pre_path, Index count,
                              std::uint64_t seed) {
    if (!ds.images) {
        return ds.vectors;
    }
    const Preprocessor pre = load_or_fail(pre_path.empty() ? preprocessor_path(model) : fs::path(pre_path));
    return whitened_patches(pre, *ds.images, count, seed);
}

struct BenchArgs {
    ConfigOptions config;
    std::string model, data, output, trajectories, preprocessor;
};

int cmd_bench(const BenchArgs& a) {
    const RunConfig cfg = a.config.resolve();
    const ModelParams params = load_checkpoint(a.model);
    const Dataset ds = load_dataset(a.data, cfg.max_images);
    const PatchBatch examples = inference_examples(ds, a.model, a.preprocessor, cfg.bench.examples, cfg.bench.seed);
    const BenchResult r = run_bench(params, examples, cfg.bench, cfg.train.inference);
    {
        std::ofstream os(a.output);
        write_bench_csv(os, r);
        if (!os) {
            throw Error("cannot write " + a.output);
        }
    }
    if (!a.trajectories.empty()) {
        std::ofstream os(a.trajectories);
        write_bench_trajectories(os, r);
    }
    echo_config(a.output + ".cfg", cfg);
    std::cout << std::setprecision(6) << "target F: " << r.target << "\n";
    for (const auto m : {InferenceMethod::fixed_point, InferenceMethod::conjugate_gradient}) {
        const double t = r.best_time(m);
        std::cout << to_string(m) << ": best time to target ";
        if (std::isfinite(t)) {
            std::cout << t << " s\n";
        } else {
            std::cout << "not reached\n";
        }
    }
    return 0;
}

struct InspectArgs {
    std::string model, dump;
    std::vector<Index> columns;
    bool color = false;
};

// Patch side and channel count of a D-dimensional dictionary, preferring RGB.
std::pair<Index, Index> patch_shape(Index d) {
    for (Index channels : {3, 1}) {
        if (d % channels == 0) {
            const auto side = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(d / channels))));
            if (side * side * channels == d) {
                return {side, channels};
            }
        }
    }
    throw DimensionError("D=" + std::to_string(d) + " is not a square patch with 1 or 3 channels");
}

template <typename V>
void print_stats(const char* name, const V& x) {
    std::cout << "  " << std::left << std::setw(8) << name << std::right << " min " << std::setw(12) << x.minCoeff()
              << "  mean " << std::setw(12) << x.mean() << "  max " << std::setw(12) << x.maxCoeff() << "\n";
}

int cmd_inspect(const InspectArgs& a) {
    {
        std::ifstream is(a.model, std::ios::binary);
        if (!is) {
            throw Error("cannot open checkpoint " + a.model);
        }
        std::cout << describe_checkpoint(is);
    }
    const ModelParams p = load_checkpoint(a.model);
    std::cout << std::setprecision(6) << "parameters:\n";
    print_stats("|W_i|", p.W.colwise().norm().transpose().eval());
    print_stats("b", p.b);
    print_stats("mu", p.mu);
    print_stats("alpha", p.alpha);
    print_stats("beta", p.beta);
    print_stats("sig(b)", p.b.unaryExpr([](double x) { return sigmoid(x); }).eval());
    const auto report = validate(p);
    std::cout << "constraints: " << (report.ok() ? "all pass" : "VIOLATED") << "\n";
    if (!report.ok()) {
        std::cout << report.to_string();
    }

    if (!a.dump.empty()) {
        const auto [side, channels] = patch_shape(p.n_visible());
        fs::create_directories(a.dump);
        std::vector<Index> cols = a.columns;
        if (cols.empty()) {
            cols.resize(static_cast<std::size_t>(p.n_hidden()));
            std::iota(cols.begin(), cols.end(), Index{0});
        }
        for (Index c : cols) {
            if (c < 0 || c >= p.n_hidden()) {
                throw Error("column " + std::to_string(c) + " out of range (N=" + std::to_string(p.n_hidden()) + ")");
            }
            char name[32];
            std::snprintf(name, sizeof name, "w%05ld", static_cast<long>(c));
            if (a.color && channels == 3) {
                write_ppm(fs::path(a.dump) / (std::string(name) + ".ppm"), p.W.col(c), side);
            } else {
                write_pgm(fs::path(a.dump) / (std::string(name) + ".pgm"), column_image(p.W.col(c), side, channels));
            }
        }
        std::cout << "dumped " << cols.size() << " " << side << "x" << side << " filters to " << a.dump << "\n";
    }
    return report.ok() ? 0 : kExitInvalidModel;
}

struct InitArgs {
    ConfigOptions config;
    std::string output;
    Index dim = 108;
};

int cmd_init(const InitArgs& a) {
    const RunConfig cfg = a.config.resolve();
    save_checkpoint(a.output, init_params(a.dim, cfg.train.n_hidden, cfg.train.seed, cfg.train.init));
    std::cout << "wrote " << a.output << " (D=" << a.dim << ", N=" << cfg.train.n_hidden << ")\n";
    return 0;
}

struct SynthArgs {
    std::string output;
    Index count = 1000;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
    write_cifar(a.output, dead_leaves(a.count, a.seed));
    std::cout << "wrote " << a.count << " 32x32x3 dead-leaves images to " << a.output << "\n";
    return 0;
}

struct TraceArgs {
    ConfigOptions config;
    std::string model, data, output, preprocessor;
    Index example = 0;
    Index patches = 100;
};

int cmd_trace(const TraceArgs& a) {
    RunConfig cfg = a.config.resolve();
    const ModelParams params = load_checkpoint(a.model);
    const Dataset ds = load_dataset(a.data, cfg.max_images);
    const PatchBatch v = inference_examples(ds, a.model, a.preprocessor, a.patches, cfg.patch_seed);
    if (a.example < 0 || a.example >= v.cols()) {
        throw Error("example " + std::to_string(a.example) + " out of range (" + std::to_string(v.cols()) +
                    " examples)");
    }
    InferenceConfig icfg = cfg.train.inference;
    icfg.track_functional = true;
    const auto res = run_estep<double>(InferenceModel<double>(params), v.col(a.example), icfg);
    std::ofstream os(a.output);
    write_trace_csv(os, res, 0);
    std::cout << "wrote " << a.output << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spike-and-slab sparse coding: training, inference and feature extraction"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "s3c 1.0");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "fit a model to images (CIFAR binary) or vectors (S3F1)");
    train_args.config.attach(train_cmd);
    train_cmd->add_option("data", train_args.data, "training data")->required();
    train_cmd->add_option("-o,--output", train_args.output, "output checkpoint")->required();
    train_cmd->add_option("--init", train_args.init, "start from this checkpoint instead of a fresh init");
    train_cmd->add_option("--diagnostics", train_args.diagnostics, "per-batch CSV (default <output>.diag.csv)");
    train_cmd->add_flag("-q,--quiet", train_args.quiet, "no per-epoch progress");

    ExtractArgs extract_args;
    auto* extract_cmd = app.add_subcommand("extract", "pooled spike features of every image");
    extract_args.config.attach(extract_cmd);
    extract_cmd->add_option("model", extract_args.model, "checkpoint")->required();
    extract_cmd->add_option("data", extract_args.data, "images, CIFAR binary format")->required();
    extract_cmd->add_option("-o,--output", extract_args.output, "output S3F1 feature file")->required();
    extract_cmd->add_option("--grids", extract_args.grids, "pooling grids, e.g. 3x3 or 1x1,2x2,3x3");
    extract_cmd->add_option("--preprocessor", extract_args.preprocessor, "S3P1 file (default <model>.pre)");
    extract_cmd->add_flag("--fit-preprocessor", extract_args.fit_preprocessor,
                          "fit contrast normalization and ZCA on this data instead");
    extract_cmd->add_option("--csv", extract_args.csv, "also write the features as CSV");

    SampleArgs sample_args;
    auto* sample_cmd = app.add_subcommand("sample", "draw visible vectors from the model");
    sample_cmd->add_option("model", sample_args.model, "checkpoint")->required();
    sample_cmd->add_option("-n,--count", sample_args.count, "number of samples")->check(CLI::NonNegativeNumber);
    sample_cmd->add_option("-s,--seed", sample_args.seed, "random seed");
    sample_cmd->add_option("-o,--output", sample_args.output, "output S3F1 file")->required();

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "time to a common F target, heuristic vs conjugate gradient");
    bench_args.config.attach(bench_cmd);
    bench_cmd->add_option("model", bench_args.model, "checkpoint")->required();
    bench_cmd->add_option("data", bench_args.data, "S3F1 vectors or CIFAR images")->required();
    bench_cmd->add_option("-o,--output", bench_args.output, "summary CSV")->required();
    bench_cmd->add_option("--trajectories", bench_args.trajectories, "per-iteration F and time CSV");
    bench_cmd->add_option("--preprocessor", bench_args.preprocessor, "S3P1 file for image data (default <model>.pre)");

    InspectArgs inspect_args;
    auto* inspect_cmd = app.add_subcommand("inspect", "print checkpoint layout, statistics and constraint checks");
    inspect_cmd->add_option("model", inspect_args.model, "checkpoint")->required();
    inspect_cmd->add_option("--dump", inspect_args.dump, "write filter images into this directory");
    inspect_cmd->add_option("--columns", inspect_args.columns, "columns to dump (default all)")->delimiter(',');
    inspect_cmd->add_flag("--color", inspect_args.color, "PPM color dumps for 3-channel models");

    InitArgs init_args;
    auto* init_cmd = app.add_subcommand("init", "write a freshly initialized checkpoint");
    init_args.config.attach(init_cmd);
    init_cmd->add_option("-d,--dim", init_args.dim, "visible dimension D")->check(CLI::PositiveNumber);
    init_cmd->add_option("-o,--output", init_args.output, "output checkpoint")->required();

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth", "dead-leaves images in CIFAR binary format");
    synth_cmd->add_option("-n,--count", synth_args.count, "number of images")->check(CLI::NonNegativeNumber);
    synth_cmd->add_option("-s,--seed", synth_args.seed, "random seed");
    synth_cmd->add_option("-o,--output", synth_args.output, "output file")->required();

    TraceArgs trace_args;
    auto* trace_cmd = app.add_subcommand("trace", "per-iteration F and active-unit counts for one example");
    trace_args.config.attach(trace_cmd);
    trace_cmd->add_option("model", trace_args.model, "checkpoint")->required();
    trace_cmd->add_option("data", trace_args.data, "S3F1 vectors or CIFAR images")->required();
    trace_cmd->add_option("-o,--output", trace_args.output, "output CSV")->required();
    trace_cmd->add_option("-e,--example", trace_args.example, "example index");
    trace_cmd->add_option("--patches", trace_args.patches, "patches drawn from image data");
    trace_cmd->add_option("--preprocessor", trace_args.preprocessor, "S3P1 file (default <model>.pre)");

    CLI11_PARSE(app, argc, argv);

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        if (name == "train") return cmd_train(train_args);
        if (name == "extract") return cmd_extract(extract_args);
        if (name == "sample") return cmd_sample(sample_args);
        if (name == "bench") return cmd_bench(bench_args);
        if (name == "inspect") return cmd_inspect(inspect_args);
        if (name == "init") return cmd_init(init_args);
        if (name == "synth") return cmd_synth(synth_args);
        if (name == "trace") return cmd_trace(trace_args);
    } catch (const ConfigError& e) {
        std::cerr << "s3c " << name << ": config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "s3c " << name << ": " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "s3c " << name << ": error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
