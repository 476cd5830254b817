#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "s3c/bench.hpp"
#include "s3c/learning.hpp"
#include "s3c/pipeline.hpp"

namespace s3c {

/// Every tunable of every subcommand. Loaded from "key = value" text files;
/// see config_schema() for the keys.
struct RunConfig {
    TrainConfig train;
    int checkpoint_every = 0;  // epochs; 0 = only the final checkpoint

    Index patch_side = 6;
    double eps_c = 10.0;
    double eps_z = 0.1;
    Index n_patches = 200000;
    Index max_images = 0;  // 0 = all images in the file
    std::uint64_t patch_seed = 1;

    ExtractConfig extract;
    BenchConfig bench;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(trim(item));
    }
    return out;
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
    T value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError("config key '" + key + "': '" + text + "' is not an integer");
    }
    return value;
}

inline double parse_real(const std::string& key, const std::string& text) {
    double value = 0.0;
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
        throw ConfigError("config key '" + key + "': '" + text + "' is not a finite number");
    }
    return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") {
        return true;
    }
    if (text == "false" || text == "0" || text == "no" || text == "off") {
        return false;
    }
    throw ConfigError("config key '" + key + "': '" + text + "' is not a boolean");
}

/// Shortest representation that reads back to the same double.
inline std::string format_real(double x) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, ptr);
}

}  // namespace detail

struct ConfigEntry {
    std::string key;
    std::string help;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

template <typename T, typename Field>
ConfigEntry integer_entry(std::string key, std::string help, Field field, T min_value) {
    return {key, std::move(help), [field](const RunConfig& c) { return std::to_string(field(c)); },
            [key, field, min_value](RunConfig& c, const std::string& v) {
                const T x = parse_integer<T>(key, v);
                if (x < min_value) {
                    throw ConfigError("config key '" + key + "' must be >= " + std::to_string(min_value));
                }
                field(c) = x;
            }};
}

template <typename Field>
ConfigEntry real_entry(std::string key, std::string help, Field field) {
    return {key, std::move(help), [field](const RunConfig& c) { return format_real(field(c)); },
            [key, field](RunConfig& c, const std::string& v) { field(c) = parse_real(key, v); }};
}

template <typename Field>
ConfigEntry bool_entry(std::string key, std::string help, Field field) {
    return {key, std::move(help),
            [field](const RunConfig& c) { return std::string(field(c) ? "true" : "false"); },
            [key, field](RunConfig& c, const std::string& v) { field(c) = parse_bool(key, v); }};
}

template <typename Field>
ConfigEntry real_list_entry(std::string key, std::string help, Field field) {
    return {key, std::move(help),
            [field](const RunConfig& c) {
                std::string s;
                for (double x : field(c)) {
                    s += (s.empty() ? "" : ",") + format_real(x);
                }
                return s;
            },
            [key, field](RunConfig& c, const std::string& v) {
                std::vector<double> xs;
                for (const auto& item : split_list(v)) {
                    xs.push_back(parse_real(key, item));
                }
                field(c) = xs;
            }};
}

template <typename Field>
ConfigEntry int_list_entry(std::string key, std::string help, Field field) {
    return {key, std::move(help),
            [field](const RunConfig& c) {
                std::string s;
                for (int x : field(c)) {
                    s += (s.empty() ? "" : ",") + std::to_string(x);
                }
                return s;
            },
            [key, field](RunConfig& c, const std::string& v) {
                std::vector<int> xs;
                for (const auto& item : split_list(v)) {
                    xs.push_back(parse_integer<int>(key, item));
                }
                field(c) = xs;
            }};
}

}  // namespace detail

inline const std::vector<ConfigEntry>& config_schema() {
    using namespace detail;
    static const std::vector<ConfigEntry> schema = [] {
        std::vector<ConfigEntry> s;
        s.push_back(integer_entry<Index>("model.n_hidden", "number of hidden units N",
                                         [](auto& c) -> auto& { return c.train.n_hidden; }, 1));
        s.push_back(real_entry("init.bias", "initial spike bias b", [](auto& c) -> auto& { return c.train.init.bias; }));
        s.push_back(real_entry("init.mu", "initial slab mean", [](auto& c) -> auto& { return c.train.init.mu; }));
        s.push_back(real_entry("init.alpha", "initial slab precision", [](auto& c) -> auto& { return c.train.init.alpha; }));
        s.push_back(real_entry("init.beta", "initial visible precision", [](auto& c) -> auto& { return c.train.init.beta; }));

        s.push_back(integer_entry<Index>("train.batch_size", "minibatch size",
                                         [](auto& c) -> auto& { return c.train.batch_size; }, 1));
        s.push_back(integer_entry<int>("train.epochs", "passes over the training patches",
                                       [](auto& c) -> auto& { return c.train.n_epochs; }, 1));
        s.push_back(integer_entry<std::uint64_t>("train.seed", "seed for initialization and shuffling",
                                                 [](auto& c) -> auto& { return c.train.seed; }, 0));
        s.push_back(bool_entry("train.shuffle", "reshuffle patches every epoch", [](auto& c) -> auto& { return c.train.shuffle; }));
        s.push_back(bool_entry("train.warm_start", "start each E-step from the example's previous state",
                               [](auto& c) -> auto& { return c.train.warm_start; }));
        s.push_back(bool_entry("train.single_precision", "run training E-steps in float32",
                               [](auto& c) -> auto& { return c.train.single_precision; }));
        s.push_back(integer_entry<int>("train.checkpoint_every", "write a checkpoint every E epochs (0 = final only)",
                                       [](auto& c) -> auto& { return c.checkpoint_every; }, 0));
        s.push_back(real_entry("train.lr.W", "learning rate for W", [](auto& c) -> auto& { return c.train.learning_rates.W; }));
        s.push_back(real_entry("train.lr.b", "learning rate for b", [](auto& c) -> auto& { return c.train.learning_rates.b; }));
        s.push_back(real_entry("train.lr.mu", "learning rate for mu", [](auto& c) -> auto& { return c.train.learning_rates.mu; }));
        s.push_back(real_entry("train.lr.alpha", "learning rate for alpha",
                               [](auto& c) -> auto& { return c.train.learning_rates.alpha; }));
        s.push_back(real_entry("train.lr.beta", "learning rate for beta",
                               [](auto& c) -> auto& { return c.train.learning_rates.beta; }));
        s.push_back(real_entry("train.alpha_min", "lower clamp for alpha", [](auto& c) -> auto& { return c.train.alpha_bounds.lo; }));
        s.push_back(real_entry("train.alpha_max", "upper clamp for alpha", [](auto& c) -> auto& { return c.train.alpha_bounds.hi; }));
        s.push_back(real_entry("train.beta_min", "lower clamp for beta", [](auto& c) -> auto& { return c.train.beta_bounds.lo; }));
        s.push_back(real_entry("train.beta_max", "upper clamp for beta", [](auto& c) -> auto& { return c.train.beta_bounds.hi; }));

        s.push_back({"inference.method", "fixed_point or conjugate_gradient",
                     [](const RunConfig& c) { return std::string(to_string(c.train.inference.method)); },
                     [](RunConfig& c, const std::string& v) { c.train.inference.method = parse_inference_method(v); }});
        s.push_back(integer_entry<int>("inference.steps", "outer E-step iterations K",
                                       [](auto& c) -> auto& { return c.train.inference.n_steps; }, 1));
        s.push_back(real_entry("inference.damping", "damping eta in (0, 1]",
                               [](auto& c) -> auto& { return c.train.inference.damping; }));
        s.push_back(real_entry("inference.rho", "reflection clip rho in [0, 1]",
                               [](auto& c) -> auto& { return c.train.inference.rho; }));
        s.push_back(bool_entry("inference.clip", "clip sign-flipping slab updates",
                               [](auto& c) -> auto& { return c.train.inference.clip; }));
        s.push_back(integer_entry<int>("inference.cg_steps", "CG steps per outer iteration",
                                       [](auto& c) -> auto& { return c.train.inference.cg_steps_per_iteration; }, 1));
        s.push_back(bool_entry("inference.cg_precondition", "Jacobi-precondition the CG slab phase",
                               [](auto& c) -> auto& { return c.train.inference.cg_precondition; }));
        s.push_back(real_entry("inference.eps_h", "spike clamp epsilon",
                               [](auto& c) -> auto& { return c.train.inference.eps_h; }));
        s.push_back(real_entry("inference.tolerance", "stop early when max |delta h| < tol (0 = never)",
                               [](auto& c) -> auto& { return c.train.inference.tolerance; }));

        s.push_back(integer_entry<Index>("pipeline.patch_side", "patch side P", [](auto& c) -> auto& { return c.patch_side; }, 1));
        s.push_back(real_entry("pipeline.eps_c", "contrast normalization epsilon", [](auto& c) -> auto& { return c.eps_c; }));
        s.push_back(real_entry("pipeline.eps_z", "ZCA epsilon", [](auto& c) -> auto& { return c.eps_z; }));
        s.push_back(integer_entry<Index>("pipeline.n_patches", "training patches sampled from the images",
                                         [](auto& c) -> auto& { return c.n_patches; }, 1));
        s.push_back(integer_entry<Index>("pipeline.max_images", "images read from the data file (0 = all)",
                                         [](auto& c) -> auto& { return c.max_images; }, 0));
        s.push_back(integer_entry<std::uint64_t>("pipeline.patch_seed", "seed for the training patch subsample",
                                                 [](auto& c) -> auto& { return c.patch_seed; }, 0));

        s.push_back({"extract.grids", "pooling grids, e.g. 3x3 or 1x1,2x2,3x3",
                     [](const RunConfig& c) { return format_grids(c.extract.grids); },
                     [](RunConfig& c, const std::string& v) { c.extract.grids = parse_grids(v); }});
        s.push_back(bool_entry("extract.single_precision", "run extraction E-steps in float32",
                               [](auto& c) -> auto& { return c.extract.single_precision; }));

        s.push_back(integer_entry<Index>("bench.examples", "size of the fixed example set",
                                         [](auto& c) -> auto& { return c.bench.examples; }, 1));
        s.push_back(integer_entry<int>("bench.max_iterations", "iteration cap per run",
                                       [](auto& c) -> auto& { return c.bench.max_iterations; }, 1));
        s.push_back(real_entry("bench.slack", "target = best mean F minus this many nats",
                               [](auto& c) -> auto& { return c.bench.slack; }));
        s.push_back(integer_entry<int>("bench.repeats", "timing repeats (minimum is kept)",
                                       [](auto& c) -> auto& { return c.bench.repeats; }, 1));
        s.push_back(real_list_entry("bench.fp_damping", "damping grid for the heuristic method",
                                    [](auto& c) -> auto& { return c.bench.fp_damping; }));
        s.push_back(real_list_entry("bench.cg_damping", "damping grid for the CG method",
                                    [](auto& c) -> auto& { return c.bench.cg_damping; }));
        s.push_back(int_list_entry("bench.cg_steps", "CG steps-per-iteration grid",
                                   [](auto& c) -> auto& { return c.bench.cg_steps; }));
        s.push_back(bool_entry("bench.single_precision", "time float32 E-steps",
                               [](auto& c) -> auto& { return c.bench.single_precision; }));
        s.push_back(integer_entry<std::uint64_t>("bench.seed", "seed for choosing the example set",
                                                 [](auto& c) -> auto& { return c.bench.seed; }, 0));
        return s;
    }();
    return schema;
}

/// Copies the shared inference settings into the extraction settings and
/// validates everything.
inline void finalize_config(RunConfig& c) {
    c.extract.inference = c.train.inference;
    if (!(c.eps_c >= 0.0) || !(c.eps_z >= 0.0)) {
        throw ConfigError("pipeline epsilons must be non-negative");
    }
    if (c.extract.grids.empty()) {
        throw ConfigError("extract.grids is empty");
    }
    try {
        c.train.check();
        c.bench.check();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    for (const auto& e : config_schema()) {
        if (e.key == key) {
            e.set(c, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

/// "key = value" lines; '#' starts a comment; later lines override earlier ones.
inline void parse_config(std::istream& is, RunConfig& c, const std::string& source = "config") {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        line = detail::trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        try {
            set_config_value(c, key, value);
        } catch (const Error& e) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot open config file " + path.string());
    }
    RunConfig c;
    parse_config(is, c, path.string());
    finalize_config(c);
    return c;
}

/// The fully resolved configuration, in a form parse_config reads back.
inline std::string format_config(const RunConfig& c) {
    std::string out;
    std::string section;
    for (const auto& e : config_schema()) {
        const std::string sec = e.key.substr(0, e.key.find('.'));
        if (sec != section) {
            out += (section.empty() ? "" : "\n");
            section = sec;
        }
        out += e.key + " = " + e.get(c) + "    # " + e.help + "\n";
    }
    return out;
}

}  // namespace s3c
