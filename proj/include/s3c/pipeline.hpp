#pragma once

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <numeric>
#include <random>
#include <ranges>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "s3c/inference.hpp"
#include "s3c/model.hpp"
#include "s3c/parallel.hpp"

namespace s3c {

/// Images stored as float pixels in [image][row][col][channel] order, on the
/// 0..255 scale of the 8-bit source.
struct ImageBatch {
    Index count = 0;
    Index height = 0;
    Index width = 0;
    Index channels = 0;
    std::vector<float> pixels;
    std::vector<std::uint8_t> labels;  // passthrough metadata, one per image

    ImageBatch() = default;
    ImageBatch(Index m, Index h, Index w, Index c)
        : count(m), height(h), width(w), channels(c),
          pixels(static_cast<std::size_t>(m * h * w * c), 0.0f), labels(static_cast<std::size_t>(m), 0) {}

    Index image_size() const noexcept { return height * width * channels; }

    float& at(Index m, Index r, Index c, Index ch) {
        return pixels[static_cast<std::size_t>(((m * height + r) * width + c) * channels + ch)];
    }
    float at(Index m, Index r, Index c, Index ch) const {
        return pixels[static_cast<std::size_t>(((m * height + r) * width + c) * channels + ch)];
    }

    void check() const {
        if (channels != 1 && channels != 3) {
            throw Error("images must have 1 or 3 channels, got " + std::to_string(channels));
        }
        if (pixels.size() != static_cast<std::size_t>(count * image_size()) ||
            labels.size() != static_cast<std::size_t>(count)) {
            throw DimensionError("image batch storage does not match its dimensions");
        }
    }
};

/// Patch vectors are laid out (row, col, channel) with channel fastest.
inline Index patch_dim(Index side, Index channels) { return side * side * channels; }

namespace detail {

inline void require_patch_fits(const ImageBatch& images, Index side) {
    if (side < 1 || side > std::min(images.height, images.width)) {
        throw DimensionError("patch side " + std::to_string(side) + " does not fit " +
                             std::to_string(images.height) + "x" + std::to_string(images.width) + " images");
    }
}

inline void copy_patch(const ImageBatch& images, Index m, Index r0, Index c0, Index side, double* out) {
    const Index c = images.channels;
    for (Index r = 0; r < side; ++r) {
        const float* row = &images.pixels[static_cast<std::size_t>(((m * images.height + r0 + r) * images.width + c0) * c)];
        for (Index k = 0; k < side * c; ++k) {
            *out++ = row[k];
        }
    }
}

}  // namespace detail

/// Number of patch positions along an axis of length `extent`.
inline Index lattice_size(Index extent, Index side, Index stride = 1) { return (extent - side) / stride + 1; }

/// All patches in row-major scan order (image, then top-left row, then col).
/// With max_count > 0 and fewer than the total, a seeded uniform subsample
/// without replacement is returned, still in scan order.
inline PatchBatch extract_patches(const ImageBatch& images, Index side, Index stride = 1, Index max_count = 0,
                                  std::uint64_t seed = 0) {
    images.check();
    detail::require_patch_fits(images, side);
    if (stride < 1) {
        throw Error("patch stride must be positive");
    }
    const Index ly = lattice_size(images.height, side, stride);
    const Index lx = lattice_size(images.width, side, stride);
    const Index per_image = ly * lx;
    const Index total = per_image * images.count;

    std::vector<Index> chosen;
    if (max_count > 0 && max_count < total) {
        chosen = sample_indices(total, max_count, seed);
    } else {
        chosen.resize(static_cast<std::size_t>(total));
        std::iota(chosen.begin(), chosen.end(), Index{0});
    }

    PatchBatch out(patch_dim(side, images.channels), static_cast<Index>(chosen.size()));
    for (Index k = 0; k < out.cols(); ++k) {
        const Index idx = chosen[static_cast<std::size_t>(k)];
        const Index m = idx / per_image;
        const Index pos = idx % per_image;
        detail::copy_patch(images, m, (pos / lx) * stride, (pos % lx) * stride, side, out.col(k).data());
    }
    return out;
}

/// (x - mean(x)) / sqrt(var(x) + eps), population variance.
template <typename Derived>
Vector contrast_normalize(const Eigen::MatrixBase<Derived>& patch, double eps_c) {
    const double mean = patch.mean();
    const Vector centered = patch.array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(patch.size());
    return centered / std::sqrt(var + eps_c);
}

inline void contrast_normalize_columns(PatchBatch& patches, double eps_c) {
    for (Index k = 0; k < patches.cols(); ++k) {
        patches.col(k) = contrast_normalize(patches.col(k), eps_c);
    }
}

struct Preprocessor {
    Index patch_side = 6;
    Index channels = 3;
    double eps_c = 10.0;
    double eps_z = 0.1;
    Vector mean;
    Matrix whitening;
    bool fitted = false;

    Index dim() const noexcept { return patch_dim(patch_side, channels); }
};

/// Fits mean and (Sigma + eps_z I)^(-1/2) on contrast-normalized patches.
namespace detail {

/// (cov + eps I)^(-1/2) by symmetric eigendecomposition, symmetrized.
inline Matrix regularized_inverse_sqrt(const Matrix& cov, double eps) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    if (eig.info() != Eigen::Success) {
        throw Error("eigendecomposition of the patch covariance failed");
    }
    const Vector lambda = eig.eigenvalues().cwiseMax(0.0).array() + eps;
    if ((lambda.array() <= 0.0).any()) {
        throw Error("patch covariance is singular and eps_z = 0");
    }
    const Matrix& U = eig.eigenvectors();
    const Matrix w = U * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * U.transpose();
    return 0.5 * (w + w.transpose());
}

}  // namespace detail

inline Preprocessor fit_zca(const PatchBatch& patches, Index side, Index channels, double eps_c = 10.0,
                            double eps_z = 0.1) {
    const Index d = patch_dim(side, channels);
    if (patches.rows() != d) {
        throw DimensionError("patches have " + std::to_string(patches.rows()) + " rows, expected " +
                             std::to_string(d));
    }
    if (patches.cols() < d + 1) {
        throw Error("fit_zca needs at least " + std::to_string(d + 1) + " patches, got " +
                    std::to_string(patches.cols()));
    }
    if (!(eps_c >= 0.0) || !(eps_z >= 0.0)) {
        throw Error("preprocessing epsilons must be non-negative");
    }
    PatchBatch x = patches;
    contrast_normalize_columns(x, eps_c);
    Preprocessor pre;
    pre.patch_side = side;
    pre.channels = channels;
    pre.eps_c = eps_c;
    pre.eps_z = eps_z;
    pre.mean = x.rowwise().mean();
    x.colwise() -= pre.mean;
    const Matrix cov = (x * x.transpose()) / static_cast<double>(x.cols());

    pre.whitening = detail::regularized_inverse_sqrt(cov, eps_z);
    pre.fitted = true;
    return pre;
}

/// whitening * (contrast_normalize(x) - mean) for every column.
inline PatchBatch apply_preprocessor(const Preprocessor& pre, const PatchBatch& patches) {
    if (!pre.fitted) {
        throw Error("preprocessor has not been fitted");
    }
    if (patches.rows() != pre.dim() || pre.mean.size() != pre.dim() || pre.whitening.rows() != pre.dim() ||
        pre.whitening.cols() != pre.dim()) {
        throw DimensionError("patch dimension " + std::to_string(patches.rows()) +
                             " does not match the preprocessor (" + std::to_string(pre.dim()) + ")");
    }
    PatchBatch x = patches;
    contrast_normalize_columns(x, pre.eps_c);
    x.colwise() -= pre.mean;
    return pre.whitening * x;
}

// ---------------------------------------------------------------------------
// Pooling

struct GridSpec {
    Index rows;
    Index cols;

    bool operator==(const GridSpec&) const = default;
};

/// Parses "3x3" or "1x1,2x2,3x3".
inline std::vector<GridSpec> parse_grids(const std::string& text) {
    std::vector<GridSpec> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = std::min(text.find(',', start), text.size());
        const std::string item = text.substr(start, comma - start);
        const std::size_t x = item.find_first_of("xX");
        std::size_t used_r = 0, used_c = 0;
        long r = 0, c = 0;
        try {
            if (x == std::string::npos) {
                throw std::invalid_argument("missing x");
            }
            r = std::stol(item.substr(0, x), &used_r);
            c = std::stol(item.substr(x + 1), &used_c);
        } catch (const std::exception&) {
            throw Error("bad pooling grid '" + item + "' (expected RxC, e.g. 3x3)");
        }
        if (used_r != x || used_c != item.size() - x - 1 || r < 1 || c < 1) {
            throw Error("bad pooling grid '" + item + "' (expected RxC, e.g. 3x3)");
        }
        out.push_back({r, c});
        start = comma + 1;
    }
    return out;
}

inline std::string format_grids(const std::vector<GridSpec>& grids) {
    std::string s;
    for (std::size_t k = 0; k < grids.size(); ++k) {
        s += (k ? "," : "") + std::to_string(grids[k].rows) + "x" + std::to_string(grids[k].cols);
    }
    return s;
}

/// Cell boundaries splitting `extent` locations into `cells` runs as evenly as
/// possible, larger runs first. Returns cells + 1 offsets.
inline std::vector<Index> cell_offsets(Index extent, Index cells) {
    if (cells < 1 || cells > extent) {
        throw Error("cannot split " + std::to_string(extent) + " locations into " + std::to_string(cells) + " cells");
    }
    std::vector<Index> off{0};
    const Index base = extent / cells;
    const Index larger = extent % cells;
    for (Index k = 0; k < cells; ++k) {
        off.push_back(off.back() + base + (k < larger ? 1 : 0));
    }
    return off;
}

inline Index pooled_length(Index n_hidden, const std::vector<GridSpec>& grids) {
    Index cells = 0;
    for (const auto& g : grids) {
        cells += g.rows * g.cols;
    }
    return n_hidden * cells;
}

/// Average pools h_hat (N x ly*lx, locations row-major) over each grid; output
/// is grid by grid, cells row-major, N units per cell.
template <typename Derived>
Vector pool_features(const Eigen::MatrixBase<Derived>& h_hat, Index ly, Index lx, const std::vector<GridSpec>& grids) {
    if (h_hat.cols() != ly * lx) {
        throw DimensionError("pooling input has " + std::to_string(h_hat.cols()) + " locations, expected " +
                             std::to_string(ly * lx));
    }
    const Index n = h_hat.rows();
    Vector out(pooled_length(n, grids));
    Index pos = 0;
    for (const auto& g : grids) {
        const auto ry = cell_offsets(ly, g.rows);
        const auto rx = cell_offsets(lx, g.cols);
        for (Index cy = 0; cy < g.rows; ++cy) {
            for (Index cx = 0; cx < g.cols; ++cx) {
                Vector acc = Vector::Zero(n);
                for (Index y = ry[static_cast<std::size_t>(cy)]; y < ry[static_cast<std::size_t>(cy + 1)]; ++y) {
                    for (Index x = rx[static_cast<std::size_t>(cx)]; x < rx[static_cast<std::size_t>(cx + 1)]; ++x) {
                        acc += h_hat.col(y * lx + x).template cast<double>();
                    }
                }
                const auto area = static_cast<double>((ry[static_cast<std::size_t>(cy + 1)] - ry[static_cast<std::size_t>(cy)]) *
                                                      (rx[static_cast<std::size_t>(cx + 1)] - rx[static_cast<std::size_t>(cx)]));
                out.segment(pos, n) = acc / area;
                pos += n;
            }
        }
    }
    return out;
}

struct PooledFeatures {
    std::vector<GridSpec> grids;
    Index feature_length = 0;
    MatrixX<float> values;  // feature_length x images
    std::vector<std::uint8_t> labels;

    Index count() const noexcept { return values.cols(); }
};

struct ExtractConfig {
    InferenceConfig inference;
    std::vector<GridSpec> grids{{3, 3}};
    bool single_precision = true;
};

/// E_Q[h] for every stride-1 patch of every image, average pooled on the grids.
inline PooledFeatures extract_features(const ModelParams& params, const Preprocessor& pre, const ImageBatch& images,
                                       const ExtractConfig& cfg) {
    images.check();
    cfg.inference.check();
    if (!pre.fitted) {
        throw Error("preprocessor has not been fitted");
    }
    if (images.channels != pre.channels) {
        throw DimensionError("images have " + std::to_string(images.channels) + " channels, preprocessor expects " +
                             std::to_string(pre.channels));
    }
    if (params.n_visible() != pre.dim()) {
        throw DimensionError("model has D=" + std::to_string(params.n_visible()) + " but patches have dimension " +
                             std::to_string(pre.dim()));
    }
    if (cfg.grids.empty()) {
        throw Error("no pooling grids");
    }
    detail::require_patch_fits(images, pre.patch_side);
    const Index ly = lattice_size(images.height, pre.patch_side);
    const Index lx = lattice_size(images.width, pre.patch_side);
    for (const auto& g : cfg.grids) {
        if (g.rows > ly || g.cols > lx) {
            throw Error("pooling grid " + format_grids({g}) + " is finer than the " + std::to_string(ly) + "x" +
                        std::to_string(lx) + " patch lattice");
        }
    }

    PooledFeatures out;
    out.grids = cfg.grids;
    out.feature_length = pooled_length(params.n_hidden(), cfg.grids);
    out.values.resize(out.feature_length, images.count);
    out.labels = images.labels;

    InferenceConfig icfg = cfg.inference;
    icfg.track_functional = false;
    const InferenceModel<double> model_d(params);
    const InferenceModel<float> model_f(params);
    parallel_for(images.count, [&](Index m) {
        PatchBatch patches(pre.dim(), ly * lx);
        for (Index k = 0; k < ly * lx; ++k) {
            detail::copy_patch(images, m, k / lx, k % lx, pre.patch_side, patches.col(k).data());
        }
        const PatchBatch x = apply_preprocessor(pre, patches);
        Vector pooled;
        if (cfg.single_precision) {
            const MatrixX<float> xf = x.cast<float>();
            pooled = pool_features(run_estep<float>(model_f, xf, icfg).state.h_hat, ly, lx, cfg.grids);
        } else {
            pooled = pool_features(run_estep<double>(model_d, x, icfg).state.h_hat, ly, lx, cfg.grids);
        }
        out.values.col(m) = pooled.cast<float>();
    });
    return out;
}

}  // namespace s3c
