#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace s3c {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

/// Columns are examples: a D x M matrix holds M visible vectors.
using PatchBatch = Matrix;

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

/// Raised when an iterative procedure produces NaN or infinity.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long index)
        : Error(what + " (at index " + std::to_string(index) + ")"), index_(index) {}

    long index() const noexcept { return index_; }

private:
    long index_;
};

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

template <typename T>
inline T sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

/// log(sigmoid(x)) without overflow for large |x|.
template <typename T>
inline T log_sigmoid(T x) {
    if (x >= T(0)) {
        return -std::log1p(std::exp(-x));
    }
    return x - std::log1p(std::exp(x));
}

/// Shannon entropy (nats) of a Bernoulli(p) variable; 0 log 0 = 0.
template <typename T>
inline T bernoulli_entropy(T p) {
    T h(0);
    if (p > T(0)) {
        h -= p * std::log(p);
    }
    if (p < T(1)) {
        h -= (T(1) - p) * std::log1p(-p);
    }
    return h;
}

/// Differential entropy of a univariate Gaussian with the given variance.
template <typename T>
inline T gaussian_entropy(T variance) {
    return T(0.5) * (T(kLog2Pi) + T(1) + std::log(variance));
}

/// `count` distinct indices from [0, total) in increasing order, drawn by
/// selection sampling. All of them when count >= total.
inline std::vector<Index> sample_indices(Index total, Index count, std::uint64_t seed) {
    std::vector<Index> out;
    if (count >= total) {
        out.resize(static_cast<std::size_t>(std::max<Index>(total, 0)));
        for (Index k = 0; k < total; ++k) {
            out[static_cast<std::size_t>(k)] = k;
        }
        return out;
    }
    out.reserve(static_cast<std::size_t>(count));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Index needed = count;
    for (Index k = 0; k < total && needed > 0; ++k) {
        if (unif(rng) * static_cast<double>(total - k) < static_cast<double>(needed)) {
            out.push_back(k);
            --needed;
        }
    }
    return out;
}

}  // namespace s3c
