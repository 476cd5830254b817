#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "s3c/binary_io.hpp"
#include "s3c/model.hpp"

namespace s3c {

/*
 * "S3C1" model checkpoint. All integers are little-endian uint64, all reals
 * little-endian IEEE-754 float64.
 *
 *   offset  field
 *   0       magic "S3C1" (4 bytes)
 *   4       D
 *   12      N
 *   20      len(W) = D*N, then W in row-major order
 *           len(b) = N,   then b
 *           len(mu) = N,  then mu
 *           len(alpha) = N, then alpha
 *           len(beta) = D,  then beta
 */
inline constexpr std::string_view kCheckpointMagic = "S3C1";

inline void write_checkpoint(std::ostream& os, const ModelParams& p) {
    const auto d = static_cast<std::uint64_t>(p.n_visible());
    const auto n = static_cast<std::uint64_t>(p.n_hidden());
    binary::write_magic(os, kCheckpointMagic);
    binary::write_u64(os, d);
    binary::write_u64(os, n);
    binary::write_u64(os, d * n);
    for (Index r = 0; r < p.W.rows(); ++r) {
        for (Index c = 0; c < p.W.cols(); ++c) {
            binary::write_f64(os, p.W(r, c));
        }
    }
    binary::write_f64_array(os, p.b);
    binary::write_f64_array(os, p.mu);
    binary::write_f64_array(os, p.alpha);
    binary::write_f64_array(os, p.beta);
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& p) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    write_checkpoint(os, p);
    if (!os) {
        throw Error("failed writing checkpoint " + path.string());
    }
}

inline ModelParams read_checkpoint(std::istream& is) {
    binary::expect_magic(is, kCheckpointMagic);
    const std::uint64_t d = binary::read_u64(is, "D");
    const std::uint64_t n = binary::read_u64(is, "N");
    constexpr std::uint64_t kMaxDim = std::uint64_t{1} << 28;
    if (d == 0 || n == 0 || d > kMaxDim || n > kMaxDim || d * n > kMaxDim) {
        throw Error("implausible checkpoint dimensions D=" + std::to_string(d) +
                    " N=" + std::to_string(n));
    }
    const std::uint64_t w_len = binary::read_u64(is, "W length");
    if (w_len != d * n) {
        throw Error("length field of W is " + std::to_string(w_len) + ", expected " +
                    std::to_string(d * n));
    }
    ModelParams p;
    p.W.resize(static_cast<Index>(d), static_cast<Index>(n));
    for (Index r = 0; r < p.W.rows(); ++r) {
        for (Index c = 0; c < p.W.cols(); ++c) {
            p.W(r, c) = binary::read_f64(is, "W");
        }
    }
    p.b = binary::read_f64_array(is, n, "b");
    p.mu = binary::read_f64_array(is, n, "mu");
    p.alpha = binary::read_f64_array(is, n, "alpha");
    p.beta = binary::read_f64_array(is, d, "beta");
    return p;
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error("cannot open checkpoint " + path.string());
    }
    return read_checkpoint(is);
}

/// Plain-text dump of the checkpoint header and section layout, without loading the arrays.
inline std::string describe_checkpoint(std::istream& is) {
    std::ostringstream os;
    const auto start = is.tellg();
    is.seekg(0, std::ios::end);
    const auto total = static_cast<std::uint64_t>(is.tellg() - start);
    is.seekg(start);
    binary::expect_magic(is, kCheckpointMagic);
    const std::uint64_t d = binary::read_u64(is, "D");
    const std::uint64_t n = binary::read_u64(is, "N");
    os << "magic: " << kCheckpointMagic << "\n"
       << "D (n_visible): " << d << "\n"
       << "N (n_hidden): " << n << "\n";
    std::uint64_t offset = 20;
    for (const char* name : {"W", "b", "mu", "alpha", "beta"}) {
        const std::uint64_t len = binary::read_u64(is, name);
        os << "section " << name << ": offset " << offset << ", length " << len
           << " float64\n";
        offset += 8 + len * 8;
        if (len > total || offset > total) {
            throw binary::TruncatedError(std::string("truncated file in section ") + name);
        }
        is.seekg(static_cast<std::streamoff>(len * 8), std::ios::cur);
    }
    os << "total bytes: " << offset << "\n";
    return os.str();
}

}  // namespace s3c
