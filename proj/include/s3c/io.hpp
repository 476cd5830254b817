#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "s3c/binary_io.hpp"
#include "s3c/pipeline.hpp"

namespace s3c {

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw Error("cannot open " + path.string() + " for reading");
    }
    return is;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    return os;
}

inline void finish_output(std::ofstream& os, const std::filesystem::path& path) {
    os.flush();
    if (!os) {
        throw Error("failed writing " + path.string());
    }
}

inline bool has_magic(const std::filesystem::path& path, std::string_view magic) {
    std::ifstream is(path, std::ios::binary);
    std::string buf(magic.size(), '\0');
    is.read(buf.data(), static_cast<std::streamsize>(magic.size()));
    return is.gcount() == static_cast<std::streamsize>(magic.size()) && buf == magic;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CIFAR binary batches: records of 1 label byte followed by 32x32 pixels per
// channel plane (R, G, B), each plane row-major.

inline constexpr Index kCifarSide = 32;
inline constexpr Index kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

inline ImageBatch read_cifar(const std::filesystem::path& path, Index max_images = 0) {
    auto is = detail::open_input(path);
    const auto size = static_cast<Index>(std::filesystem::file_size(path));
    if (size % kCifarRecord != 0) {
        throw binary::TruncatedError(path.string() + " is not a whole number of " + std::to_string(kCifarRecord) +
                                     "-byte CIFAR records (" + std::to_string(size) + " bytes)");
    }
    Index count = size / kCifarRecord;
    if (max_images > 0) {
        count = std::min(count, max_images);
    }
    ImageBatch out(count, kCifarSide, kCifarSide, 3);
    std::vector<unsigned char> rec(static_cast<std::size_t>(kCifarRecord));
    const Index plane = kCifarSide * kCifarSide;
    for (Index m = 0; m < count; ++m) {
        binary::read_exact(is, reinterpret_cast<char*>(rec.data()), rec.size(), "CIFAR record");
        out.labels[static_cast<std::size_t>(m)] = rec[0];
        for (Index ch = 0; ch < 3; ++ch) {
            for (Index k = 0; k < plane; ++k) {
                out.at(m, k / kCifarSide, k % kCifarSide, ch) = rec[static_cast<std::size_t>(1 + ch * plane + k)];
            }
        }
    }
    return out;
}

inline void write_cifar(const std::filesystem::path& path, const ImageBatch& images) {
    images.check();
    if (images.height != kCifarSide || images.width != kCifarSide || images.channels != 3) {
        throw DimensionError("CIFAR records hold 32x32x3 images");
    }
    auto os = detail::open_output(path);
    std::vector<char> rec(static_cast<std::size_t>(kCifarRecord));
    const Index plane = kCifarSide * kCifarSide;
    for (Index m = 0; m < images.count; ++m) {
        rec[0] = static_cast<char>(images.labels[static_cast<std::size_t>(m)]);
        for (Index ch = 0; ch < 3; ++ch) {
            for (Index k = 0; k < plane; ++k) {
                const float v = std::clamp(std::round(images.at(m, k / kCifarSide, k % kCifarSide, ch)), 0.0f, 255.0f);
                rec[static_cast<std::size_t>(1 + ch * plane + k)] = static_cast<char>(static_cast<unsigned char>(v));
            }
        }
        os.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    }
    detail::finish_output(os, path);
}

// ---------------------------------------------------------------------------
/*
 * "S3F1" tensor: magic, M (rows) and F (row length) as little-endian uint64,
 * M*F little-endian float32 values row-major, then M label bytes. Used for
 * pooled features (one row per image) and for raw vectors (one row per sample).
 */
inline constexpr std::string_view kTensorMagic = "S3F1";

struct Tensor {
    MatrixX<float> rows;  // F x M: column m is row m of the file
    std::vector<std::uint8_t> labels;

    Index count() const noexcept { return rows.cols(); }
    Index length() const noexcept { return rows.rows(); }
};

inline void write_tensor(std::ostream& os, const MatrixX<float>& rows, const std::vector<std::uint8_t>& labels) {
    if (labels.size() != static_cast<std::size_t>(rows.cols())) {
        throw DimensionError("need one label per tensor row");
    }
    binary::write_magic(os, kTensorMagic);
    binary::write_u64(os, static_cast<std::uint64_t>(rows.cols()));
    binary::write_u64(os, static_cast<std::uint64_t>(rows.rows()));
    std::vector<char> buf(static_cast<std::size_t>(rows.rows()) * 4);
    for (Index m = 0; m < rows.cols(); ++m) {
        for (Index f = 0; f < rows.rows(); ++f) {
            const auto bits = std::bit_cast<std::uint32_t>(rows(f, m));
            for (int i = 0; i < 4; ++i) {
                buf[static_cast<std::size_t>(4 * f + i)] = static_cast<char>((bits >> (8 * i)) & 0xFFU);
            }
        }
        os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    os.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

inline void save_tensor(const std::filesystem::path& path, const MatrixX<float>& rows,
                        const std::vector<std::uint8_t>& labels) {
    auto os = detail::open_output(path);
    write_tensor(os, rows, labels);
    detail::finish_output(os, path);
}

inline Tensor read_tensor(std::istream& is) {
    binary::expect_magic(is, kTensorMagic);
    const std::uint64_t m = binary::read_u64(is, "M");
    const std::uint64_t f = binary::read_u64(is, "F");
    if (m > (std::uint64_t{1} << 40) || f > (std::uint64_t{1} << 32) || (m > 0 && f > (std::uint64_t{1} << 40) / m)) {
        throw Error("implausible tensor header: M=" + std::to_string(m) + " F=" + std::to_string(f));
    }
    Tensor t;
    t.rows.resize(static_cast<Index>(f), static_cast<Index>(m));
    std::vector<unsigned char> buf(static_cast<std::size_t>(f) * 4);
    for (Index r = 0; r < static_cast<Index>(m); ++r) {
        binary::read_exact(is, reinterpret_cast<char*>(buf.data()), buf.size(), "tensor values");
        for (Index k = 0; k < static_cast<Index>(f); ++k) {
            std::uint32_t bits = 0;
            for (int i = 3; i >= 0; --i) {
                bits = (bits << 8) | buf[static_cast<std::size_t>(4 * k + i)];
            }
            t.rows(k, r) = std::bit_cast<float>(bits);
        }
    }
    t.labels.resize(static_cast<std::size_t>(m));
    binary::read_exact(is, reinterpret_cast<char*>(t.labels.data()), t.labels.size(), "tensor labels");
    return t;
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    auto is = detail::open_input(path);
    return read_tensor(is);
}

inline bool is_tensor_file(const std::filesystem::path& path) { return detail::has_magic(path, kTensorMagic); }

/// One line per row: label, then the values.
inline void write_tensor_csv(std::ostream& os, const MatrixX<float>& rows, const std::vector<std::uint8_t>& labels) {
    os << "label";
    for (Index f = 0; f < rows.rows(); ++f) {
        os << ",f" << f;
    }
    os << '\n' << std::setprecision(9);
    for (Index m = 0; m < rows.cols(); ++m) {
        os << static_cast<int>(labels[static_cast<std::size_t>(m)]);
        for (Index f = 0; f < rows.rows(); ++f) {
            os << ',' << rows(f, m);
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
/*
 * "S3P1" preprocessor: magic, patch side P and channels C as uint64, eps_c and
 * eps_z as float64, then len + mean (P*P*C float64) and len + whitening matrix
 * (row-major float64). Written next to a model trained on images, as
 * "<model>.pre".
 */
inline constexpr std::string_view kPreprocessorMagic = "S3P1";

inline std::filesystem::path preprocessor_path(const std::filesystem::path& model_path) {
    return model_path.string() + ".pre";
}

inline void save_preprocessor(const std::filesystem::path& path, const Preprocessor& pre) {
    if (!pre.fitted) {
        throw Error("refusing to save an unfitted preprocessor");
    }
    auto os = detail::open_output(path);
    binary::write_magic(os, kPreprocessorMagic);
    binary::write_u64(os, static_cast<std::uint64_t>(pre.patch_side));
    binary::write_u64(os, static_cast<std::uint64_t>(pre.channels));
    binary::write_f64(os, pre.eps_c);
    binary::write_f64(os, pre.eps_z);
    binary::write_f64_array(os, pre.mean);
    const Matrix row_major = pre.whitening.transpose();  // column-major storage of the transpose
    binary::write_f64_array(os, row_major.reshaped());
    detail::finish_output(os, path);
}

inline Preprocessor load_preprocessor(const std::filesystem::path& path) {
    auto is = detail::open_input(path);
    binary::expect_magic(is, kPreprocessorMagic);
    Preprocessor pre;
    pre.patch_side = static_cast<Index>(binary::read_u64(is, "patch side"));
    pre.channels = static_cast<Index>(binary::read_u64(is, "channels"));
    if (pre.patch_side < 1 || pre.patch_side > 1024 || (pre.channels != 1 && pre.channels != 3)) {
        throw Error("implausible preprocessor header in " + path.string());
    }
    pre.eps_c = binary::read_f64(is, "eps_c");
    pre.eps_z = binary::read_f64(is, "eps_z");
    const auto d = static_cast<std::uint64_t>(pre.dim());
    pre.mean = binary::read_f64_array(is, d, "mean");
    const Vector w = binary::read_f64_array(is, d * d, "whitening matrix");
    pre.whitening = Eigen::Map<const Matrix>(w.data(), pre.dim(), pre.dim()).transpose();
    pre.fitted = true;
    return pre;
}

// ---------------------------------------------------------------------------
// Filter dumps

/// Binary PGM (P5) of a single-channel image with values rescaled so the
/// largest magnitude maps to 0 or 255 and zero maps to mid-gray.
inline void write_pgm(const std::filesystem::path& path, const Matrix& image) {
    auto os = detail::open_output(path);
    os << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
    const double scale = std::max(image.cwiseAbs().maxCoeff(), 1e-12);
    for (Index r = 0; r < image.rows(); ++r) {
        for (Index c = 0; c < image.cols(); ++c) {
            const double v = 127.5 + 127.5 * image(r, c) / scale;
            os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L))));
        }
    }
    detail::finish_output(os, path);
}

/// Binary PPM (P6) of a (row, col, channel) interleaved 3-channel patch.
inline void write_ppm(const std::filesystem::path& path, const Vector& patch, Index side) {
    if (patch.size() != side * side * 3) {
        throw DimensionError("PPM dump needs a side*side*3 vector");
    }
    auto os = detail::open_output(path);
    os << "P6\n" << side << ' ' << side << "\n255\n";
    const double scale = std::max(patch.cwiseAbs().maxCoeff(), 1e-12);
    for (Index k = 0; k < patch.size(); ++k) {
        const double v = 127.5 + 127.5 * patch[k] / scale;
        os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L))));
    }
    detail::finish_output(os, path);
}

/// Side x side image of a dictionary column; channels are averaged.
inline Matrix column_image(const Vector& column, Index side, Index channels) {
    if (column.size() != side * side * channels) {
        throw DimensionError("column of length " + std::to_string(column.size()) + " is not a " +
                             std::to_string(side) + "x" + std::to_string(side) + "x" + std::to_string(channels) +
                             " patch");
    }
    Matrix img(side, side);
    for (Index r = 0; r < side; ++r) {
        for (Index c = 0; c < side; ++c) {
            img(r, c) = column.segment((r * side + c) * channels, channels).mean();
        }
    }
    return img;
}

}  // namespace s3c
