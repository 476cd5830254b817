#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "s3c/types.hpp"

// Little-endian primitives shared by the on-disk formats.
namespace s3c::binary {

class TruncatedError : public Error {
public:
    using Error::Error;
};

inline void write_magic(std::ostream& os, std::string_view magic) {
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void write_u64(std::ostream& os, std::uint64_t x) {
    std::array<char, 8> buf{};
    for (int i = 0; i < 8; ++i) {
        buf[static_cast<std::size_t>(i)] = static_cast<char>((x >> (8 * i)) & 0xFFU);
    }
    os.write(buf.data(), 8);
}

inline void write_f64(std::ostream& os, double x) { write_u64(os, std::bit_cast<std::uint64_t>(x)); }

inline void write_f32(std::ostream& os, float x) {
    const auto bits = std::bit_cast<std::uint32_t>(x);
    std::array<char, 4> buf{};
    for (int i = 0; i < 4; ++i) {
        buf[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xFFU);
    }
    os.write(buf.data(), 4);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, std::string_view what) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw TruncatedError("truncated file while reading " + std::string(what));
    }
}

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::array<char, 16> buf{};
    read_exact(is, buf.data(), magic.size(), "magic");
    if (std::string_view(buf.data(), magic.size()) != magic) {
        throw Error("bad magic: expected \"" + std::string(magic) + "\"");
    }
}

inline std::uint64_t read_u64(std::istream& is, std::string_view what) {
    std::array<unsigned char, 8> buf{};
    read_exact(is, reinterpret_cast<char*>(buf.data()), 8, what);
    std::uint64_t x = 0;
    for (int i = 7; i >= 0; --i) {
        x = (x << 8) | buf[static_cast<std::size_t>(i)];
    }
    return x;
}

inline double read_f64(std::istream& is, std::string_view what) {
    return std::bit_cast<double>(read_u64(is, what));
}

inline float read_f32(std::istream& is, std::string_view what) {
    std::array<unsigned char, 4> buf{};
    read_exact(is, reinterpret_cast<char*>(buf.data()), 4, what);
    std::uint32_t x = 0;
    for (int i = 3; i >= 0; --i) {
        x = (x << 8) | buf[static_cast<std::size_t>(i)];
    }
    return std::bit_cast<float>(x);
}

/// Length-prefixed float64 array.
template <typename Derived>
void write_f64_array(std::ostream& os, const Eigen::DenseBase<Derived>& x) {
    write_u64(os, static_cast<std::uint64_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) {
        write_f64(os, static_cast<double>(x(i)));
    }
}

inline Vector read_f64_array(std::istream& is, std::uint64_t expected, std::string_view what) {
    const std::uint64_t len = read_u64(is, what);
    if (len != expected) {
        throw Error("length field of " + std::string(what) + " is " + std::to_string(len) +
                    ", expected " + std::to_string(expected));
    }
    Vector x(static_cast<Index>(len));
    for (Index i = 0; i < x.size(); ++i) {
        x[i] = read_f64(is, what);
    }
    return x;
}

}  // namespace s3c::binary
