#pragma once

// AGTF binary tensor files:
//   "AGTF" | version u32 | dtype u32 (1=f32, 2=f64) | rank u32 | dims u64[rank] | data
// All integers and payload little-endian, payload row-major.

#include <agem/tensor.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace agem {

static_assert(std::endian::native == std::endian::little, "AGTF I/O assumes a little-endian host");

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

inline constexpr std::uint32_t kAgtfVersion = 1;

/// Writes `contents` to `path` via a sibling temp file and rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw FormatError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace detail {

template <class T>
void put(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

template <class T>
T take(const std::string& buf, std::size_t& pos, const std::string& what) {
    if (pos + sizeof(T) > buf.size()) throw FormatError("truncated AGTF data in " + what);
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace detail

/// Serializes with an explicit rank; `dims` must multiply to t.size().
inline std::string encode_agtf(const Tensor& t, const std::vector<std::uint64_t>& dims,
                               DType dtype = DType::f64) {
    std::uint64_t count = 1;
    for (auto d : dims) count *= d;
    require_shape(count == t.size(), "AGTF dims do not match tensor size");
    std::string buf = "AGTF";
    detail::put<std::uint32_t>(buf, kAgtfVersion);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(dtype));
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) detail::put<std::uint64_t>(buf, d);
    for (real v : t.data()) {
        if (dtype == DType::f32) {
            detail::put<float>(buf, static_cast<float>(v));
        } else {
            detail::put<double>(buf, static_cast<double>(v));
        }
    }
    return buf;
}

inline std::string encode_agtf(const Tensor& t, DType dtype = DType::f64) {
    const auto& s = t.shape();
    return encode_agtf(t, {s.n, s.c, s.h, s.w}, dtype);
}

/// Parses an AGTF buffer. Ranks 1..4 map onto (n, c, h, w) with trailing ones.
inline Tensor decode_agtf(const std::string& buf, const std::string& what = "buffer") {
    if (buf.size() < 4 || buf.compare(0, 4, "AGTF") != 0) throw FormatError("bad AGTF magic in " + what);
    std::size_t pos = 4;
    const auto version = detail::take<std::uint32_t>(buf, pos, what);
    if (version != kAgtfVersion) {
        throw FormatError("unsupported AGTF version " + std::to_string(version) + " in " + what);
    }
    const auto dtype = detail::take<std::uint32_t>(buf, pos, what);
    if (dtype != 1 && dtype != 2) {
        throw FormatError("unsupported AGTF dtype tag " + std::to_string(dtype) + " in " + what);
    }
    const auto rank = detail::take<std::uint32_t>(buf, pos, what);
    if (rank < 1 || rank > 4) throw FormatError("unsupported AGTF rank " + std::to_string(rank) + " in " + what);
    std::array<std::size_t, 4> dims{1, 1, 1, 1};
    for (std::uint32_t i = 0; i < rank; ++i) {
        dims[i] = static_cast<std::size_t>(detail::take<std::uint64_t>(buf, pos, what));
    }
    const Shape shape{dims[0], dims[1], dims[2], dims[3]};
    const std::size_t width = dtype == 1 ? 4 : 8;
    if (buf.size() - pos != shape.size() * width) {
        throw FormatError("AGTF payload size mismatch in " + what);
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < shape.size(); ++i) {
        t[i] = dtype == 1 ? static_cast<real>(detail::take<float>(buf, pos, what))
                          : static_cast<real>(detail::take<double>(buf, pos, what));
    }
    check_finite(t.data(), "AGTF reader (" + what + ")");
    return t;
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f64) {
    write_file_atomic(path, encode_agtf(t, dtype));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t,
                        const std::vector<std::uint64_t>& dims, DType dtype = DType::f64) {
    write_file_atomic(path, encode_agtf(t, dims, dtype));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    return decode_agtf(read_file(path), path.string());
}

} // namespace agem
