#pragma once

#include "narslu/common.hpp"
#include "narslu/params.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace narslu {

// Checkpoint container: a format-version header, a free-form metadata string
// (JSON by convention), then (name, shape, float32 payload) records.
//
//   magic "NARC" | u32 version | u32 meta_len | meta bytes
//   u32 n_records
//   per record: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data[]
//
// All integers and floats little-endian; payloads row-major.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated integer field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    const std::uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::string& path, const ModelParams<Scalar>& params,
                     const std::string& meta) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
    os.write("NARC", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(meta.size()));
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(params.count()));
    for (const auto& [name, m] : params.tensors()) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, 2);
        detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
        detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
        for (Index r = 0; r < m.rows(); ++r) {
            for (Index c = 0; c < m.cols(); ++c) {
                detail::put_f32(os, static_cast<float>(m(r, c)));
            }
        }
    }
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

template <typename Scalar>
struct LoadedCheckpoint {
    ModelParams<Scalar> params;
    std::string meta;
};

template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "NARC") {
        throw IoError("checkpoint: bad magic in " + path);
    }
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint32_t meta_len = detail::get_u32(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), meta_len);
    if (!is) throw IoError("checkpoint: truncated metadata");
    LoadedCheckpoint<Scalar> out;
    out.meta = std::move(meta);
    const std::uint32_t n = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t ndim = detail::get_u32(is);
        if (ndim != 2) throw IoError("checkpoint: record " + name + " is not 2-d");
        const std::uint32_t rows = detail::get_u32(is);
        const std::uint32_t cols = detail::get_u32(is);
        Matrix<Scalar>& m = out.params.add(name, rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r) {
            for (std::uint32_t c = 0; c < cols; ++c) {
                m(r, c) = static_cast<Scalar>(detail::get_f32(is));
            }
        }
        if (!is) throw IoError("checkpoint: truncated payload in record " + name);
    }
    return out;
}

}  // namespace narslu
