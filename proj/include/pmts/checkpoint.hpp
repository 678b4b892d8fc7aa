#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "pmts/tensor.hpp"

namespace pmts {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Ordered named-tensor container; order is part of the byte-exact format.
using TensorMap = std::vector<std::pair<std::string, Tensor>>;

// PMTS checkpoint format, version 1:
//   magic "PMTS" | u32 LE version | u32 LE tensor count
//   per tensor: u16 LE name length | name bytes | u8 dtype (0=f32, 1=f64)
//               | u8 ndim | ndim x u32 LE dims | raw LE payload
// The writer always emits f64; the loader widens f32 payloads.
namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void need(std::istream& is, char* dst, std::size_t n, const std::string& path) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) {
        throw IoError("checkpoint '" + path + "': truncated file");
    }
}

inline std::uint16_t get_u16(std::istream& is, const std::string& path) {
    unsigned char b[2];
    need(is, reinterpret_cast<char*>(b), 2, path);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    need(is, reinterpret_cast<char*>(b), 4, path);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    need(is, reinterpret_cast<char*>(b), 8, path);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline float get_f32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    need(is, reinterpret_cast<char*>(b), 4, path);
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_tensors(const std::string& path, const TensorMap& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint '" + path + "': cannot open for writing");
    os.write("PMTS", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) throw IoError("checkpoint: tensor name too long: " + name);
        detail::put_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(static_cast<char>(1)); // f64
        os.put(static_cast<char>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
        for (double v : t.values()) detail::put_f64(os, v);
    }
    if (!os) throw IoError("checkpoint '" + path + "': write failed");
}

inline TensorMap load_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint '" + path + "': cannot open");
    char magic[4];
    detail::need(is, magic, 4, path);
    if (std::memcmp(magic, "PMTS", 4) != 0) {
        throw IoError("checkpoint '" + path + "': bad magic (not a PMTS file)");
    }
    const std::uint32_t version = detail::get_u32(is, path);
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = detail::get_u32(is, path);
    TensorMap out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = detail::get_u16(is, path);
        std::string name(name_len, '\0');
        detail::need(is, name.data(), name_len, path);
        char dtype_c, ndim_c;
        detail::need(is, &dtype_c, 1, path);
        detail::need(is, &ndim_c, 1, path);
        const int dtype = static_cast<unsigned char>(dtype_c);
        const int ndim = static_cast<unsigned char>(ndim_c);
        if (dtype != 0 && dtype != 1) {
            throw IoError("checkpoint '" + path + "': tensor '" + name + "' has unknown dtype " +
                          std::to_string(dtype));
        }
        Shape shape(static_cast<std::size_t>(ndim));
        for (int d = 0; d < ndim; ++d) shape[d] = detail::get_u32(is, path);
        std::vector<double> values(shape_numel(shape));
        for (double& v : values) v = (dtype == 1) ? detail::get_f64(is, path) : detail::get_f32(is, path);
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return out;
}

inline const Tensor* find_tensor(const TensorMap& m, const std::string& name) {
    for (const auto& [n, t] : m)
        if (n == name) return &t;
    return nullptr;
}

// Loader-side helper: fetch a named tensor and verify its shape.
inline Tensor take_tensor(const TensorMap& m, const std::string& name, const Shape& expect,
                          const std::string& path) {
    const Tensor* t = find_tensor(m, name);
    if (!t) throw IoError("checkpoint '" + path + "': missing tensor '" + name + "'");
    if (t->shape() != expect) {
        throw IoError("checkpoint '" + path + "': tensor '" + name + "' has shape " +
                      shape_str(t->shape()) + ", expected " + shape_str(expect));
    }
    return t->clone();
}

} // namespace pmts
