#pragma once

// Raw little-endian float32 arrays and JSON side files.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tadsr/tensor.hpp"

namespace tadsr {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
inline std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
}
}  // namespace detail

template <class S>
void append_f32(std::ostream& os, std::span<const S> values) {
    std::vector<std::uint32_t> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(values[i]);
        std::uint32_t u;
        std::memcpy(&u, &f, sizeof u);
        buf[i] = detail::to_le(u);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!os) throw IoError("write failed");
}

template <class S>
void write_f32(const std::filesystem::path& path, std::span<const S> values) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    append_f32(os, values);
}

template <class S>
std::vector<S> read_f32(std::istream& is, std::size_t count) {
    std::vector<std::uint32_t> buf(count);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!is) throw IoError("short read of float32 data");
    std::vector<S> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t u = detail::to_le(buf[i]);
        float f;
        std::memcpy(&f, &u, sizeof f);
        out[i] = static_cast<S>(f);
    }
    return out;
}

template <class S>
Tensor<S> read_tensor_f32(const std::filesystem::path& path, Shape shape) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    const auto expected = static_cast<std::uintmax_t>(shape.size() * sizeof(float));
    if (std::filesystem::file_size(path) != expected) {
        throw IoError(path.string() + ": size does not match shape " + shape.str());
    }
    return Tensor<S>(shape, read_f32<S>(is, shape.size()));
}

template <class S>
void write_tensor_f32(const std::filesystem::path& path, const Tensor<S>& t) {
    write_f32<S>(path, t.span());
}

inline nlohmann::json shape_json(const Shape& s) { return nlohmann::json::array({s.n, s.c, s.h, s.w}); }

inline Shape shape_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 4) throw IoError("shape must be a 4-element array");
    return Shape{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

}  // namespace tadsr
