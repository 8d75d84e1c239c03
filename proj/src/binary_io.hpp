#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace flowforge::detail {

inline std::uint32_t byteswap32(std::uint32_t x) {
    return (x >> 24) | ((x >> 8) & 0xFF00u) | ((x << 8) & 0xFF0000u) | (x << 24);
}

inline std::uint32_t to_le32(std::uint32_t x) {
    if constexpr (std::endian::native == std::endian::little) return x;
    else return byteswap32(x);
}

inline void put_u32(std::ostream& out, std::uint32_t x) {
    const std::uint32_t le = to_le32(x);
    out.write(reinterpret_cast<const char*>(&le), 4);
}

inline std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t x;
    std::memcpy(&x, p, 4);
    return to_le32(x);
}

inline void put_f32s(std::ostream& out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size() * 4));
    } else {
        for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
}

inline void fix_f32s_from_le(std::span<float> values) {
    if constexpr (std::endian::native != std::endian::little) {
        for (float& f : values) f = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(f)));
    }
}

}  // namespace flowforge::detail
