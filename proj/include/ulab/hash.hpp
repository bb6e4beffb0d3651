#ifndef ULAB_HASH_HPP
#define ULAB_HASH_HPP

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include <zlib.h>

namespace ulab {

/// Incremental 64-bit FNV-1a.
class Fnv1a {
public:
    static constexpr std::uint64_t offset_basis = 0xcbf29ce484222325ULL;
    static constexpr std::uint64_t prime = 0x100000001b3ULL;

    void update(std::span<const unsigned char> bytes) {
        for (unsigned char b : bytes) {
            state_ ^= b;
            state_ *= prime;
        }
    }

    void update(std::string_view text) {
        update(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
    }

    void update_u64(std::uint64_t value) {
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) {
            buf[i] = static_cast<unsigned char>(value >> (8 * i));
        }
        update(std::span<const unsigned char>(buf, 8));
    }

    // little-endian IEEE-754 bit pattern
    void update_f64(double value) { update_u64(std::bit_cast<std::uint64_t>(value)); }

    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = offset_basis;
};

inline std::uint64_t fnv1a(std::string_view text) {
    Fnv1a h;
    h.update(text);
    return h.digest();
}

inline std::string to_hex(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

} // namespace ulab

#endif
