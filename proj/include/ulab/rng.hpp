#ifndef ULAB_RNG_HPP
#define ULAB_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ulab {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Child seed for a named sub-stream; the same (seed, tags) always yields the same stream.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t s = splitmix64(seed);
    for (std::uint64_t t : tags) {
        s = splitmix64(s ^ splitmix64(t + 0x632be59bd9b4e019ULL));
    }
    return s;
}

} // namespace ulab

#endif
