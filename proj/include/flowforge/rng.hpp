#pragma once

#include <cstdint>
#include <random>

namespace flowforge {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Independent stream `stream` of the master seed. Used to give every sample,
// epoch and request its own generator so results do not depend on the order
// work is scheduled in.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream = 0) {
    std::uint64_t s = splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
    s = splitmix64(s ^ splitmix64(substream + 0x2545F4914F6CDD1Dull));
    return Rng(s);
}

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double standard_normal(Rng& rng) {
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace flowforge
