#pragma once

// Portable random helpers. std::mt19937_64 output is fully specified by the
// standard; the distributions below replace the implementation-defined
// std:: ones so sampled values agree across standard libraries.

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ropeforge::rnd {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Seed for an independent stream identified by a path of indices.
inline std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ull));
    return h;
}

using Engine = std::mt19937_64;

// Uniform integer in [0, n), n > 0, by rejection.
inline std::uint64_t below(Engine& g, std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = g();
    } while (x >= limit);
    return x % n;
}

// Uniform double in [0, 1) with 53 random bits.
inline double unit(Engine& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

inline bool bernoulli(Engine& g, double p) { return unit(g) < p; }

template <class It>
void shuffle(It first, It last, Engine& g) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
        const auto j = below(g, i);
        std::swap(first[static_cast<std::ptrdiff_t>(i - 1)], first[static_cast<std::ptrdiff_t>(j)]);
    }
}

}  // namespace ropeforge::rnd
