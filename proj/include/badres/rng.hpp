#pragma once

#include <cstdint>
#include <random>
#include <vector>

// Seeded randomness helpers. Everything here is pinned to explicit bit
// manipulation of the mt19937 stream so that identical seeds give identical
// results on every platform; std::uniform_* distributions and std::shuffle
// are implementation-defined and would break that.

namespace badres::rng {

// splitmix64 finalizer, used to derive independent sub-seeds from one base.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::mt19937 make_engine(std::uint64_t seed) {
    return std::mt19937(static_cast<std::uint32_t>(seed ^ (seed >> 32)));
}

// Uniform float in [lo, hi) from the top 24 bits of one draw.
inline float uniform_float(std::mt19937& g, float lo, float hi) {
    const std::uint32_t bits = g() >> 8;
    return lo + (hi - lo) * (static_cast<float>(bits) * (1.0f / 16777216.0f));
}

// Unbiased uniform index in [0, n) via rejection sampling.
inline std::size_t uniform_index(std::mt19937& g, std::size_t n) {
    if (n <= 1) return 0;
    const std::uint32_t limit =
        0xffffffffu - (0xffffffffu % static_cast<std::uint32_t>(n));
    std::uint32_t r;
    do {
        r = g();
    } while (r >= limit);
    return static_cast<std::size_t>(r % static_cast<std::uint32_t>(n));
}

// Fisher-Yates.
template <typename T>
void shuffle(std::vector<T>& v, std::mt19937& g) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = uniform_index(g, i);
        std::swap(v[i - 1], v[j]);
    }
}

// k distinct indices drawn from [0, n), in draw order.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n,
                                                           std::size_t k,
                                                           std::mt19937& g) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k && i < n; ++i) {
        const std::size_t j = i + uniform_index(g, n - i);
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

}  // namespace badres::rng
