#pragma once
#include <cstdint>
#include <random>
#include <string_view>

namespace rlmm {

using rng_t = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/*
 * Sub-seed for a named stage: splitmix64(seed ^ fnv1a(tag)). Every random
 * stream in a run derives from the single user seed this way.
 */
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(seed ^ h);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index)
{
    return splitmix64(derive_seed(seed, tag) + index);
}

} // namespace rlmm
