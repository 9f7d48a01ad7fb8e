#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dhm {

// All randomness in the project flows from one root seed. Sub-generators are
// derived from (seed, purpose tag) so adding a consumer does not shift the
// streams of existing ones.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 1469598103934665603ull ^ seed;
    for (char c : tag) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view tag) {
    return std::mt19937_64(derive_seed(seed, tag));
}

}  // namespace dhm
