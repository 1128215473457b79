#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace tempofit {

// FNV-1a 64-bit over raw bytes.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::vector<double>& v, uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(v.data(), v.size() * sizeof(double), seed);
}

} // namespace tempofit
