#pragma once

#include <cstdint>
#include <random>

#include "tempofit/tensor.hpp"

namespace tempofit {

// Deterministic RNG. Doubles are derived from raw mt19937_64 output so the
// stream is identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // uniform in [-1, 1)
    double symmetric() { return 2.0 * uniform01() - 1.0; }

private:
    std::mt19937_64 eng_;
};

inline Tensor4 random_tensor(Rng& rng, int64_t b, int64_t h, int64_t n, int64_t d, double scale = 1.0) {
    Tensor4 t(b, h, n, d);
    for (double& v : t.data) v = scale * rng.symmetric();
    return t;
}

} // namespace tempofit
