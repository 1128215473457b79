#pragma once

#include <cstdint>
#include <cstring>

namespace tempofit::detail {

// Polynomial exp for softmax hot loops. Relative error ~2e-16 on [-708, 709],
// exact at 0, hard zero at or below -708 (libm is subnormal there anyway),
// zero for -inf. Branchless selects keep caller loops vectorizable.
inline double fast_exp(double x) {
    constexpr double kLog2E = 1.44269504088896340736;
    constexpr double kLn2Hi = 6.93147180369123816490e-01;
    constexpr double kLn2Lo = 1.90821492927058770002e-10;
    constexpr double kMagic = 6755399441055744.0; // 1.5 * 2^52: round-to-nearest bit trick

    const bool underflow = !(x > -708.0); // also catches -inf
    double xc = x < -709.0 ? -709.0 : x;
    xc = xc > 709.0 ? 709.0 : xc;

    const double z = xc * kLog2E + kMagic;
    int64_t raw;
    std::memcpy(&raw, &z, sizeof raw);
    const auto n = static_cast<int32_t>(raw); // low bits hold the rounded integer
    const double nd = z - kMagic;

    double r = xc - nd * kLn2Hi;
    r -= nd * kLn2Lo;

    // Taylor polynomial to r^12; |r| <= ln2/2 keeps the tail below 2e-16.
    double p = 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;

    const uint64_t bits = static_cast<uint64_t>(static_cast<int64_t>(n) + 1023) << 52;
    double scale;
    std::memcpy(&scale, &bits, sizeof scale);
    return underflow ? 0.0 : p * scale;
}

} // namespace tempofit::detail
