#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "tempofit/errors.hpp"

namespace tempofit {

// Dense row-major [batch, heads, tokens, dim] tensor of doubles.
// All dims must be >= 1; data is zero-initialized on construction.
struct Tensor4 {
    int64_t batch = 0;
    int64_t heads = 0;
    int64_t tokens = 0;
    int64_t dim = 0;
    std::vector<double> data;

    Tensor4() = default;

    Tensor4(int64_t b, int64_t h, int64_t n, int64_t d)
        : batch(b), heads(h), tokens(n), dim(d) {
        if (b < 1 || h < 1 || n < 1 || d < 1) {
            throw DimensionError("Tensor4: all dims must be >= 1, got [" + shape_string(b, h, n, d) + "]");
        }
        data.assign(static_cast<size_t>(b * h * n * d), 0.0);
    }

    int64_t numel() const { return batch * heads * tokens * dim; }

    bool defined() const { return !data.empty(); }

    bool same_shape(const Tensor4& o) const {
        return batch == o.batch && heads == o.heads && tokens == o.tokens && dim == o.dim;
    }

    double* row(int64_t b, int64_t h, int64_t n) {
        return data.data() + ((b * heads + h) * tokens + n) * dim;
    }
    const double* row(int64_t b, int64_t h, int64_t n) const {
        return data.data() + ((b * heads + h) * tokens + n) * dim;
    }

    double& at(int64_t b, int64_t h, int64_t n, int64_t d) { return row(b, h, n)[d]; }
    double at(int64_t b, int64_t h, int64_t n, int64_t d) const { return row(b, h, n)[d]; }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool bitwise_equal(const Tensor4& o) const {
        if (!same_shape(o)) return false;
        for (size_t i = 0; i < data.size(); ++i) {
            // bit compare: distinguishes -0.0/0.0 and matches NaN payloads
            if (std::memcmp(&data[i], &o.data[i], sizeof(double)) != 0) return false;
        }
        return true;
    }

    std::string shape_string() const { return shape_string(batch, heads, tokens, dim); }

    static std::string shape_string(int64_t b, int64_t h, int64_t n, int64_t d) {
        return std::to_string(b) + "," + std::to_string(h) + "," + std::to_string(n) + "," + std::to_string(d);
    }
};

inline void require_same_shape(const Tensor4& a, const Tensor4& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch [" + a.shape_string() + "] vs [" +
                             b.shape_string() + "]");
    }
}

} // namespace tempofit
