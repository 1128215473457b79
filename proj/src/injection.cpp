#include "tempofit/injection.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "tempofit/numerics.hpp"

namespace tempofit {

std::pair<Tensor4, Tensor4> residual_load(const Tensor4& k_cur, const Tensor4& v_cur,
                                          const Tensor4& k_ctx, const Tensor4& v_ctx) {
    require_same_shape(k_cur, k_ctx, "residual_load k");
    require_same_shape(v_cur, v_ctx, "residual_load v");
    require_same_shape(k_cur, v_cur, "residual_load k/v");

    Tensor4 k = k_cur, v = v_cur;
    for (size_t i = 0; i < k.data.size(); ++i) k.data[i] += k_ctx.data[i];
    for (size_t i = 0; i < v.data.size(); ++i) v.data[i] += v_ctx.data[i];
    return {std::move(k), std::move(v)};
}

namespace {

// fused is rescaled token-by-token to match original's norms
void norm_rescale_inplace(Tensor4& fused, const Tensor4& original, double epsilon) {
    const int64_t rows = fused.batch * fused.heads * fused.tokens;
    const int64_t d = fused.dim;
    for (int64_t r = 0; r < rows; ++r) {
        double* f = fused.data.data() + r * d;
        const double* o = original.data.data() + r * d;
        double fss = 0.0, oss = 0.0;
        for (int64_t k = 0; k < d; ++k) {
            fss += f[k] * f[k];
            oss += o[k] * o[k];
        }
        const double scale = std::sqrt(oss) / std::max(std::sqrt(fss), epsilon);
        for (int64_t k = 0; k < d; ++k) f[k] *= scale;
    }
}

} // namespace

Tensor4 norm_preserve(const Tensor4& fused, const Tensor4& original, double epsilon) {
    require_same_shape(fused, original, "norm_preserve");
    if (!(epsilon > 0.0)) {
        throw ConfigError("norm_preserve: epsilon must be > 0");
    }
    Tensor4 out = fused;
    norm_rescale_inplace(out, original, epsilon);
    return out;
}

InjectionOutput inject(const Tensor4& k_cur, const Tensor4& v_cur,
                       const std::optional<RetrievalResult>& retrieval,
                       const std::optional<MemorySnapshot>& snapshot,
                       InjectionMode mode, double epsilon) {
    require_same_shape(k_cur, v_cur, "inject k/v");
    if (!(epsilon > 0.0)) {
        throw ConfigError("inject: epsilon must be > 0");
    }

    InjectionOutput out;
    if (!retrieval.has_value()) {
        // no history: identity passthrough in every mode
        out.k_fused = k_cur;
        out.v_fused = v_cur;
        out.attended_length = k_cur.tokens;
        return out;
    }

    switch (mode) {
    case InjectionMode::ResidualPlain: {
        auto [k, v] = residual_load(k_cur, v_cur, retrieval->k_ctx, retrieval->v_ctx);
        out.k_fused = std::move(k);
        out.v_fused = std::move(v);
        out.attended_length = k_cur.tokens;
        break;
    }
    case InjectionMode::ResidualNormPreserving: {
        auto [k, v] = residual_load(k_cur, v_cur, retrieval->k_ctx, retrieval->v_ctx);
        norm_rescale_inplace(k, k_cur, epsilon);
        norm_rescale_inplace(v, v_cur, epsilon);
        out.k_fused = std::move(k);
        out.v_fused = std::move(v);
        out.attended_length = k_cur.tokens;
        break;
    }
    case InjectionMode::Concatenate: {
        if (!snapshot.has_value()) {
            throw ConfigError("inject: Concatenate mode needs the memory snapshot");
        }
        const Tensor4& k_hist = snapshot->k_hist;
        const Tensor4& v_hist = snapshot->v_hist;
        if (k_hist.batch != k_cur.batch || k_hist.heads != k_cur.heads || k_hist.dim != k_cur.dim) {
            throw DimensionError("inject: history shape [" + k_hist.shape_string() +
                                 "] incompatible with current [" + k_cur.shape_string() + "]");
        }
        const int64_t S = k_cur.tokens, M = k_hist.tokens, d = k_cur.dim;
        out.k_fused = Tensor4(k_cur.batch, k_cur.heads, S + M, d);
        out.v_fused = Tensor4(k_cur.batch, k_cur.heads, S + M, d);
        for (int64_t b = 0; b < k_cur.batch; ++b) {
            for (int64_t h = 0; h < k_cur.heads; ++h) {
                std::memcpy(out.k_fused.row(b, h, 0), k_cur.row(b, h, 0),
                            static_cast<size_t>(S * d) * sizeof(double));
                std::memcpy(out.k_fused.row(b, h, S), k_hist.row(b, h, 0),
                            static_cast<size_t>(M * d) * sizeof(double));
                std::memcpy(out.v_fused.row(b, h, 0), v_cur.row(b, h, 0),
                            static_cast<size_t>(S * d) * sizeof(double));
                std::memcpy(out.v_fused.row(b, h, S), v_hist.row(b, h, 0),
                            static_cast<size_t>(M * d) * sizeof(double));
            }
        }
        out.attended_length = S + M;
        break;
    }
    }
    return out;
}

} // namespace tempofit
