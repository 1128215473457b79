#include "tempofit/numerics.hpp"

#include <cmath>
#include <limits>

#include "fast_exp.hpp"

namespace tempofit {

Tensor4 matmul_qk(const Tensor4& a, const Tensor4& b) {
    if (a.batch != b.batch || a.heads != b.heads || a.dim != b.dim) {
        throw DimensionError("matmul_qk: incompatible shapes [" + a.shape_string() + "] vs [" +
                             b.shape_string() + "]");
    }
    const int64_t B = a.batch, H = a.heads, N = a.tokens, M = b.tokens, d = a.dim;
    Tensor4 out(B, H, N, M);

    // Per (batch, head): transpose the second operand once so the inner
    // accumulation runs over contiguous rows of length M.
    std::vector<double> bt(static_cast<size_t>(d * M));
    for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t hi = 0; hi < H; ++hi) {
            for (int64_t j = 0; j < M; ++j) {
                const double* brow = b.row(bi, hi, j);
                for (int64_t k = 0; k < d; ++k) bt[static_cast<size_t>(k * M + j)] = brow[k];
            }
            for (int64_t i = 0; i < N; ++i) {
                const double* arow = a.row(bi, hi, i);
                double* orow = out.row(bi, hi, i);
                for (int64_t k = 0; k < d; ++k) {
                    const double ak = arow[k];
                    const double* btrow = bt.data() + k * M;
                    for (int64_t j = 0; j < M; ++j) orow[j] += ak * btrow[j];
                }
            }
        }
    }
    return out;
}

Tensor4 matmul_av(const Tensor4& w, const Tensor4& v) {
    if (w.batch != v.batch || w.heads != v.heads || w.dim != v.tokens) {
        throw DimensionError("matmul_av: incompatible shapes [" + w.shape_string() + "] vs [" +
                             v.shape_string() + "]");
    }
    const int64_t B = w.batch, H = w.heads, N = w.tokens, M = w.dim, d = v.dim;
    Tensor4 out(B, H, N, d);
    for (int64_t bi = 0; bi < B; ++bi) {
        for (int64_t hi = 0; hi < H; ++hi) {
            for (int64_t i = 0; i < N; ++i) {
                const double* wrow = w.row(bi, hi, i);
                double* orow = out.row(bi, hi, i);
                for (int64_t j = 0; j < M; ++j) {
                    const double wj = wrow[j];
                    const double* vrow = v.row(bi, hi, j);
                    for (int64_t k = 0; k < d; ++k) orow[k] += wj * vrow[k];
                }
            }
        }
    }
    return out;
}

Tensor4 softmax_rows(const Tensor4& logits) {
    const int64_t rows = logits.batch * logits.heads * logits.tokens;
    const int64_t M = logits.dim;
    Tensor4 out(logits.batch, logits.heads, logits.tokens, logits.dim);
    const double neg_inf = -std::numeric_limits<double>::infinity();

    for (int64_t r = 0; r < rows; ++r) {
        const double* in = logits.data.data() + r * M;
        double* o = out.data.data() + r * M;
        double mx = neg_inf;
        for (int64_t j = 0; j < M; ++j) mx = std::max(mx, in[j]);
        if (mx == neg_inf) {
            throw MaskingError("softmax_rows: fully masked row (all logits are -inf)");
        }
        double sum = 0.0;
        for (int64_t j = 0; j < M; ++j) {
            const double e = detail::fast_exp(in[j] - mx); // exp(-inf) == 0 keeps masked entries at zero
            o[j] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j < M; ++j) o[j] *= inv;
    }
    return out;
}

Tensor4 l2_norm_lastdim(const Tensor4& x) {
    Tensor4 out(x.batch, x.heads, x.tokens, 1);
    const int64_t rows = x.batch * x.heads * x.tokens;
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = x.data.data() + r * x.dim;
        double ss = 0.0;
        for (int64_t k = 0; k < x.dim; ++k) ss += in[k] * in[k];
        out.data[static_cast<size_t>(r)] = std::sqrt(ss);
    }
    return out;
}

Tensor4 rope_apply(const Tensor4& x, const std::vector<int64_t>& positions, const RopeParams& params) {
    const int64_t d = x.dim;
    if (params.head_dim != d) {
        throw DimensionError("rope_apply: params.head_dim " + std::to_string(params.head_dim) +
                             " != tensor dim " + std::to_string(d));
    }
    if (d % 2 != 0) {
        throw ConfigError("rope_apply: head_dim must be even, got " + std::to_string(d));
    }
    if (params.base_frequency <= 0.0) {
        throw ConfigError("rope_apply: base_frequency must be positive");
    }
    if (static_cast<int64_t>(positions.size()) != x.tokens) {
        throw DimensionError("rope_apply: positions length " + std::to_string(positions.size()) +
                             " != token count " + std::to_string(x.tokens));
    }
    for (int64_t p : positions) {
        if (p < 0) throw ConfigError("rope_apply: positions must be nonnegative");
    }

    const int64_t pairs = d / 2;
    std::vector<double> theta(static_cast<size_t>(pairs));
    for (int64_t i = 0; i < pairs; ++i) {
        theta[static_cast<size_t>(i)] =
            std::pow(params.base_frequency, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    }

    // cos/sin table shared across batch and heads: [tokens][pairs]
    std::vector<double> cos_tab(static_cast<size_t>(x.tokens * pairs));
    std::vector<double> sin_tab(static_cast<size_t>(x.tokens * pairs));
    for (int64_t n = 0; n < x.tokens; ++n) {
        const double pos = static_cast<double>(positions[static_cast<size_t>(n)]);
        for (int64_t i = 0; i < pairs; ++i) {
            const double angle = pos * theta[static_cast<size_t>(i)];
            cos_tab[static_cast<size_t>(n * pairs + i)] = std::cos(angle);
            sin_tab[static_cast<size_t>(n * pairs + i)] = std::sin(angle);
        }
    }

    Tensor4 out(x.batch, x.heads, x.tokens, d);
    for (int64_t b = 0; b < x.batch; ++b) {
        for (int64_t h = 0; h < x.heads; ++h) {
            for (int64_t n = 0; n < x.tokens; ++n) {
                const double* in = x.row(b, h, n);
                double* o = out.row(b, h, n);
                const double* ct = cos_tab.data() + n * pairs;
                const double* st = sin_tab.data() + n * pairs;
                for (int64_t i = 0; i < pairs; ++i) {
                    const double x0 = in[2 * i], x1 = in[2 * i + 1];
                    o[2 * i] = x0 * ct[i] - x1 * st[i];
                    o[2 * i + 1] = x0 * st[i] + x1 * ct[i];
                }
            }
        }
    }
    return out;
}

} // namespace tempofit
