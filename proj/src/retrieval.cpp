#include "tempofit/retrieval.hpp"

#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include "fast_exp.hpp"
#include "tempofit/numerics.hpp"

namespace tempofit {

namespace detail {

struct RetrieveArgs {
    const Tensor4& addressing;
    const Tensor4& k_hist;
    const Tensor4& v_hist;
    const Tensor4& bias;
    const Tensor4* mask;
    RetrievalResult& result;
};

// Dual K/V context readout for one (batch, head) slice:
//   ctx[i, :] = sum_j weights[i, j] * hist[j, :]
// History is consumed in blocks small enough to stay cached while every
// query-row tile passes over them, so each history byte crosses the memory
// hierarchy once per call rather than once per row. Within a block the
// accumulators live in registers; between blocks they persist in the
// (zero-initialized) output rows.
template <int Dim>
void readout_slice(const double* weights, int64_t S, int64_t M, int64_t d_run,
                   const double* k_hist, const double* v_hist, double* k_ctx, double* v_ctx) {
    const int64_t d = Dim > 0 ? Dim : d_run;
    constexpr int64_t kTile = 4;
    constexpr int64_t kBlock = 256;

    if constexpr (Dim > 0) {
        for (int64_t j0 = 0; j0 < M; j0 += kBlock) {
            const int64_t jn = std::min(kBlock, M - j0);
            const double* kh0 = k_hist + j0 * Dim;
            const double* vh0 = v_hist + j0 * Dim;

            int64_t i0 = 0;
            for (; i0 + kTile <= S; i0 += kTile) {
                double k0[Dim], k1[Dim], k2[Dim], k3[Dim];
                double v0[Dim], v1[Dim], v2[Dim], v3[Dim];
                for (int64_t k = 0; k < Dim; ++k) {
                    k0[k] = k_ctx[i0 * Dim + k];
                    k1[k] = k_ctx[(i0 + 1) * Dim + k];
                    k2[k] = k_ctx[(i0 + 2) * Dim + k];
                    k3[k] = k_ctx[(i0 + 3) * Dim + k];
                    v0[k] = v_ctx[i0 * Dim + k];
                    v1[k] = v_ctx[(i0 + 1) * Dim + k];
                    v2[k] = v_ctx[(i0 + 2) * Dim + k];
                    v3[k] = v_ctx[(i0 + 3) * Dim + k];
                }
                const double* kr = kh0;
                const double* vr = vh0;
                const double* w0 = weights + i0 * M + j0;
                for (int64_t j = 0; j < jn; ++j) {
                    const double wa = w0[j];
                    const double wb = w0[M + j];
                    const double wc = w0[2 * M + j];
                    const double wd = w0[3 * M + j];
                    for (int64_t k = 0; k < Dim; ++k) {
                        const double kk = kr[k], vv = vr[k];
                        k0[k] += wa * kk;
                        k1[k] += wb * kk;
                        k2[k] += wc * kk;
                        k3[k] += wd * kk;
                        v0[k] += wa * vv;
                        v1[k] += wb * vv;
                        v2[k] += wc * vv;
                        v3[k] += wd * vv;
                    }
                    kr += Dim;
                    vr += Dim;
                }
                for (int64_t k = 0; k < Dim; ++k) {
                    k_ctx[i0 * Dim + k] = k0[k];
                    k_ctx[(i0 + 1) * Dim + k] = k1[k];
                    k_ctx[(i0 + 2) * Dim + k] = k2[k];
                    k_ctx[(i0 + 3) * Dim + k] = k3[k];
                    v_ctx[i0 * Dim + k] = v0[k];
                    v_ctx[(i0 + 1) * Dim + k] = v1[k];
                    v_ctx[(i0 + 2) * Dim + k] = v2[k];
                    v_ctx[(i0 + 3) * Dim + k] = v3[k];
                }
            }
            for (; i0 < S; ++i0) {
                const double* wrow = weights + i0 * M + j0;
                double* ko = k_ctx + i0 * Dim;
                double* vo = v_ctx + i0 * Dim;
                const double* kr = kh0;
                const double* vr = vh0;
                for (int64_t j = 0; j < jn; ++j) {
                    const double w = wrow[j];
                    for (int64_t k = 0; k < Dim; ++k) {
                        ko[k] += w * kr[k];
                        vo[k] += w * vr[k];
                    }
                    kr += Dim;
                    vr += Dim;
                }
            }
        }
    } else {
        for (int64_t i0 = 0; i0 < S; ++i0) {
            const double* wrow = weights + i0 * M;
            double* ko = k_ctx + i0 * d;
            double* vo = v_ctx + i0 * d;
            const double* kr = k_hist;
            const double* vr = v_hist;
            for (int64_t j = 0; j < M; ++j) {
                const double w = wrow[j];
                for (int64_t k = 0; k < d; ++k) {
                    ko[k] += w * kr[k];
                    vo[k] += w * vr[k];
                }
                kr += d;
                vr += d;
            }
        }
    }
}

// Fused per-(batch, head) retrieval: history transposed once so the logit
// accumulation streams along the history axis; bias, softmax and the dual
// K/V readout run over the same row buffer with no intermediate tensors.
// This is the per-step hot path, so the head dimension is a template
// parameter (Dim == 0 selects the generic runtime-width variant).
template <int Dim>
void retrieve_kernel(RetrieveArgs& args) {
    const Tensor4& addressing = args.addressing;
    const Tensor4& k_hist = args.k_hist;
    const Tensor4& v_hist = args.v_hist;
    const int64_t B = addressing.batch, H = addressing.heads, S = addressing.tokens;
    const int64_t M = k_hist.tokens;
    const int64_t d = Dim > 0 ? Dim : addressing.dim;

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double neg_inf = -std::numeric_limits<double>::infinity();

    // scratch for the transposed history keys, reused across calls
    thread_local std::vector<double> hist_t;
    hist_t.resize(static_cast<size_t>(d * M));

    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            const double* khist_base = k_hist.row(b, h, 0);
            constexpr int64_t kTransposeBlock = 64; // keeps the source block cached across k passes
            for (int64_t j0 = 0; j0 < M; j0 += kTransposeBlock) {
                const int64_t jn = std::min(kTransposeBlock, M - j0);
                for (int64_t k = 0; k < d; ++k) {
                    double* tr = hist_t.data() + k * M + j0;
                    const double* src = khist_base + j0 * d + k;
                    for (int64_t j = 0; j < jn; ++j) tr[j] = src[j * d];
                }
            }
            const double* brow = args.bias.row(0, h, 0);

            // logit accumulation, four query rows per pass over the
            // transposed history
            int64_t i0 = 0;
            for (; i0 + 4 <= S; i0 += 4) {
                double* w0 = args.result.weights.row(b, h, i0); // zero-initialized
                double* w1 = args.result.weights.row(b, h, i0 + 1);
                double* w2 = args.result.weights.row(b, h, i0 + 2);
                double* w3 = args.result.weights.row(b, h, i0 + 3);
                const double* a0 = addressing.row(b, h, i0);
                const double* a1 = addressing.row(b, h, i0 + 1);
                const double* a2 = addressing.row(b, h, i0 + 2);
                const double* a3 = addressing.row(b, h, i0 + 3);
                for (int64_t k = 0; k < d; ++k) {
                    const double ak0 = a0[k], ak1 = a1[k], ak2 = a2[k], ak3 = a3[k];
                    const double* tr = hist_t.data() + k * M;
                    for (int64_t j = 0; j < M; ++j) {
                        const double tj = tr[j];
                        w0[j] += ak0 * tj;
                        w1[j] += ak1 * tj;
                        w2[j] += ak2 * tj;
                        w3[j] += ak3 * tj;
                    }
                }
            }
            for (; i0 < S; ++i0) {
                double* wrow = args.result.weights.row(b, h, i0);
                const double* arow = addressing.row(b, h, i0);
                for (int64_t k = 0; k < d; ++k) {
                    const double ak = arow[k];
                    const double* tr = hist_t.data() + k * M;
                    for (int64_t j = 0; j < M; ++j) wrow[j] += ak * tr[j];
                }
            }

            for (int64_t i = 0; i < S; ++i) {
                double* wrow = args.result.weights.row(b, h, i);

                double mx = neg_inf;
                if (args.mask != nullptr) {
                    const double* mrow = args.mask->row(b, h, i);
                    for (int64_t j = 0; j < M; ++j) {
                        wrow[j] = wrow[j] * inv_sqrt_d + mrow[j] + brow[j];
                        mx = std::max(mx, wrow[j]);
                    }
                } else {
                    for (int64_t j = 0; j < M; ++j) {
                        wrow[j] = wrow[j] * inv_sqrt_d + brow[j];
                        mx = std::max(mx, wrow[j]);
                    }
                }
                if (mx == neg_inf) {
                    throw MaskingError("retrieve: fully masked retrieval row");
                }

                double lanes[8] = {};
                int64_t j = 0;
                for (; j + 8 <= M; j += 8) {
                    for (int64_t l = 0; l < 8; ++l) {
                        const double e = fast_exp(wrow[j + l] - mx);
                        wrow[j + l] = e;
                        lanes[l] += e;
                    }
                }
                double sum = 0.0;
                for (; j < M; ++j) {
                    const double e = fast_exp(wrow[j] - mx);
                    wrow[j] = e;
                    sum += e;
                }
                for (double lane : lanes) sum += lane;
                const double inv_sum = 1.0 / sum;
                for (int64_t jj = 0; jj < M; ++jj) wrow[jj] *= inv_sum;
            }

            readout_slice<Dim>(args.result.weights.row(b, h, 0), S, M, d, khist_base,
                               v_hist.row(b, h, 0), args.result.k_ctx.row(b, h, 0),
                               args.result.v_ctx.row(b, h, 0));
        }
    }
}

} // namespace detail

namespace {

void validate_fgtb(const FgtbParams& params, int64_t num_heads) {
    if (params.beta < 0.0) {
        throw ConfigError("FgtbParams: beta must be >= 0, got " + std::to_string(params.beta));
    }
    if (!(params.alpha_s > 0.0)) {
        throw ConfigError("FgtbParams: alpha_s must be > 0, got " + std::to_string(params.alpha_s));
    }
    if (static_cast<int64_t>(params.slopes.size()) != num_heads) {
        throw ConfigError("FgtbParams: expected " + std::to_string(num_heads) + " slopes, got " +
                          std::to_string(params.slopes.size()));
    }
    for (double m : params.slopes) {
        if (!(m > 0.0)) throw ConfigError("FgtbParams: slopes must be > 0");
    }
}

} // namespace

std::vector<double> head_slopes(int64_t num_heads) {
    std::vector<double> slopes(static_cast<size_t>(num_heads));
    for (int64_t h = 0; h < num_heads; ++h) {
        slopes[static_cast<size_t>(h)] =
            std::exp2(-8.0 * static_cast<double>(h + 1) / static_cast<double>(num_heads));
    }
    return slopes;
}

Tensor4 fgtb_bias(int64_t t, const std::vector<int64_t>& token_timesteps, const FgtbParams& params) {
    const int64_t H = static_cast<int64_t>(params.slopes.size());
    const int64_t M = static_cast<int64_t>(token_timesteps.size());
    if (H < 1) throw ConfigError("fgtb_bias: slopes must be nonempty");
    if (M < 1) throw ConfigError("fgtb_bias: token_timesteps must be nonempty");
    validate_fgtb(params, H);

    Tensor4 bias(1, H, 1, M);
    for (int64_t h = 0; h < H; ++h) {
        const double m_h = params.slopes[static_cast<size_t>(h)];
        double* row = bias.row(0, h, 0);
        for (int64_t j = 0; j < M; ++j) {
            const double gap = static_cast<double>(std::llabs(t - token_timesteps[static_cast<size_t>(j)]));
            row[j] = -(params.beta * m_h * gap * params.alpha_s);
        }
    }
    return bias;
}

Tensor4 kk_logits(const Tensor4& k_cur, const Tensor4& k_hist, const Tensor4* mask) {
    Tensor4 logits = matmul_qk(k_cur, k_hist);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(k_cur.dim));
    for (double& v : logits.data) v *= inv_sqrt_d;
    if (mask != nullptr) {
        require_same_shape(logits, *mask, "kk_logits mask");
        for (size_t i = 0; i < logits.data.size(); ++i) logits.data[i] += mask->data[i];
    }
    return logits;
}

std::optional<RetrievalResult> retrieve(const Tensor4& k_cur,
                                        const Tensor4* q_cur,
                                        const std::optional<MemorySnapshot>& snapshot,
                                        int64_t t,
                                        const FgtbParams& fgtb,
                                        RetrievalMode mode,
                                        const Tensor4* mask) {
    if (mode == RetrievalMode::QToK && q_cur == nullptr) {
        throw ConfigError("retrieve: QToK mode requires the current query projections");
    }
    if (!snapshot.has_value()) return std::nullopt;

    const Tensor4& addressing = (mode == RetrievalMode::QToK) ? *q_cur : k_cur;
    if (mode == RetrievalMode::QToK) {
        require_same_shape(*q_cur, k_cur, "retrieve q_cur/k_cur");
    }
    validate_fgtb(fgtb, k_cur.heads);

    const Tensor4& k_hist = snapshot->k_hist;
    const Tensor4& v_hist = snapshot->v_hist;
    require_same_shape(k_hist, v_hist, "retrieve snapshot k/v");
    if (static_cast<int64_t>(snapshot->token_timesteps.size()) != k_hist.tokens) {
        throw DimensionError("retrieve: token_timesteps length does not match history tokens");
    }

    if (addressing.batch != k_hist.batch || addressing.heads != k_hist.heads ||
        addressing.dim != k_hist.dim) {
        throw DimensionError("retrieve: incompatible shapes [" + addressing.shape_string() +
                             "] vs [" + k_hist.shape_string() + "]");
    }
    const int64_t B = addressing.batch, H = addressing.heads, S = addressing.tokens;
    const int64_t d = addressing.dim, M = k_hist.tokens;
    if (mask != nullptr && (mask->batch != B || mask->heads != H || mask->tokens != S ||
                            mask->dim != M)) {
        throw DimensionError("retrieve: mask shape [" + mask->shape_string() + "] must be [" +
                             Tensor4::shape_string(B, H, S, M) + "]");
    }

    const Tensor4 bias = fgtb_bias(t, snapshot->token_timesteps, fgtb);

    RetrievalResult result;
    result.weights = Tensor4(B, H, S, M);
    result.k_ctx = Tensor4(B, H, S, d);
    result.v_ctx = Tensor4(B, H, S, d);

    detail::RetrieveArgs args{addressing, k_hist, v_hist, bias, mask, result};
    switch (d) {
    case 4: detail::retrieve_kernel<4>(args); break;
    case 8: detail::retrieve_kernel<8>(args); break;
    case 16: detail::retrieve_kernel<16>(args); break;
    case 32: detail::retrieve_kernel<32>(args); break;
    case 64: detail::retrieve_kernel<64>(args); break;
    default: detail::retrieve_kernel<0>(args); break;
    }
    return result;
}

} // namespace tempofit
