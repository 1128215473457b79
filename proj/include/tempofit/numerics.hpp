#pragma once

#include <cstdint>
#include <vector>

#include "tempofit/tensor.hpp"

namespace tempofit {

// Rotary position embedding parameters. head_dim must be even.
struct RopeParams {
    int64_t head_dim = 0;
    double base_frequency = 10000.0;
};

// out[b,h,i,j] = sum_k a[b,h,i,k] * b[b,h,j,k]
// a: [B,H,N,d], b: [B,H,M,d] -> [B,H,N,M]
Tensor4 matmul_qk(const Tensor4& a, const Tensor4& b);

// out[b,h,i,k] = sum_j w[b,h,i,j] * v[b,h,j,k]
// w: [B,H,N,M], v: [B,H,M,d] -> [B,H,N,d]
Tensor4 matmul_av(const Tensor4& w, const Tensor4& v);

// Row-wise softmax over the last axis, computed with per-row max subtraction.
// -inf logits act as additive masks; a fully masked row throws MaskingError.
Tensor4 softmax_rows(const Tensor4& logits);

// Per-token L2 norm over the last axis -> [B,H,N,1].
Tensor4 l2_norm_lastdim(const Tensor4& x);

// Rotates each consecutive coordinate pair (2i, 2i+1) of every token by
// angle pos * theta_i with theta_i = base^(-2i/d). positions has one
// nonnegative entry per token.
Tensor4 rope_apply(const Tensor4& x, const std::vector<int64_t>& positions, const RopeParams& params);

} // namespace tempofit
