#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "tempofit/kv_memory.hpp"
#include "tempofit/tensor.hpp"

namespace tempofit {

// How history tokens are addressed: with the current keys (native address
// space) or with the current queries (ablation mode).
enum class RetrievalMode { KToK, QToK };

// Frame-gap temporal bias parameters. The bias added to retrieval logits is
//   bias(h, j) = -(beta * slopes[h] * |t - tau_j| * alpha_s)
// with one slope per head.
struct FgtbParams {
    double beta = 1.0;           // decay strength, >= 0
    double alpha_s = 1.0;        // frame-gap-to-token scale, > 0
    std::vector<double> slopes;  // head-wise m_h, all > 0
};

// Geometric head-wise slope schedule: m_h = 2^(-8(h+1)/H).
std::vector<double> head_slopes(int64_t num_heads);

// Bias over history tokens, broadcast over query rows: [1,H,1,M].
// Zero exactly at gap 0, nonpositive everywhere.
Tensor4 fgtb_bias(int64_t t, const std::vector<int64_t>& token_timesteps, const FgtbParams& params);

// Scaled key-to-key similarity logits: k_cur . k_hist^T / sqrt(d), plus an
// optional additive mask of shape [B,H,S,M]. Both inputs are pre-RoPE.
Tensor4 kk_logits(const Tensor4& k_cur, const Tensor4& k_hist, const Tensor4* mask = nullptr);

struct RetrievalResult {
    Tensor4 weights; // [B,H,S,M], rows sum to 1
    Tensor4 k_ctx;   // [B,H,S,d]
    Tensor4 v_ctx;   // [B,H,S,d]
};

// Address the snapshot with the current keys (or queries in QToK mode), add
// the frame-gap bias, softmax over the whole history token axis, and read
// out context as weights * history. An empty snapshot yields nullopt.
std::optional<RetrievalResult> retrieve(const Tensor4& k_cur,
                                        const Tensor4* q_cur,
                                        const std::optional<MemorySnapshot>& snapshot,
                                        int64_t t,
                                        const FgtbParams& fgtb,
                                        RetrievalMode mode,
                                        const Tensor4* mask = nullptr);

} // namespace tempofit
