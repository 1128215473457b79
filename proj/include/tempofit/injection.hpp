#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "tempofit/kv_memory.hpp"
#include "tempofit/retrieval.hpp"
#include "tempofit/tensor.hpp"

namespace tempofit {

// How retrieved context is fused into the current KV table. The residual
// modes keep shapes, masks and token counts unchanged; Concatenate appends
// the raw history tokens and exists to demonstrate why that fails.
enum class InjectionMode { ResidualNormPreserving, ResidualPlain, Concatenate };

struct InjectionOutput {
    Tensor4 k_fused;
    Tensor4 v_fused;
    int64_t attended_length = 0; // S in residual modes, S + C'*S in Concatenate
};

// Elementwise residual update: fused = current + context.
std::pair<Tensor4, Tensor4> residual_load(const Tensor4& k_cur, const Tensor4& v_cur,
                                          const Tensor4& k_ctx, const Tensor4& v_ctx);

// Rescales every token of `fused` back to the matching token norm of
// `original`: fused * ||original|| / max(||fused||, epsilon). Norms are per
// (batch, head, token) over the head dimension.
Tensor4 norm_preserve(const Tensor4& fused, const Tensor4& original, double epsilon);

// Applies the configured injection mode. An empty retrieval result is a
// bitwise passthrough in every mode. Concatenate reads the appended tokens
// from the snapshot, so it requires one when retrieval is nonempty.
InjectionOutput inject(const Tensor4& k_cur, const Tensor4& v_cur,
                       const std::optional<RetrievalResult>& retrieval,
                       const std::optional<MemorySnapshot>& snapshot,
                       InjectionMode mode, double epsilon);

} // namespace tempofit
