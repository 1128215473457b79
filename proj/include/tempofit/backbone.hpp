#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "tempofit/injection.hpp"
#include "tempofit/kv_memory.hpp"
#include "tempofit/retrieval.hpp"
#include "tempofit/tensor.hpp"

namespace tempofit {

struct BackboneConfig {
    int64_t num_layers = 6;
    int64_t num_heads = 4;
    int64_t head_dim = 16;    // must be even for RoPE
    int64_t prefix_tokens = 16;
    uint64_t seed = 0;
    int64_t action_dim = 8;   // width of the linear readout
    int64_t ff_mult = 4;      // feed-forward expansion factor

    int64_t model_dim() const { return num_heads * head_dim; }
    void validate() const;
};

struct LayerWeights {
    // row-major [in, out]
    std::vector<double> w_q, w_k, w_v, w_o;       // [model_dim, model_dim]
    std::vector<double> w_ff1;                    // [model_dim, ff_dim]
    std::vector<double> w_ff2;                    // [ff_dim, model_dim]
    std::vector<double> attn_norm_gain;           // [model_dim]
    std::vector<double> ff_norm_gain;             // [model_dim]
};

// Frozen by construction: generated once from the seed, never mutated.
// content_hash() fingerprints every scalar for freeze checks.
struct BackboneWeights {
    BackboneConfig config;
    std::vector<LayerWeights> layers;
    std::vector<double> readout; // [model_dim, action_dim]

    uint64_t content_hash() const;
};

BackboneWeights backbone_init(const BackboneConfig& config);

// Middle third of the stack: [L/3, L - L/3).
std::set<int> default_mem_layers(int64_t num_layers);

struct TempoFitConfig {
    bool enabled = true;
    std::set<int> mem_layers;
    int64_t capacity = 8;
    FgtbParams fgtb;
    RetrievalMode retrieval_mode = RetrievalMode::KToK;
    InjectionMode injection_mode = InjectionMode::ResidualNormPreserving;
    double epsilon = 1e-6;
    // Experiment flag: store the post-injection K/V instead of the raw
    // projections (residual modes only; Concatenate always stores raw).
    bool write_fused = false;
    // Fill StepOutput.retrieval_diags (weight copies, entropy, norm drift).
    // Harness instrumentation; the latency benchmark switches it off.
    bool collect_diagnostics = true;

    void validate(const BackboneConfig& backbone) const;
};

// Fully-resolved defaults for a backbone: middle-third memory layers,
// capacity 8, beta 1, alpha_s = prefix_tokens, ALiBi slope schedule.
TempoFitConfig default_tempofit_config(const BackboneConfig& backbone);

// Retrieval bookkeeping for one memory-enabled layer at one step.
struct LayerDiagnostics {
    int layer = -1;
    int64_t history_tokens = 0;  // C' * S
    int64_t attended_length = 0;
    Tensor4 weights;             // [B,H,S,M]
    std::vector<int64_t> token_timesteps;
    double weight_on_latest = 0.0; // mean mass on the newest stored timestep
    double mean_entropy = 0.0;     // mean row entropy of the weights (nats)
    double norm_drift = 0.0;       // mean relative per-token K norm change
};

struct FlopCounts {
    int64_t attention_score_macs = 0; // Q.K^T multiply-accumulates
    int64_t retrieval_score_macs = 0; // key-to-key logit multiply-accumulates
};

struct StepOutput {
    Tensor4 hidden;                    // [B,1,N,model_dim]
    std::vector<double> action;        // [B * action_dim]
    std::vector<Tensor4> layer_hidden; // per-layer output hidden states
    std::vector<LayerDiagnostics> retrieval_diags;
    FlopCounts flops;
    int64_t attended_tokens = 0;       // max attended KV length over layers
};

// One TempoFit step at timestep t: project K/V pre-RoPE, retrieve from the
// layer buffer, inject, write the raw projections back, RoPE at current
// positions, then standard attention. t must advance past the bank's
// previous step.
StepOutput step(const BackboneWeights& weights, const TempoFitConfig& tempofit, MemoryBank& memories,
                const Tensor4& obs_tokens, int64_t t);

// Pure single-frame forward with no memory reads or writes.
StepOutput step_memoryless(const BackboneWeights& weights, const Tensor4& obs_tokens);

// Frame-stacking baseline: frames concatenated along the token axis before
// a standard forward.
StepOutput step_stacked(const BackboneWeights& weights, const std::vector<Tensor4>& frame_window);

} // namespace tempofit
