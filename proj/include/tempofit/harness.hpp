#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "tempofit/backbone.hpp"
#include "tempofit/config_io.hpp"

namespace tempofit {

// A pair of observation streams that are bitwise identical at alias_step but
// differ somewhere earlier, so a memoryless policy cannot tell them apart at
// alias_step while a temporal one can. When diff_step is set the streams
// differ at exactly that step; otherwise every step before alias_step
// differs.
struct AliasingTask {
    uint64_t seed = 0;
    int64_t episode_length = 0;
    int64_t alias_step = 0;
    std::optional<int64_t> diff_step;
    std::vector<Tensor4> obs_a; // [1,1,S,model_dim] per step
    std::vector<Tensor4> obs_b;
};

AliasingTask gen_aliasing_task(uint64_t seed, int64_t episode_length, int64_t alias_step,
                               int64_t prefix_tokens, int64_t model_dim,
                               std::optional<int64_t> diff_step = std::nullopt);

// Hidden-state divergence at the alias step, plus retrieval statistics
// aggregated over stream A's run (means over every step/layer retrieval).
struct AliasingReport {
    int64_t alias_step = 0;
    std::optional<int64_t> diff_step;
    int64_t capacity = 0;
    double memoryless_divergence = 0.0; // L-inf over hidden states
    double tempofit_divergence = 0.0;
    double mean_entropy = 0.0;
    double weight_on_latest = 0.0;
    double norm_drift = 0.0;
    int64_t max_attended_length = 0;
    uint64_t hidden_hash = 0; // stream A hidden state at alias_step
};

AliasingReport run_aliasing_experiment(const AliasingTask& task, const BackboneWeights& weights,
                                       const TempoFitConfig& tempofit);

// One configuration of the ablation table; each cell changes one design
// choice relative to the base configuration.
struct AblationCell {
    std::string group;
    std::string name;
    TempoFitConfig config;
};

std::vector<AblationCell> build_ablation_grid(const BackboneConfig& backbone,
                                              const TempoFitConfig& base);

struct AblationRow {
    std::string group;
    std::string name;
    int64_t capacity = 0;
    double beta = 0.0;
    std::string retrieval_mode;
    std::string injection_mode;
    std::string mem_layers;
    bool enabled = true;
    double memoryless_divergence = 0.0;
    double tempofit_divergence = 0.0;
    double mean_entropy = 0.0;
    double weight_on_latest = 0.0;
    double norm_drift = 0.0;
    int64_t max_attended_length = 0;
    uint64_t hidden_hash = 0;
};

// Runs every valid cell on the task; invalid cells are skipped with a
// warning on stderr.
std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells,
                                      const AliasingTask& task, const BackboneWeights& weights);

struct BenchRow {
    std::string method;      // memoryless | tempofit | stacked
    int64_t history_length = 1;
    double latency_ms = 0.0; // per-step median, warm-up excluded
    double latency_ratio = 0.0;
    int64_t state_scalars = 0; // persistent cross-step buffer scalars
    int64_t attention_score_macs = 0;
    int64_t retrieval_score_macs = 0;
};

struct BenchReport {
    int repetitions = 0;
    int warmup_steps = 0;
    std::vector<BenchRow> rows;
};

// Per-step wall-clock latency (median of `repetitions` measured steps, with
// warm-up excluded and TempoFit buffers pre-filled to capacity) and the
// closed-form state size for: the memoryless baseline, TempoFit at each
// capacity, and frame stacking at each window size.
BenchReport bench_efficiency(const BackboneWeights& weights, const TempoFitConfig& base,
                             const std::vector<int64_t>& capacities,
                             const std::vector<int64_t>& stack_sizes, int repetitions);

struct TraceRow {
    int64_t t = 0;
    int layer = 0;
    int64_t head = 0;
    int64_t query_token = 0;
    int64_t history_token = 0;
    int64_t history_timestep = 0;
    double weight = 0.0;
};

// Runs a single-stream episode (batch size 1) and collects every retrieval
// weight. Steps with empty memory contribute no rows.
std::vector<TraceRow> trace_episode(const BackboneWeights& weights, const TempoFitConfig& tempofit,
                                    const std::vector<Tensor4>& obs_stream);

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows);

// Buffer metadata debug dump: per-layer capacity, stored timesteps, shapes.
nlohmann::ordered_json memory_metadata_json(const MemoryBank& bank);

// Report assembly. Every report carries a header stating that the metrics
// are toy-scale mechanism proxies, not task success rates.
nlohmann::ordered_json report_header(const std::string& kind);
nlohmann::ordered_json aliasing_report_json(const RunConfig& config, const AliasingTask& task,
                                            const std::vector<AliasingReport>& reports);
nlohmann::ordered_json ablation_report_json(const RunConfig& config,
                                            const std::vector<AblationRow>& rows);
std::string ablation_rows_csv(const std::vector<AblationRow>& rows);
nlohmann::ordered_json bench_report_json(const RunConfig& config, const BenchReport& report);
std::string bench_rows_csv(const BenchReport& report);

} // namespace tempofit
