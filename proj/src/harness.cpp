#include "tempofit/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tempofit/hashing.hpp"
#include "tempofit/rng.hpp"

namespace tempofit {

namespace {

double linf(const Tensor4& a, const Tensor4& b) {
    require_same_shape(a, b, "divergence");
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string layer_set_string(const std::set<int>& layers) {
    std::string out;
    for (int l : layers) {
        if (!out.empty()) out += ' ';
        out += std::to_string(l);
    }
    return out;
}

// Aggregates retrieval diagnostics over every (step, layer) retrieval that
// actually happened during an episode.
struct EpisodeStats {
    double entropy_sum = 0.0;
    double weight_on_latest_sum = 0.0;
    double norm_drift_sum = 0.0;
    int64_t retrievals = 0;
    int64_t max_attended = 0;

    void absorb(const StepOutput& out) {
        for (const LayerDiagnostics& diag : out.retrieval_diags) {
            entropy_sum += diag.mean_entropy;
            weight_on_latest_sum += diag.weight_on_latest;
            norm_drift_sum += diag.norm_drift;
            ++retrievals;
        }
        max_attended = std::max(max_attended, out.attended_tokens);
    }

    double mean_entropy() const { return retrievals ? entropy_sum / retrievals : 0.0; }
    double mean_weight_on_latest() const {
        return retrievals ? weight_on_latest_sum / retrievals : 0.0;
    }
    double mean_norm_drift() const { return retrievals ? norm_drift_sum / retrievals : 0.0; }
};

// Runs steps 0..last_step inclusive and returns the final StepOutput.
StepOutput run_stream(const BackboneWeights& weights, const TempoFitConfig& tempofit,
                      const std::vector<Tensor4>& obs, int64_t last_step, EpisodeStats* stats) {
    MemoryBank bank(tempofit.mem_layers, tempofit.capacity);
    StepOutput out;
    for (int64_t t = 0; t <= last_step; ++t) {
        out = step(weights, tempofit, bank, obs[static_cast<size_t>(t)], t);
        if (stats != nullptr) stats->absorb(out);
    }
    return out;
}

double median(std::vector<double> samples) {
    std::sort(samples.begin(), samples.end());
    const size_t n = samples.size();
    if (n == 0) return 0.0;
    if (n % 2 == 1) return samples[n / 2];
    return 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

} // namespace

AliasingTask gen_aliasing_task(uint64_t seed, int64_t episode_length, int64_t alias_step,
                               int64_t prefix_tokens, int64_t model_dim,
                               std::optional<int64_t> diff_step) {
    if (!(alias_step >= 1 && alias_step < episode_length)) {
        throw ConfigError("gen_aliasing_task: need 1 <= alias_step < episode_length, got " +
                          std::to_string(alias_step) + " / " + std::to_string(episode_length));
    }
    if (diff_step.has_value() && !(*diff_step >= 0 && *diff_step < alias_step)) {
        throw ConfigError("gen_aliasing_task: diff_step must lie in [0, alias_step)");
    }

    Rng rng(seed);
    AliasingTask task;
    task.seed = seed;
    task.episode_length = episode_length;
    task.alias_step = alias_step;
    task.diff_step = diff_step;

    task.obs_a.reserve(static_cast<size_t>(episode_length));
    for (int64_t t = 0; t < episode_length; ++t) {
        task.obs_a.push_back(random_tensor(rng, 1, 1, prefix_tokens, model_dim));
    }
    task.obs_b = task.obs_a;

    auto redraw = [&](int64_t t) {
        Tensor4& frame = task.obs_b[static_cast<size_t>(t)];
        frame = random_tensor(rng, 1, 1, prefix_tokens, model_dim);
        if (frame.bitwise_equal(task.obs_a[static_cast<size_t>(t)])) {
            frame.data[0] += 1.0; // astronomically unlikely, but the invariant is checked below
        }
    };
    if (diff_step.has_value()) {
        redraw(*diff_step);
    } else {
        for (int64_t t = 0; t < alias_step; ++t) redraw(t);
    }

    // construction invariants
    if (!task.obs_a[static_cast<size_t>(alias_step)].bitwise_equal(
            task.obs_b[static_cast<size_t>(alias_step)])) {
        throw ConfigError("gen_aliasing_task: alias frames must be bitwise equal");
    }
    bool any_differs = false;
    for (int64_t t = 0; t < alias_step && !any_differs; ++t) {
        any_differs = !task.obs_a[static_cast<size_t>(t)].bitwise_equal(task.obs_b[static_cast<size_t>(t)]);
    }
    if (!any_differs) {
        throw ConfigError("gen_aliasing_task: histories must differ before the alias step");
    }
    return task;
}

AliasingReport run_aliasing_experiment(const AliasingTask& task, const BackboneWeights& weights,
                                       const TempoFitConfig& tempofit) {
    AliasingReport report;
    report.alias_step = task.alias_step;
    report.diff_step = task.diff_step;
    report.capacity = tempofit.capacity;

    const auto t_star = static_cast<size_t>(task.alias_step);
    StepOutput ma = step_memoryless(weights, task.obs_a[t_star]);
    StepOutput mb = step_memoryless(weights, task.obs_b[t_star]);
    report.memoryless_divergence = linf(ma.hidden, mb.hidden);

    EpisodeStats stats;
    StepOutput ta = run_stream(weights, tempofit, task.obs_a, task.alias_step, &stats);
    StepOutput tb = run_stream(weights, tempofit, task.obs_b, task.alias_step, nullptr);
    report.tempofit_divergence = linf(ta.hidden, tb.hidden);
    report.mean_entropy = stats.mean_entropy();
    report.weight_on_latest = stats.mean_weight_on_latest();
    report.norm_drift = stats.mean_norm_drift();
    report.max_attended_length = stats.max_attended;
    report.hidden_hash = fnv1a64(ta.hidden.data);
    return report;
}

std::vector<AblationCell> build_ablation_grid(const BackboneConfig& backbone,
                                              const TempoFitConfig& base) {
    std::vector<AblationCell> cells;
    auto add = [&](const std::string& group, const std::string& name, TempoFitConfig cfg) {
        cells.push_back(AblationCell{group, name, std::move(cfg)});
    };

    // component contribution
    {
        TempoFitConfig none = base;
        none.enabled = false;
        add("component", "none", none);
        TempoFitConfig kv_only = base;
        kv_only.fgtb.beta = 0.0;
        add("component", "kv_only", kv_only);
        add("component", "kv_fgtb", base);
    }
    // retrieval strategy
    {
        TempoFitConfig qk = base;
        qk.retrieval_mode = RetrievalMode::QToK;
        add("retrieval", "q_to_k", qk);
        TempoFitConfig kk = base;
        kk.retrieval_mode = RetrievalMode::KToK;
        add("retrieval", "k_to_k", kk);
    }
    // injection strategy
    {
        TempoFitConfig concat = base;
        concat.injection_mode = InjectionMode::Concatenate;
        add("injection", "concatenate", concat);
        TempoFitConfig plain = base;
        plain.injection_mode = InjectionMode::ResidualPlain;
        add("injection", "residual_plain", plain);
        TempoFitConfig norm = base;
        norm.injection_mode = InjectionMode::ResidualNormPreserving;
        add("injection", "residual_norm_preserving", norm);
    }
    // layer selection
    {
        for (const char* name : {"all", "top", "bottom", "intermediate"}) {
            TempoFitConfig cfg = base;
            cfg.mem_layers = parse_layer_subset(name, backbone.num_layers);
            add("layers", name, cfg);
        }
    }
    // history capacity
    for (int64_t c : {4, 8, 16, 32}) {
        TempoFitConfig cfg = base;
        cfg.capacity = c;
        add("capacity", "c" + std::to_string(c), cfg);
    }
    return cells;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells,
                                      const AliasingTask& task, const BackboneWeights& weights) {
    std::vector<AblationRow> rows;
    for (const AblationCell& cell : cells) {
        try {
            cell.config.validate(weights.config);
        } catch (const ConfigError& e) {
            std::cerr << "warning: skipping ablation cell " << cell.group << "/" << cell.name << ": "
                      << e.what() << "\n";
            continue;
        }

        AliasingReport rep = run_aliasing_experiment(task, weights, cell.config);
        AblationRow row;
        row.group = cell.group;
        row.name = cell.name;
        row.capacity = cell.config.capacity;
        row.beta = cell.config.fgtb.beta;
        row.retrieval_mode = to_string(cell.config.retrieval_mode);
        row.injection_mode = to_string(cell.config.injection_mode);
        row.mem_layers = layer_set_string(cell.config.mem_layers);
        row.enabled = cell.config.enabled;
        row.memoryless_divergence = rep.memoryless_divergence;
        row.tempofit_divergence = rep.tempofit_divergence;
        row.mean_entropy = rep.mean_entropy;
        row.weight_on_latest = rep.weight_on_latest;
        row.norm_drift = rep.norm_drift;
        row.max_attended_length = rep.max_attended_length;
        row.hidden_hash = rep.hidden_hash;
        rows.push_back(std::move(row));
    }
    return rows;
}

BenchReport bench_efficiency(const BackboneWeights& weights, const TempoFitConfig& base,
                             const std::vector<int64_t>& capacities,
                             const std::vector<int64_t>& stack_sizes, int repetitions) {
    if (repetitions < 10) {
        throw ConfigError("bench_efficiency: repetitions must be >= 10");
    }
    const int warmup = 5;
    const BackboneConfig& cfg = weights.config;

#if defined(__GLIBC__)
    // Keep freed step buffers resident: the default trim policy returns
    // them to the kernel between steps, which charges a page-fault storm
    // to every forward pass being timed.
    mallopt(M_TRIM_THRESHOLD, -1);
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
#endif

    // pre-generated observation pool; generation stays outside the timers
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    const int64_t pool_size = 64;
    std::vector<Tensor4> pool;
    pool.reserve(static_cast<size_t>(pool_size));
    for (int64_t i = 0; i < pool_size; ++i) {
        pool.push_back(random_tensor(rng, 1, 1, cfg.prefix_tokens, cfg.model_dim()));
    }
    auto obs_at = [&](int64_t t) -> const Tensor4& {
        return pool[static_cast<size_t>(t % pool_size)];
    };

    using clock = std::chrono::steady_clock;
    auto time_ms = [](clock::time_point a, clock::time_point b) {
        return std::chrono::duration<double, std::milli>(b - a).count();
    };

    BenchReport report;
    report.repetitions = repetitions;
    report.warmup_steps = warmup;

    // One stateful runner per configuration. The timed steps interleave
    // round-robin across runners so slow machine-level drift (frequency,
    // scheduling) lands on every configuration evenly instead of biasing
    // whichever ran last.
    struct Runner {
        BenchRow row;
        std::function<void()> step_once;
        std::function<void(BenchRow&)> finish;
        std::vector<double> samples;
    };
    std::vector<Runner> runners;

    {
        Runner r;
        r.row.method = "memoryless";
        r.row.history_length = 1;
        r.row.state_scalars = 0;
        auto t = std::make_shared<int64_t>(0);
        r.step_once = [&weights, &obs_at, t]() {
            step_memoryless(weights, obs_at((*t)++));
        };
        r.finish = [&weights, &obs_at](BenchRow& row) {
            StepOutput probe = step_memoryless(weights, obs_at(0));
            row.attention_score_macs = probe.flops.attention_score_macs;
            row.retrieval_score_macs = 0;
        };
        runners.push_back(std::move(r));
    }

    for (int64_t c : capacities) {
        Runner r;
        r.row.method = "tempofit";
        r.row.history_length = c;
        auto tf = std::make_shared<TempoFitConfig>(base);
        tf->capacity = c;
        tf->enabled = true;
        tf->collect_diagnostics = false; // instrumentation stays out of the timings
        auto bank = std::make_shared<MemoryBank>(tf->mem_layers, tf->capacity);
        auto t = std::make_shared<int64_t>(0);
        r.step_once = [&weights, &obs_at, tf, bank, t]() {
            step(weights, *tf, *bank, obs_at(*t), *t);
            ++(*t);
        };
        r.finish = [&weights, &obs_at, tf, bank, t](BenchRow& row) {
            StepOutput probe = step(weights, *tf, *bank, obs_at(*t), *t);
            ++(*t);
            row.state_scalars = bank->stored_scalars();
            row.attention_score_macs = probe.flops.attention_score_macs;
            row.retrieval_score_macs = probe.flops.retrieval_score_macs;
        };
        runners.push_back(std::move(r));
    }

    for (int64_t f : stack_sizes) {
        Runner r;
        r.row.method = "stacked";
        r.row.history_length = f;
        // carried state: the previous F-1 frames
        r.row.state_scalars = (f - 1) * 1 * cfg.prefix_tokens * cfg.model_dim();
        auto window = std::make_shared<std::vector<Tensor4>>();
        for (int64_t i = 0; i < f; ++i) window->push_back(obs_at(i));
        auto t = std::make_shared<int64_t>(f);
        r.step_once = [&weights, &obs_at, window, t, f]() {
            (*window)[static_cast<size_t>(*t % f)] = obs_at(*t);
            step_stacked(weights, *window);
            ++(*t);
        };
        r.finish = [&weights, &obs_at, window, t, f](BenchRow& row) {
            (*window)[static_cast<size_t>(*t % f)] = obs_at(*t);
            StepOutput out = step_stacked(weights, *window);
            ++(*t);
            row.attention_score_macs = out.flops.attention_score_macs;
            row.retrieval_score_macs = out.flops.retrieval_score_macs;
        };
        runners.push_back(std::move(r));
    }

    // warm-up: fill every TempoFit buffer to capacity, then the shared
    // warm-up steps; none of it is timed
    for (Runner& r : runners) {
        const int64_t fill = r.row.method == "tempofit" ? r.row.history_length : 0;
        for (int64_t i = 0; i < fill + warmup; ++i) r.step_once();
        r.samples.reserve(static_cast<size_t>(repetitions));
    }

    for (int rep = 0; rep < repetitions; ++rep) {
        for (Runner& r : runners) {
            const auto t0 = clock::now();
            r.step_once();
            const auto t1 = clock::now();
            r.samples.push_back(time_ms(t0, t1));
        }
    }

    const size_t baseline_index = 0;
    const double baseline_ms = median(runners[baseline_index].samples);
    for (Runner& r : runners) {
        r.finish(r.row);
        r.row.latency_ms = median(r.samples);
        r.row.latency_ratio = r.row.latency_ms / baseline_ms;
        report.rows.push_back(r.row);
    }
    report.rows[baseline_index].latency_ratio = 1.0;
    return report;
}

std::vector<TraceRow> trace_episode(const BackboneWeights& weights, const TempoFitConfig& tempofit,
                                    const std::vector<Tensor4>& obs_stream) {
    if (!obs_stream.empty() && obs_stream.front().batch != 1) {
        throw ConfigError("trace_episode: expects batch size 1 streams");
    }
    std::vector<TraceRow> rows;
    MemoryBank bank(tempofit.mem_layers, tempofit.capacity);
    for (int64_t t = 0; t < static_cast<int64_t>(obs_stream.size()); ++t) {
        StepOutput out = step(weights, tempofit, bank, obs_stream[static_cast<size_t>(t)], t);
        for (const LayerDiagnostics& diag : out.retrieval_diags) {
            const Tensor4& w = diag.weights;
            for (int64_t h = 0; h < w.heads; ++h) {
                for (int64_t qi = 0; qi < w.tokens; ++qi) {
                    const double* wrow = w.row(0, h, qi);
                    for (int64_t j = 0; j < w.dim; ++j) {
                        rows.push_back(TraceRow{t, diag.layer, h, qi, j,
                                                diag.token_timesteps[static_cast<size_t>(j)],
                                                wrow[j]});
                    }
                }
            }
        }
    }
    return rows;
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows) {
    out << "t,layer,head,query_token,history_token,history_timestep,weight\n";
    for (const TraceRow& r : rows) {
        out << r.t << ',' << r.layer << ',' << r.head << ',' << r.query_token << ','
            << r.history_token << ',' << r.history_timestep << ',' << format_double(r.weight)
            << '\n';
    }
}

nlohmann::ordered_json memory_metadata_json(const MemoryBank& bank) {
    nlohmann::ordered_json j;
    j["last_step"] = bank.last_step();
    j["stored_scalars"] = bank.stored_scalars();
    auto layers = nlohmann::ordered_json::array();
    for (const auto& [index, mem] : bank.layers()) {
        nlohmann::ordered_json lj;
        lj["layer"] = index;
        lj["capacity"] = mem.capacity();
        lj["size"] = mem.size();
        auto timesteps = nlohmann::ordered_json::array();
        for (const PrefixKV& e : mem.entries()) timesteps.push_back(e.timestep);
        lj["timesteps"] = timesteps;
        if (!mem.entries().empty()) {
            const Tensor4& k = mem.entries().front().keys;
            lj["entry_shape"] = {k.batch, k.heads, k.tokens, k.dim};
        }
        layers.push_back(lj);
    }
    j["layers"] = layers;
    return j;
}

nlohmann::ordered_json report_header(const std::string& kind) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = kind;
    j["note"] = "Toy-scale mechanism metrics (hidden-state divergence, retrieval weight entropy, "
                "norm drift); task success rates are not measured here.";
    return j;
}

nlohmann::ordered_json aliasing_report_json(const RunConfig& config, const AliasingTask& task,
                                            const std::vector<AliasingReport>& reports) {
    nlohmann::ordered_json j = report_header("aliasing");
    j["config"] = run_config_to_json(config);
    j["task"] = {{"seed", task.seed},
                 {"episode_length", task.episode_length},
                 {"alias_step", task.alias_step}};
    if (task.diff_step.has_value()) {
        j["task"]["diff_step"] = *task.diff_step;
    } else {
        j["task"]["diff_step"] = nullptr;
    }
    auto rows = nlohmann::ordered_json::array();
    for (const AliasingReport& r : reports) {
        nlohmann::ordered_json rj;
        rj["capacity"] = r.capacity;
        if (r.diff_step.has_value()) {
            rj["diff_step"] = *r.diff_step;
        } else {
            rj["diff_step"] = nullptr;
        }
        rj["memoryless_divergence"] = r.memoryless_divergence;
        rj["tempofit_divergence"] = r.tempofit_divergence;
        rj["mean_entropy"] = r.mean_entropy;
        rj["weight_on_latest"] = r.weight_on_latest;
        rj["norm_drift"] = r.norm_drift;
        rj["max_attended_length"] = r.max_attended_length;
        rows.push_back(rj);
    }
    j["results"] = rows;
    return j;
}

nlohmann::ordered_json ablation_report_json(const RunConfig& config,
                                            const std::vector<AblationRow>& rows) {
    nlohmann::ordered_json j = report_header("ablation");
    j["config"] = run_config_to_json(config);
    auto out = nlohmann::ordered_json::array();
    for (const AblationRow& r : rows) {
        nlohmann::ordered_json rj;
        rj["group"] = r.group;
        rj["name"] = r.name;
        rj["enabled"] = r.enabled;
        rj["capacity"] = r.capacity;
        rj["beta"] = r.beta;
        rj["retrieval_mode"] = r.retrieval_mode;
        rj["injection_mode"] = r.injection_mode;
        rj["mem_layers"] = r.mem_layers;
        rj["memoryless_divergence"] = r.memoryless_divergence;
        rj["tempofit_divergence"] = r.tempofit_divergence;
        rj["mean_entropy"] = r.mean_entropy;
        rj["weight_on_latest"] = r.weight_on_latest;
        rj["norm_drift"] = r.norm_drift;
        rj["max_attended_length"] = r.max_attended_length;
        rj["hidden_hash"] = r.hidden_hash;
        out.push_back(rj);
    }
    j["rows"] = out;
    return j;
}

std::string ablation_rows_csv(const std::vector<AblationRow>& rows) {
    std::string out = "group,name,enabled,capacity,beta,retrieval_mode,injection_mode,mem_layers,"
                      "memoryless_divergence,tempofit_divergence,mean_entropy,weight_on_latest,"
                      "norm_drift,max_attended_length\n";
    for (const AblationRow& r : rows) {
        out += r.group + ',' + r.name + ',' + (r.enabled ? "1" : "0") + ',' +
               std::to_string(r.capacity) + ',' + format_double(r.beta) + ',' + r.retrieval_mode +
               ',' + r.injection_mode + ',' + '"' + r.mem_layers + '"' + ',' +
               format_double(r.memoryless_divergence) + ',' + format_double(r.tempofit_divergence) +
               ',' + format_double(r.mean_entropy) + ',' + format_double(r.weight_on_latest) + ',' +
               format_double(r.norm_drift) + ',' + std::to_string(r.max_attended_length) + '\n';
    }
    return out;
}

nlohmann::ordered_json bench_report_json(const RunConfig& config, const BenchReport& report) {
    nlohmann::ordered_json j = report_header("bench");
    j["config"] = run_config_to_json(config);
    j["repetitions"] = report.repetitions;
    j["warmup_steps"] = report.warmup_steps;
    j["timing_fields"] = {"latency_ms", "latency_ratio"}; // excluded from determinism checks
    auto rows = nlohmann::ordered_json::array();
    for (const BenchRow& r : report.rows) {
        nlohmann::ordered_json rj;
        rj["method"] = r.method;
        rj["history_length"] = r.history_length;
        rj["latency_ms"] = r.latency_ms;
        rj["latency_ratio"] = r.latency_ratio;
        rj["state_scalars"] = r.state_scalars;
        rj["attention_score_macs"] = r.attention_score_macs;
        rj["retrieval_score_macs"] = r.retrieval_score_macs;
        rows.push_back(rj);
    }
    j["rows"] = rows;
    return j;
}

std::string bench_rows_csv(const BenchReport& report) {
    std::string out = "method,history_length,latency_ms,latency_ratio,state_scalars,"
                      "attention_score_macs,retrieval_score_macs\n";
    for (const BenchRow& r : report.rows) {
        out += r.method + ',' + std::to_string(r.history_length) + ',' +
               format_double(r.latency_ms) + ',' + format_double(r.latency_ratio) + ',' +
               std::to_string(r.state_scalars) + ',' + std::to_string(r.attention_score_macs) +
               ',' + std::to_string(r.retrieval_score_macs) + '\n';
    }
    return out;
}

} // namespace tempofit
