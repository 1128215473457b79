#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "tempofit/harness.hpp"
#include "tempofit/rng.hpp"

namespace {

using namespace tempofit;

struct CommonOptions {
    std::string config_path;
    std::string out_dir = "out";
    std::optional<uint64_t> seed;
    std::optional<int64_t> capacity;
    std::optional<double> beta;
    std::optional<std::string> layers;
    std::optional<std::string> retrieval_mode;
    std::optional<std::string> injection_mode;
};

void add_common_options(CLI::App* sub, CommonOptions& opts) {
    sub->add_option("--config", opts.config_path, "JSON config file (see docs/config_schema.md)");
    sub->add_option("--out", opts.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", opts.seed, "backbone/task seed override");
    sub->add_option("--capacity", opts.capacity, "history capacity override");
    sub->add_option("--beta", opts.beta, "frame-gap bias strength override");
    sub->add_option("--layers", opts.layers,
                    "memory layer subset: all|top|bottom|intermediate or comma-separated indices");
    sub->add_option("--mode", opts.retrieval_mode, "retrieval mode: k_to_k|q_to_k");
    sub->add_option("--injection", opts.injection_mode,
                    "injection mode: residual_norm_preserving|residual_plain|concatenate");
}

RunConfig resolve_config(const CommonOptions& opts) {
    RunConfig config =
        opts.config_path.empty() ? default_run_config() : load_run_config(opts.config_path);
    if (opts.seed) {
        config.backbone.seed = *opts.seed;
    }
    if (opts.capacity) config.tempofit.capacity = *opts.capacity;
    if (opts.beta) config.tempofit.fgtb.beta = *opts.beta;
    if (opts.layers) {
        config.tempofit.mem_layers = parse_layer_subset(*opts.layers, config.backbone.num_layers);
    }
    if (opts.retrieval_mode) {
        config.tempofit.retrieval_mode = retrieval_mode_from_string(*opts.retrieval_mode);
    }
    if (opts.injection_mode) {
        config.tempofit.injection_mode = injection_mode_from_string(*opts.injection_mode);
    }
    config.backbone.validate();
    config.tempofit.validate(config.backbone);
    return config;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open output file: " + path.string());
    out << content;
    if (!out) throw IoError("write failed: " + path.string());
}

void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

std::filesystem::path prepare_out_dir(const CommonOptions& opts) {
    std::filesystem::path dir(opts.out_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
}

int run_alias(const CommonOptions& opts, int64_t episode_length, int64_t alias_step,
              std::optional<int64_t> diff_step) {
    RunConfig config = resolve_config(opts);
    BackboneWeights weights = backbone_init(config.backbone);
    AliasingTask task =
        gen_aliasing_task(config.backbone.seed, episode_length, alias_step,
                          config.backbone.prefix_tokens, config.backbone.model_dim(), diff_step);

    std::vector<AliasingReport> reports;
    reports.push_back(run_aliasing_experiment(task, weights, config.tempofit));

    const auto dir = prepare_out_dir(opts);
    write_json_file(dir / "alias.json", aliasing_report_json(config, task, reports));

    const AliasingReport& r = reports.front();
    std::cout << "aliasing experiment (alias_step=" << task.alias_step << ", capacity="
              << r.capacity << ")\n"
              << "  memoryless divergence: " << r.memoryless_divergence << "\n"
              << "  tempofit divergence:   " << r.tempofit_divergence << "\n"
              << "  report: " << (dir / "alias.json").string() << "\n";
    return 0;
}

int run_ablate(const CommonOptions& opts, int64_t episode_length, int64_t alias_step) {
    RunConfig config = resolve_config(opts);
    BackboneWeights weights = backbone_init(config.backbone);
    AliasingTask task = gen_aliasing_task(config.backbone.seed, episode_length, alias_step,
                                          config.backbone.prefix_tokens, config.backbone.model_dim());

    auto cells = build_ablation_grid(config.backbone, config.tempofit);
    auto rows = run_ablation(cells, task, weights);

    const auto dir = prepare_out_dir(opts);
    write_json_file(dir / "ablation.json", ablation_report_json(config, rows));
    write_text_file(dir / "ablation.csv", ablation_rows_csv(rows));

    std::cout << "ablation grid: " << rows.size() << " cells\n";
    for (const AblationRow& row : rows) {
        std::cout << "  " << row.group << "/" << row.name
                  << "  divergence=" << row.tempofit_divergence
                  << "  weight_on_latest=" << row.weight_on_latest
                  << "  attended=" << row.max_attended_length << "\n";
    }
    std::cout << "reports: " << (dir / "ablation.json").string() << ", "
              << (dir / "ablation.csv").string() << "\n";
    return 0;
}

int run_bench(const CommonOptions& opts, std::vector<int64_t> capacities,
              std::vector<int64_t> stack_sizes, int repetitions) {
    RunConfig config = resolve_config(opts);
    BackboneWeights weights = backbone_init(config.backbone);
    BenchReport report =
        bench_efficiency(weights, config.tempofit, capacities, stack_sizes, repetitions);

    const auto dir = prepare_out_dir(opts);
    write_json_file(dir / "bench.json", bench_report_json(config, report));
    write_text_file(dir / "bench.csv", bench_rows_csv(report));

    std::cout << "per-step latency (median of " << report.repetitions << " steps, "
              << report.warmup_steps << " warm-up steps excluded)\n";
    for (const BenchRow& r : report.rows) {
        std::cout << "  " << r.method << " h=" << r.history_length << "  " << r.latency_ms
                  << " ms (" << r.latency_ratio << "x)  state_scalars=" << r.state_scalars << "\n";
    }
    std::cout << "reports: " << (dir / "bench.json").string() << ", "
              << (dir / "bench.csv").string() << "\n";
    return 0;
}

int run_trace(const CommonOptions& opts, int64_t steps, bool dump_memory) {
    RunConfig config = resolve_config(opts);
    BackboneWeights weights = backbone_init(config.backbone);

    Rng rng(config.backbone.seed);
    std::vector<Tensor4> stream;
    for (int64_t t = 0; t < steps; ++t) {
        stream.push_back(random_tensor(rng, 1, 1, config.backbone.prefix_tokens,
                                       config.backbone.model_dim()));
    }
    auto rows = trace_episode(weights, config.tempofit, stream);

    const auto dir = prepare_out_dir(opts);
    std::ofstream out(dir / "trace.csv");
    if (!out) throw IoError("cannot open output file: " + (dir / "trace.csv").string());
    write_trace_csv(out, rows);

    if (dump_memory) {
        // replay the episode to capture the final buffer state
        MemoryBank bank(config.tempofit.mem_layers, config.tempofit.capacity);
        for (int64_t t = 0; t < steps; ++t) {
            step(weights, config.tempofit, bank, stream[static_cast<size_t>(t)], t);
        }
        write_json_file(dir / "memory.json", memory_metadata_json(bank));
    }

    std::cout << "traced " << steps << " steps, " << rows.size() << " weight rows -> "
              << (dir / "trace.csv").string() << "\n";
    return 0;
}

nlohmann::ordered_json error_json(const std::string& type, const std::string& message) {
    nlohmann::ordered_json j;
    j["error"] = {{"type", type}, {"message", message}};
    return j;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"TempoFit: layer-wise temporal KV memory on a deterministic toy transformer"};
    app.require_subcommand(1);

    CommonOptions opts;

    auto* alias = app.add_subcommand("alias", "state-aliasing disambiguation experiment");
    int64_t episode_length = 12, alias_step = 8;
    std::optional<int64_t> diff_step;
    add_common_options(alias, opts);
    alias->add_option("--episode-length", episode_length, "steps per stream")->capture_default_str();
    alias->add_option("--t-star", alias_step, "alias step")->capture_default_str();
    alias->add_option("--diff-step", diff_step,
                      "make the streams differ at exactly this step (default: all earlier steps)");

    auto* ablate = app.add_subcommand("ablate", "one-axis-at-a-time configuration grid");
    int64_t ablate_length = 24, ablate_step = 20; // long enough to separate the capacity cells
    add_common_options(ablate, opts);
    ablate->add_option("--episode-length", ablate_length, "steps per stream")->capture_default_str();
    ablate->add_option("--t-star", ablate_step, "alias step")->capture_default_str();

    auto* bench = app.add_subcommand("bench", "latency and state-size scaling vs frame stacking");
    std::vector<int64_t> capacities{4, 8, 16, 32};
    std::vector<int64_t> stack_sizes{4, 8};
    int repetitions = 30;
    add_common_options(bench, opts);
    bench->add_option("--capacities", capacities, "history capacities to measure")
        ->capture_default_str();
    bench->add_option("--stack-sizes", stack_sizes, "frame-stacking window sizes")
        ->capture_default_str();
    bench->add_option("--reps", repetitions, "measured steps per configuration (>= 10)")
        ->capture_default_str();

    auto* trace = app.add_subcommand("trace", "dump per-step retrieval weights to CSV");
    int64_t trace_steps = 8;
    bool dump_memory = false;
    add_common_options(trace, opts);
    trace->add_option("--steps", trace_steps, "episode length")->capture_default_str();
    trace->add_flag("--dump-memory", dump_memory, "also write the final buffer metadata as JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(alias)) return run_alias(opts, episode_length, alias_step, diff_step);
        if (app.got_subcommand(ablate)) return run_ablate(opts, ablate_length, ablate_step);
        if (app.got_subcommand(bench)) return run_bench(opts, capacities, stack_sizes, repetitions);
        if (app.got_subcommand(trace)) return run_trace(opts, trace_steps, dump_memory);
    } catch (const ConfigError& e) {
        std::cerr << error_json("config_error", e.what()).dump() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << error_json("io_error", e.what()).dump() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << error_json("error", e.what()).dump() << "\n";
        return 1;
    }
    return 1;
}
