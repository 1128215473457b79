#include "tempofit/config_io.hpp"

#include <fstream>
#include <sstream>

namespace tempofit {

RunConfig default_run_config() {
    RunConfig config;
    config.backbone = BackboneConfig{};
    config.tempofit = default_tempofit_config(config.backbone);
    return config;
}

std::string to_string(RetrievalMode mode) {
    return mode == RetrievalMode::KToK ? "k_to_k" : "q_to_k";
}

std::string to_string(InjectionMode mode) {
    switch (mode) {
    case InjectionMode::ResidualNormPreserving: return "residual_norm_preserving";
    case InjectionMode::ResidualPlain: return "residual_plain";
    case InjectionMode::Concatenate: return "concatenate";
    }
    return "unknown";
}

RetrievalMode retrieval_mode_from_string(const std::string& name) {
    if (name == "k_to_k") return RetrievalMode::KToK;
    if (name == "q_to_k") return RetrievalMode::QToK;
    throw ConfigError("unknown retrieval mode '" + name + "' (expected k_to_k or q_to_k)");
}

InjectionMode injection_mode_from_string(const std::string& name) {
    if (name == "residual_norm_preserving") return InjectionMode::ResidualNormPreserving;
    if (name == "residual_plain") return InjectionMode::ResidualPlain;
    if (name == "concatenate") return InjectionMode::Concatenate;
    throw ConfigError("unknown injection mode '" + name +
                      "' (expected residual_norm_preserving, residual_plain or concatenate)");
}

std::set<int> parse_layer_subset(const std::string& text, int64_t num_layers) {
    std::set<int> layers;
    if (text == "all") {
        for (int64_t l = 0; l < num_layers; ++l) layers.insert(static_cast<int>(l));
        return layers;
    }
    if (text == "top") { // earlier half of the stack
        for (int64_t l = 0; l < (num_layers + 1) / 2; ++l) layers.insert(static_cast<int>(l));
        return layers;
    }
    if (text == "bottom") { // later half of the stack
        for (int64_t l = (num_layers + 1) / 2; l < num_layers; ++l) layers.insert(static_cast<int>(l));
        return layers;
    }
    if (text == "intermediate") {
        return default_mem_layers(num_layers);
    }

    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            size_t pos = 0;
            const int l = std::stoi(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            layers.insert(l);
        } catch (const std::exception&) {
            throw ConfigError("cannot parse layer subset '" + text +
                              "' (expected all|top|bottom|intermediate or comma-separated indices)");
        }
    }
    if (layers.empty()) {
        throw ConfigError("layer subset '" + text + "' is empty");
    }
    return layers;
}

namespace {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
}

} // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig config = default_run_config();

    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        BackboneConfig& cfg = config.backbone;
        cfg.num_layers = get_or<int64_t>(b, "num_layers", cfg.num_layers);
        cfg.num_heads = get_or<int64_t>(b, "num_heads", cfg.num_heads);
        cfg.head_dim = get_or<int64_t>(b, "head_dim", cfg.head_dim);
        cfg.prefix_tokens = get_or<int64_t>(b, "prefix_tokens", cfg.prefix_tokens);
        cfg.seed = get_or<uint64_t>(b, "seed", cfg.seed);
        cfg.action_dim = get_or<int64_t>(b, "action_dim", cfg.action_dim);
        cfg.ff_mult = get_or<int64_t>(b, "ff_mult", cfg.ff_mult);
    }
    config.backbone.validate();

    // re-resolve the backbone-dependent defaults before applying overrides
    config.tempofit = default_tempofit_config(config.backbone);

    if (j.contains("tempofit")) {
        const auto& t = j.at("tempofit");
        TempoFitConfig& tf = config.tempofit;
        tf.enabled = get_or<bool>(t, "enabled", tf.enabled);
        if (t.contains("mem_layers") && !t.at("mem_layers").is_null()) {
            if (t.at("mem_layers").is_string()) {
                tf.mem_layers = parse_layer_subset(t.at("mem_layers").get<std::string>(),
                                                   config.backbone.num_layers);
            } else {
                tf.mem_layers.clear();
                for (const auto& v : t.at("mem_layers")) tf.mem_layers.insert(v.get<int>());
            }
        }
        tf.capacity = get_or<int64_t>(t, "capacity", tf.capacity);
        tf.fgtb.beta = get_or<double>(t, "beta", tf.fgtb.beta);
        tf.fgtb.alpha_s = get_or<double>(t, "alpha_s", tf.fgtb.alpha_s);
        if (t.contains("slopes") && !t.at("slopes").is_null()) {
            tf.fgtb.slopes = t.at("slopes").get<std::vector<double>>();
        }
        if (t.contains("retrieval_mode") && !t.at("retrieval_mode").is_null()) {
            tf.retrieval_mode = retrieval_mode_from_string(t.at("retrieval_mode").get<std::string>());
        }
        if (t.contains("injection_mode") && !t.at("injection_mode").is_null()) {
            tf.injection_mode = injection_mode_from_string(t.at("injection_mode").get<std::string>());
        }
        tf.epsilon = get_or<double>(t, "epsilon", tf.epsilon);
        tf.write_fused = get_or<bool>(t, "write_fused", tf.write_fused);
    }
    config.tempofit.validate(config.backbone);
    return config;
}

nlohmann::ordered_json run_config_to_json(const RunConfig& config) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["backbone"] = {
        {"num_layers", config.backbone.num_layers},
        {"num_heads", config.backbone.num_heads},
        {"head_dim", config.backbone.head_dim},
        {"prefix_tokens", config.backbone.prefix_tokens},
        {"seed", config.backbone.seed},
        {"action_dim", config.backbone.action_dim},
        {"ff_mult", config.backbone.ff_mult},
    };
    j["tempofit"] = {
        {"enabled", config.tempofit.enabled},
        {"mem_layers", std::vector<int>(config.tempofit.mem_layers.begin(),
                                        config.tempofit.mem_layers.end())},
        {"capacity", config.tempofit.capacity},
        {"beta", config.tempofit.fgtb.beta},
        {"alpha_s", config.tempofit.fgtb.alpha_s},
        {"slopes", config.tempofit.fgtb.slopes},
        {"retrieval_mode", to_string(config.tempofit.retrieval_mode)},
        {"injection_mode", to_string(config.tempofit.injection_mode)},
        {"epsilon", config.tempofit.epsilon},
        {"write_fused", config.tempofit.write_fused},
    };
    return j;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config file: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse config file " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

} // namespace tempofit
