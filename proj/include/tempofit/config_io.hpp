#pragma once

#include <string>

#include "json.hpp"

#include "tempofit/backbone.hpp"

namespace tempofit {

struct RunConfig {
    BackboneConfig backbone;
    TempoFitConfig tempofit;
};

// Defaults: the desk-scale backbone (L=6, H=4, d=16, S=16) with the
// resolved TempoFit defaults for it.
RunConfig default_run_config();

// Parses the schema documented in docs/config_schema.md (version 1).
// Missing fields fall back to defaults; invalid values throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json run_config_to_json(const RunConfig& config);

// Reads a JSON config file; throws IoError with the path on failure.
RunConfig load_run_config(const std::string& path);

std::string to_string(RetrievalMode mode);
std::string to_string(InjectionMode mode);
RetrievalMode retrieval_mode_from_string(const std::string& name);
InjectionMode injection_mode_from_string(const std::string& name);

// Named layer subsets: "all", "top" (first half), "bottom" (second half),
// "intermediate" (middle third), or a comma-separated index list.
std::set<int> parse_layer_subset(const std::string& text, int64_t num_layers);

} // namespace tempofit
