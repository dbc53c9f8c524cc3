#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "deviant/ide.hpp"
#include "deviant/scoring.hpp"
#include "deviant/trainer.hpp"

namespace deviant {

// Structured-text (JSON) run configuration: training hyper-parameters, NVE
// and IDE settings and the ablation switches. Every key is optional and
// defaults to the values in TrainConfig / ScoringConfig; unknown keys are
// rejected with ConfigError.
struct RunConfig {
    TrainConfig train;
    ScoringConfig scoring;
    bool nve = true;
    bool ide = true;

    // Mode implied by the nve/ide switches.
    ScoringMode mode() const;
    void validate() const;
};

ScoringMode mode_from_switches(bool nve, bool ide);

RunConfig run_config_from_json(std::string_view text);
RunConfig read_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& cfg);

// Every recognized key with its default, one per line ("key = value").
std::string run_config_defaults();

// NVE settings and training mode recorded in a checkpoint, if present.
std::optional<NveConfig> checkpoint_nve(const Checkpoint& ck);

}  // namespace deviant
