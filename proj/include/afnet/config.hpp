#pragma once

#include "afnet/harness.hpp"

namespace afnet {

struct LoadedConfig {
    ModelConfig model;
    TrainConfig train;
};

// Flat key=value file, '#' starts a comment. Unknown keys are hard errors
// naming the offending line; absent keys keep the documented defaults. The
// shared "seed" key seeds both the model and the training schedule.
LoadedConfig load_config(const std::string& path);
LoadedConfig parse_config_text(const std::string& text, const std::string& origin);

bool apply_train_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value);

std::vector<std::pair<std::string, std::string>> train_config_echo(const TrainConfig& cfg);

}  // namespace afnet
