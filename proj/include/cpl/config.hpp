#pragma once

#include <string>
#include <vector>

#include "cpl/prompt_state.hpp"

namespace cpl {

struct TrainConfig {
    int epochs = 20;            // few-shot default; base-to-new style runs use 8
    double lr = 2e-4;
    int batch_size = 1;
    double weight_decay = 1e-2;
    std::vector<uint64_t> seeds = {1, 2, 3};
    Precision precision = Precision::f32;
    PromptConfig prompt;
};

struct LossConfig {
    double lambda = 8.0;
    double aug_jitter = 0.05;  // feature-jitter scale for augmented image features
};

struct PathsConfig {
    std::string bank;               // optional pre-encoded supervision bank (JSON)
    std::string out = "runs/default";
};

struct ExperimentConfig {
    BackboneConfig backbone;
    DataConfig data;
    TrainConfig train;
    LossConfig loss;
    PathsConfig paths;

    void validate() const;
};

// Strict "[section] / key = value" document; any unknown section or key is an
// error with a line diagnostic. Full-line comments start with '#'.
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);
ExperimentConfig parse_config_file(const std::string& path);

// Generated key/default/doc listing for every recognized option.
std::string config_reference();

// Committed small-dimension configuration the gradient checker runs at.
ExperimentConfig gradcheck_toy_config();

} // namespace cpl
