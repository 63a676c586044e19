#pragma once

#include <map>
#include <string>
#include <vector>

#include "cpl/config.hpp"
#include "cpl/prompt_state.hpp"

namespace cpl {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;  // decoupled: applied to the parameter, not the gradient
};

class AdamW {
public:
    AdamW(std::vector<Param> params, AdamWConfig cfg);

    // One update from the gradients currently stored on the parameters.
    // Missing gradients count as zero; non-finite gradients abort the step.
    void step();
    void zero_grad();

    const std::vector<Param>& params() const { return params_; }
    long step_count() const { return t_; }

private:
    std::vector<Param> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

double harmonic_mean(double base_acc, double new_acc);

struct SeedMetrics {
    uint64_t seed = 0;
    double base_acc = 0.0;
    double new_acc = 0.0;
    double hm = 0.0;
    double train_acc = 0.0;
    double final_train_loss = 0.0;
    std::vector<double> epoch_losses;
    double wall_seconds = 0.0;  // reported, never part of deterministic outputs
    bool diverged = false;
};

struct MetricsRecord {
    std::vector<SeedMetrics> per_seed;
    double mean_base = 0, std_base = 0;
    double mean_new = 0, std_new = 0;
    double mean_hm = 0, std_hm = 0;
    double mean_final_loss = 0, std_final_loss = 0;

    void finalize();  // population mean/std over the seed list
};

struct TrainedModel {
    FrozenBackbone backbone;
    PromptState state;
    Dataset data;
    AugmentedTextBank bank;
    SeedMetrics metrics;
};

TrainedModel train_fewshot_single(const ExperimentConfig& cfg, uint64_t seed);
MetricsRecord train_fewshot(const ExperimentConfig& cfg);

double evaluate_split(const FrozenBackbone& bb, const PromptState& st, KVCacheStore& caches,
                      const std::vector<SyntheticInstance>& split,
                      const std::vector<int>& class_ids);

// Per-class scores the evaluator ranks by: cosine of adapted features, or of
// raw features when eval_adapted is off.
std::vector<double> instance_scores(Tape& t, const PromptState& st,
                                    const DualEncoderOutput& out);

struct AblationCell {
    std::vector<std::pair<std::string, std::string>> switches;
    MetricsRecord metrics;
};

// Known switches: amg_mode, amg_shared, mpf_mode, mllm_cache. One full
// train+eval per cell per seed.
std::vector<AblationCell> run_ablation_grid(
    const ExperimentConfig& base,
    const std::vector<std::pair<std::string, std::vector<std::string>>>& grid);

ExperimentConfig apply_ablation_switch(ExperimentConfig cfg, const std::string& key,
                                       const std::string& value);

} // namespace cpl
