#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cpl/config.hpp"
#include "cpl/trainer.hpp"

namespace cpl {

// Subcommand bodies, callable in-process. Each throws cpl::Error on failure;
// the CLI wrapper maps that to a nonzero exit.

struct GlobalOptions {
    std::optional<uint64_t> seed;          // overrides the config seed list
    std::optional<Precision> precision;
};

int cmd_train(const std::string& config_path, const GlobalOptions& opts,
              const std::string& out_override = "");

int cmd_eval(const std::string& checkpoint_dir, const std::string& config_path,
             const std::string& split, const GlobalOptions& opts,
             const std::string& out_file = "eval_metrics.json");

int cmd_gradcheck(const std::string& config_path, double tolerance, const GlobalOptions& opts);

int cmd_ablate(const std::string& config_path,
               const std::vector<std::string>& grid_specs,  // "switch=value1,value2"
               const GlobalOptions& opts, const std::string& out_override = "");

int cmd_dump_embeddings(const std::string& checkpoint_dir, const std::string& config_path,
                        const GlobalOptions& opts, const std::string& out_file);

int cmd_render_templates(const std::string& config_path, const GlobalOptions& opts,
                         const std::string& out_dir);

// helpers shared with tests
std::string metrics_json(const MetricsRecord& record);
std::string metrics_csv(const MetricsRecord& record);
std::string ablation_csv(const std::vector<AblationCell>& cells);
void write_text_file(const std::string& path, const std::string& content);

} // namespace cpl
