// Conditional prompt-learning lab: train/eval/gradcheck/ablate plus the file
// export commands, all on the synthetic desk-scale task.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cpl/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"conditional prompt learning lab"};
    app.require_subcommand(0, 1);
    app.fallthrough();  // global --seed/--precision may follow the subcommand

    std::string seed_str, precision_str;
    bool show_reference = false;
    app.add_option("--seed", seed_str, "override the config seed list with one seed");
    app.add_option("--precision", precision_str, "override compute precision (f32|f64)");
    app.add_flag("--config-reference", show_reference,
                 "print every config key with its default and exit");

    std::string config_path, checkpoint_dir, out_path, split = "both";
    double tolerance = 1e-4;
    std::vector<std::string> grid_specs;

    CLI::App* train = app.add_subcommand("train", "train on the synthetic few-shot task");
    train->add_option("config", config_path, "experiment config file")->required();
    train->add_option("--out", out_path, "output directory (overrides [paths] out)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    eval->add_option("--config", config_path, "experiment config file")->required();
    eval->add_option("--split", split, "base | new | both");
    eval->add_option("--out", out_path, "metrics json file");

    CLI::App* gradcheck = app.add_subcommand(
        "gradcheck", "finite-difference check of the full loss at toy dimensions");
    gradcheck->add_option("--config", config_path, "optional config for graph switches");
    gradcheck->add_option("--tolerance", tolerance, "max relative error");

    CLI::App* ablate = app.add_subcommand("ablate", "train every cell of a switch grid");
    ablate->add_option("--config", config_path, "experiment config file")->required();
    ablate->add_option("--grid", grid_specs, "switch=value1,value2 (repeatable)");
    ablate->add_option("--out", out_path, "output directory");

    CLI::App* dump = app.add_subcommand("dump-embeddings",
                                        "write per-instance image/text embeddings as CSV");
    dump->add_option("--checkpoint", checkpoint_dir, "checkpoint directory")->required();
    dump->add_option("--config", config_path, "experiment config file")->required();
    dump->add_option("--out", out_path, "output csv file");

    CLI::App* render = app.add_subcommand("render-templates",
                                          "write the description templates per class");
    render->add_option("--config", config_path, "experiment config file")->required();
    render->add_option("--out", out_path, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        cpl::GlobalOptions opts;
        if (!seed_str.empty()) opts.seed = std::stoull(seed_str);
        if (!precision_str.empty()) opts.precision = cpl::parse_precision(precision_str);

        if (show_reference) {
            std::cout << cpl::config_reference();
            return 0;
        }
        if (train->parsed()) return cpl::cmd_train(config_path, opts, out_path);
        if (eval->parsed()) {
            return cpl::cmd_eval(checkpoint_dir, config_path, split, opts,
                                 out_path.empty() ? "eval_metrics.json" : out_path);
        }
        if (gradcheck->parsed()) return cpl::cmd_gradcheck(config_path, tolerance, opts);
        if (ablate->parsed()) return cpl::cmd_ablate(config_path, grid_specs, opts, out_path);
        if (dump->parsed()) {
            return cpl::cmd_dump_embeddings(checkpoint_dir, config_path, opts,
                                            out_path.empty() ? "embeddings.csv" : out_path);
        }
        if (render->parsed()) return cpl::cmd_render_templates(config_path, opts, out_path);
        std::cout << app.help();
        return 0;
    } catch (const cpl::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 2;
    }
}
