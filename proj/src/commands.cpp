#include "cpl/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "cpl/checkpoint.hpp"
#include "cpl/objectives.hpp"

namespace cpl {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

ExperimentConfig load_config(const std::string& path, const GlobalOptions& opts) {
    ExperimentConfig cfg = parse_config_file(path);
    if (opts.seed) cfg.train.seeds = {*opts.seed};
    if (opts.precision) cfg.train.precision = *opts.precision;
    return cfg;
}

ordered_json seed_json(const SeedMetrics& s) {
    ordered_json j;
    j["seed"] = s.seed;
    j["base_acc"] = s.base_acc;
    j["new_acc"] = s.new_acc;
    j["hm"] = s.hm;
    j["train_acc"] = s.train_acc;
    j["final_train_loss"] = s.final_train_loss;
    j["epoch_losses"] = s.epoch_losses;
    j["diverged"] = s.diverged;
    return j;
}

} // namespace

std::string metrics_json(const MetricsRecord& record) {
    ordered_json j;
    j["per_seed"] = ordered_json::array();
    for (const auto& s : record.per_seed) j["per_seed"].push_back(seed_json(s));
    j["mean"] = {{"base_acc", record.mean_base},
                 {"new_acc", record.mean_new},
                 {"hm", record.mean_hm},
                 {"final_train_loss", record.mean_final_loss}};
    j["std"] = {{"base_acc", record.std_base},
                {"new_acc", record.std_new},
                {"hm", record.std_hm},
                {"final_train_loss", record.std_final_loss}};
    return j.dump(2) + "\n";
}

std::string metrics_csv(const MetricsRecord& record) {
    std::string out = "seed,base_acc,new_acc,hm,train_acc,final_train_loss,diverged\n";
    for (const auto& s : record.per_seed) {
        out += std::to_string(s.seed) + "," + fmt(s.base_acc) + "," + fmt(s.new_acc) + "," +
               fmt(s.hm) + "," + fmt(s.train_acc) + "," + fmt(s.final_train_loss) + "," +
               (s.diverged ? "1" : "0") + "\n";
    }
    return out;
}

std::string ablation_csv(const std::vector<AblationCell>& cells) {
    std::string out = "cell,seed,base_acc,new_acc,hm,final_train_loss\n";
    for (const auto& cell : cells) {
        std::string label;
        for (const auto& [k, v] : cell.switches) label += (label.empty() ? "" : ";") + k + "=" + v;
        if (label.empty()) label = "baseline";
        for (const auto& s : cell.metrics.per_seed)
            out += label + "," + std::to_string(s.seed) + "," + fmt(s.base_acc) + "," +
                   fmt(s.new_acc) + "," + fmt(s.hm) + "," + fmt(s.final_train_loss) + "\n";
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& content) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::trunc | std::ios::binary);
    if (!out) throw IntegrityError("cannot write '" + path + "'");
    out << content;
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const GlobalOptions& opts,
              const std::string& out_override) {
    ExperimentConfig cfg = load_config(config_path, opts);
    const std::string out_dir = out_override.empty() ? cfg.paths.out : out_override;

    MetricsRecord record;
    std::string timing;
    for (uint64_t seed : cfg.train.seeds) {
        TrainedModel run = train_fewshot_single(cfg, seed);
        record.per_seed.push_back(run.metrics);
        timing += "seed " + std::to_string(seed) + ": " + fmt(run.metrics.wall_seconds) + " s\n";

        std::vector<Param> params = all_state_params(run.state, run.backbone);
        save_checkpoint(out_dir + "/seed_" + std::to_string(seed) + "/checkpoint", params,
                        cfg.train.precision);
    }
    record.finalize();

    write_text_file(out_dir + "/metrics.csv", metrics_csv(record));
    write_text_file(out_dir + "/metrics.json", metrics_json(record));
    write_text_file(out_dir + "/timing.txt", timing);

    std::cout << "trained " << record.per_seed.size() << " seed(s) -> " << out_dir << "\n"
              << "base " << fmt(record.mean_base) << " +- " << fmt(record.std_base) << ", new "
              << fmt(record.mean_new) << " +- " << fmt(record.std_new) << ", hm "
              << fmt(record.mean_hm) << " +- " << fmt(record.std_hm) << "\n";
    return 0;
}

namespace {

struct LoadedModel {
    FrozenBackbone backbone;
    PromptState state;
    Dataset data;
};

LoadedModel load_model(const std::string& checkpoint_dir, const ExperimentConfig& cfg,
                       uint64_t seed) {
    LoadedModel m;
    m.backbone = build_backbone(cfg.backbone, cfg.data.feature_dim);
    m.data = make_dataset(cfg.data, cfg.backbone, seed);
    m.state = make_prompt_state(m.backbone, cfg.train.prompt, seed);
    std::vector<Param> params = all_state_params(m.state, m.backbone);
    load_checkpoint(checkpoint_dir, params);
    return m;
}

} // namespace

int cmd_eval(const std::string& checkpoint_dir, const std::string& config_path,
             const std::string& split, const GlobalOptions& opts,
             const std::string& out_file) {
    if (split != "base" && split != "new" && split != "both")
        throw ConfigError("eval: --split must be base, new or both");
    ExperimentConfig cfg = load_config(config_path, opts);
    // match the arithmetic the checkpoint was trained with unless overridden
    if (!opts.precision) cfg.train.precision = checkpoint_dtype(checkpoint_dir);
    PrecisionScope scope(cfg.train.precision);

    const uint64_t seed = opts.seed ? *opts.seed : cfg.train.seeds.front();
    LoadedModel m = load_model(checkpoint_dir, cfg, seed);
    KVCacheStore caches;

    ordered_json j;
    j["seed"] = seed;
    double base = 0.0, novel = 0.0;
    if (split == "base" || split == "both") {
        base = evaluate_split(m.backbone, m.state, caches, m.data.eval_base,
                              m.data.base_class_ids);
        j["base_acc"] = base;
        std::cout << "base_acc " << fmt(base) << "\n";
    }
    if (split == "new" || split == "both") {
        novel = evaluate_split(m.backbone, m.state, caches, m.data.eval_new,
                               m.data.new_class_ids);
        j["new_acc"] = novel;
        std::cout << "new_acc " << fmt(novel) << "\n";
    }
    if (split == "both") {
        const double hm = harmonic_mean(base, novel);
        j["hm"] = hm;
        std::cout << "hm " << fmt(hm) << "\n";
    }
    write_text_file(out_file, j.dump(2) + "\n");
    return 0;
}

int cmd_gradcheck(const std::string& config_path, double tolerance, const GlobalOptions& opts) {
    ExperimentConfig toy = gradcheck_toy_config();
    if (!config_path.empty()) {
        // adopt only the graph switches; dimensions stay at the committed toy size
        ExperimentConfig user = load_config(config_path, opts);
        toy.train.prompt.amg_mode = user.train.prompt.amg_mode;
        toy.train.prompt.amg_shared = user.train.prompt.amg_shared;
        toy.train.prompt.mpf_mode = user.train.prompt.mpf_mode;
        toy.train.prompt.mllm_cache = user.train.prompt.mllm_cache;
        toy.train.prompt.train_kv = user.train.prompt.train_kv;
        toy.loss.lambda = user.loss.lambda;
    }
    PrecisionScope scope(Precision::f64);  // finite differences are meaningless at f32

    const uint64_t seed = opts.seed ? *opts.seed : toy.train.seeds.front();
    FrozenBackbone bb = build_backbone(toy.backbone, toy.data.feature_dim);
    Dataset ds = make_dataset(toy.data, toy.backbone, seed);
    PromptState st = make_prompt_state(bb, toy.train.prompt, seed);
    AugmentedTextBank bank = make_mock_bank(bb, ds, toy.data.data_seed);
    std::vector<Param> params = trainable_params(st, bb);

    const SyntheticInstance& inst = ds.train.front();
    const KVCache cache = encode_instance_offline(bb, inst);
    const int true_idx = 0;
    Rng aug_rng = Rng(seed).split("gradcheck_aug");
    const BankSentence& sup =
        sample_supervision(bank, ds.class_names[static_cast<size_t>(inst.class_id)], aug_rng);
    const Tensor f_prime = augment_image_features(bb, inst, aug_rng, toy.loss.aug_jitter);

    auto f = [&](Tape& tape) {
        DualEncoderOutput out =
            forward_dual_encoder(tape, bb, st, inst, cache, ds.base_class_ids);
        Tensor ce = ce_loss(tape, out.f_star, out.t_star, true_idx, st.adapters,
                            toy.train.prompt.temperature);
        Tensor t_ad = apply_adapter(tape, st.adapters.ta, out.t_star[true_idx]);
        Tensor f_ad = apply_adapter(tape, st.adapters.va, out.f_star);
        Tensor cc = cc_loss(tape, sup.embedding, t_ad, f_prime, f_ad);
        return total_loss(tape, ce, cc, toy.loss.lambda);
    };

    FdReport report = finite_diff_check(f, params, 1e-5);
    bool ok = true;
    for (const auto& e : report.entries) {
        const bool pass = e.max_rel_err < tolerance;
        ok = ok && pass;
        std::printf("%-24s rel_err %.3e  %s\n", e.name.c_str(), e.max_rel_err,
                    pass ? "PASS" : "FAIL");
    }
    std::printf("gradcheck max rel_err %.3e (tolerance %.3e): %s\n", report.max_rel_err,
                tolerance, ok ? "PASS" : "FAIL");
    return ok ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& grid_specs,
               const GlobalOptions& opts, const std::string& out_override) {
    ExperimentConfig cfg = load_config(config_path, opts);
    const std::string out_dir = out_override.empty() ? cfg.paths.out : out_override;

    std::vector<std::pair<std::string, std::vector<std::string>>> grid;
    for (const std::string& spec : grid_specs) {
        const size_t eq = spec.find('=');
        if (eq == std::string::npos)
            throw ConfigError("ablate: expected 'switch=value1,value2', got '" + spec + "'");
        std::vector<std::string> values;
        std::stringstream ss(spec.substr(eq + 1));
        for (std::string item; std::getline(ss, item, ',');)
            if (!item.empty()) values.push_back(item);
        grid.emplace_back(spec.substr(0, eq), std::move(values));
    }

    std::vector<AblationCell> cells = run_ablation_grid(cfg, grid);

    ordered_json j = ordered_json::array();
    for (const auto& cell : cells) {
        ordered_json cj;
        cj["switches"] = ordered_json::object();
        for (const auto& [k, v] : cell.switches) cj["switches"][k] = v;
        cj["mean"] = {{"base_acc", cell.metrics.mean_base},
                      {"new_acc", cell.metrics.mean_new},
                      {"hm", cell.metrics.mean_hm}};
        cj["std"] = {{"base_acc", cell.metrics.std_base},
                     {"new_acc", cell.metrics.std_new},
                     {"hm", cell.metrics.std_hm}};
        cj["per_seed"] = ordered_json::array();
        for (const auto& s : cell.metrics.per_seed) cj["per_seed"].push_back(seed_json(s));
        j.push_back(cj);
    }
    write_text_file(out_dir + "/ablation.csv", ablation_csv(cells));
    write_text_file(out_dir + "/ablation.json", j.dump(2) + "\n");
    std::cout << "ablation grid: " << cells.size() << " cell(s) -> " << out_dir << "\n";
    return 0;
}

int cmd_dump_embeddings(const std::string& checkpoint_dir, const std::string& config_path,
                        const GlobalOptions& opts, const std::string& out_file) {
    ExperimentConfig cfg = load_config(config_path, opts);
    if (!opts.precision) cfg.train.precision = checkpoint_dtype(checkpoint_dir);
    PrecisionScope scope(cfg.train.precision);
    const uint64_t seed = opts.seed ? *opts.seed : cfg.train.seeds.front();
    LoadedModel m = load_model(checkpoint_dir, cfg, seed);
    KVCacheStore caches;

    std::string csv = "instance_id,class_id,split,kind,pred";
    for (int i = 0; i < cfg.backbone.d_embed; ++i) csv += ",v" + std::to_string(i);
    csv += "\n";

    auto dump_split = [&](const std::vector<SyntheticInstance>& split, const char* name,
                          const std::vector<int>& class_ids) {
        for (const auto& inst : split) {
            Tape t(GradMode::none);
            const KVCache& cache = caches.get_or_build(m.backbone, inst);
            DualEncoderOutput out =
                forward_dual_encoder(t, m.backbone, m.state, inst, cache, class_ids);
            std::vector<double> scores = instance_scores(t, m.state, out);
            const int arg = static_cast<int>(
                std::max_element(scores.begin(), scores.end()) - scores.begin());
            const int pred = class_ids[static_cast<size_t>(arg)];

            auto row = [&](int class_id, const char* kind, const Tensor& v) {
                csv += std::to_string(inst.id) + "," + std::to_string(class_id) + "," + name +
                       "," + kind + "," + std::to_string(pred);
                for (size_t i = 0; i < v.size(); ++i) csv += "," + fmt(v.data()[i]);
                csv += "\n";
            };
            row(inst.class_id, "image", out.f_star);
            for (size_t k = 0; k < class_ids.size(); ++k)
                row(class_ids[k], "text", out.t_star[k]);
        }
    };
    dump_split(m.data.eval_base, "base", m.data.base_class_ids);
    if (!m.data.eval_new.empty()) dump_split(m.data.eval_new, "new", m.data.new_class_ids);

    write_text_file(out_file, csv);
    std::cout << "embeddings -> " << out_file << "\n";
    return 0;
}

int cmd_render_templates(const std::string& config_path, const GlobalOptions& opts,
                         const std::string& out_dir) {
    ExperimentConfig cfg = load_config(config_path, opts);
    const uint64_t seed = opts.seed ? *opts.seed : cfg.train.seeds.front();
    Dataset ds = make_dataset(cfg.data, cfg.backbone, seed);
    for (size_t k = 0; k < ds.class_names.size(); ++k) {
        const std::string& name = ds.class_names[k];
        const std::string& caption = ds.class_captions[k];
        std::string body = "custom: " + render_custom_template(name, caption) + "\n" +
                           "expansion-prompt: " +
                           render_llm_prompt(name, cfg.data.domain_name, caption) + "\n";
        write_text_file(out_dir + "/" + name + ".txt", body);
    }
    std::cout << "templates for " << ds.class_names.size() << " classes -> " << out_dir << "\n";
    return 0;
}

} // namespace cpl
