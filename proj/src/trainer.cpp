#include "cpl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "cpl/objectives.hpp"

namespace cpl {

AdamW::AdamW(std::vector<Param> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Param& p : params_) {
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
    }
}

void AdamW::zero_grad() {
    for (Param& p : params_) p.tensor.zero_grad();
}

void AdamW::step() {
    for (const Param& p : params_) {
        const double* g = p.tensor.grad();
        if (!g) continue;
        for (size_t i = 0; i < p.tensor.size(); ++i)
            if (!std::isfinite(g[i]))
                throw NumericsError("adamw: non-finite gradient in '" + p.name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const bool f32 = precision() == Precision::f32;

    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& t = params_[pi].tensor;
        const double* g = t.grad();
        double* w = t.data();
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (size_t i = 0; i < t.size(); ++i) {
            const double gi = g ? g[i] : 0.0;
            w[i] *= 1.0 - cfg_.lr * cfg_.weight_decay;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            w[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            if (f32) w[i] = round_f32(w[i]);
        }
    }
}

double harmonic_mean(double base_acc, double new_acc) {
    if (base_acc < 0.0 || new_acc < 0.0)
        throw ContractError("harmonic_mean: accuracies must be nonnegative");
    if (base_acc == 0.0 && new_acc == 0.0) return 0.0;
    return 2.0 * base_acc * new_acc / (base_acc + new_acc);
}

void MetricsRecord::finalize() {
    auto stats = [this](auto field) {
        double mean = 0.0;
        for (const auto& s : per_seed) mean += field(s);
        mean /= static_cast<double>(per_seed.size());
        double var = 0.0;
        for (const auto& s : per_seed) {
            const double d = field(s) - mean;
            var += d * d;
        }
        var /= static_cast<double>(per_seed.size());
        return std::pair{mean, std::sqrt(var)};
    };
    if (per_seed.empty()) return;
    std::tie(mean_base, std_base) = stats([](const SeedMetrics& s) { return s.base_acc; });
    std::tie(mean_new, std_new) = stats([](const SeedMetrics& s) { return s.new_acc; });
    std::tie(mean_hm, std_hm) = stats([](const SeedMetrics& s) { return s.hm; });
    std::tie(mean_final_loss, std_final_loss) =
        stats([](const SeedMetrics& s) { return s.final_train_loss; });
}

// ---------------------------------------------------------------------------

namespace {

int class_index(const std::vector<int>& class_ids, int class_id) {
    auto it = std::find(class_ids.begin(), class_ids.end(), class_id);
    if (it == class_ids.end())
        throw LookupError("class id " + std::to_string(class_id) + " not in the class set");
    return static_cast<int>(it - class_ids.begin());
}

std::vector<std::vector<double>> snapshot_params(const std::vector<Param>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const Param& p : params)
        snap.emplace_back(p.tensor.data(), p.tensor.data() + p.tensor.size());
    return snap;
}

void restore_params(std::vector<Param>& params, const std::vector<std::vector<double>>& snap) {
    for (size_t i = 0; i < params.size(); ++i)
        std::copy(snap[i].begin(), snap[i].end(), params[i].tensor.data());
}

} // namespace

std::vector<double> instance_scores(Tape& t, const PromptState& st,
                                    const DualEncoderOutput& out) {
    std::vector<double> scores(out.t_star.size());
    if (st.cfg.eval_adapted) {
        Tensor f_ad = apply_adapter(t, st.adapters.va, out.f_star);
        for (size_t k = 0; k < out.t_star.size(); ++k)
            scores[k] = t.cosine(f_ad, apply_adapter(t, st.adapters.ta, out.t_star[k])).item();
    } else {
        for (size_t k = 0; k < out.t_star.size(); ++k)
            scores[k] = t.cosine(out.f_star, out.t_star[k]).item();
    }
    return scores;
}

double evaluate_split(const FrozenBackbone& bb, const PromptState& st, KVCacheStore& caches,
                      const std::vector<SyntheticInstance>& split,
                      const std::vector<int>& class_ids) {
    if (split.empty()) throw ConfigError("evaluate: empty split");
    if (class_ids.empty()) throw ConfigError("evaluate: empty class set");
    long correct = 0;
    for (const SyntheticInstance& inst : split) {
        Tape t(GradMode::none);
        const KVCache& cache = caches.get_or_build(bb, inst);
        DualEncoderOutput out = forward_dual_encoder(t, bb, st, inst, cache, class_ids);
        std::vector<double> scores = instance_scores(t, st, out);
        const int arg = static_cast<int>(
            std::max_element(scores.begin(), scores.end()) - scores.begin());
        if (class_ids[static_cast<size_t>(arg)] == inst.class_id) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

TrainedModel train_fewshot_single(const ExperimentConfig& cfg, uint64_t seed) {
    cfg.validate();
    PrecisionScope scope(cfg.train.precision);
    const auto t0 = std::chrono::steady_clock::now();

    TrainedModel run;
    run.backbone = build_backbone(cfg.backbone, cfg.data.feature_dim);
    run.data = make_dataset(cfg.data, cfg.backbone, seed);
    run.state = make_prompt_state(run.backbone, cfg.train.prompt, seed);
    run.bank = cfg.paths.bank.empty()
                   ? make_mock_bank(run.backbone, run.data, cfg.data.data_seed)
                   : load_bank_file(cfg.paths.bank, run.backbone, cfg.data.data_seed);

    const uint64_t frozen_before = frozen_weight_hash(run.backbone, !cfg.train.prompt.train_kv);
    const uint64_t bank_before = bank_hash(run.bank);

    std::vector<Param> params = trainable_params(run.state, run.backbone);
    AdamWConfig opt_cfg;
    opt_cfg.lr = cfg.train.lr;
    opt_cfg.weight_decay = cfg.train.weight_decay;
    AdamW opt(params, opt_cfg);

    KVCacheStore caches;
    for (const auto& inst : run.data.train) caches.get_or_build(run.backbone, inst);

    SeedMetrics& metrics = run.metrics;
    metrics.seed = seed;

    Rng run_rng(seed);
    Rng aug_rng = run_rng.split("augment");
    Rng shuffle_rng = run_rng.split("shuffle");

    std::vector<size_t> order(run.data.train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    auto snapshot = snapshot_params(params);

    for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        Rng epoch_rng = shuffle_rng.split(static_cast<uint64_t>(epoch));
        epoch_rng.shuffle(order);
        double epoch_loss = 0.0;
        try {
            for (size_t idx : order) {
                const SyntheticInstance& inst = run.data.train[idx];
                const KVCache& cache = caches.get_or_build(run.backbone, inst);
                const int true_idx = class_index(run.data.base_class_ids, inst.class_id);

                Tape tape(GradMode::record);
                DualEncoderOutput out = forward_dual_encoder(
                    tape, run.backbone, run.state, inst, cache, run.data.base_class_ids);

                Tensor ce = ce_loss(tape, out.f_star, out.t_star, true_idx,
                                    run.state.adapters, cfg.train.prompt.temperature);

                const BankSentence& sup = sample_supervision(
                    run.bank, run.data.class_names[static_cast<size_t>(inst.class_id)],
                    aug_rng);
                Tensor f_prime =
                    augment_image_features(run.backbone, inst, aug_rng, cfg.loss.aug_jitter);
                Tensor t_ad = apply_adapter(tape, run.state.adapters.ta,
                                            out.t_star[static_cast<size_t>(true_idx)]);
                Tensor f_ad = apply_adapter(tape, run.state.adapters.va, out.f_star);
                Tensor cc = cc_loss(tape, sup.embedding, t_ad, f_prime, f_ad);

                Tensor loss = total_loss(tape, ce, cc, cfg.loss.lambda);
                tape.backward(loss);
                opt.step();
                epoch_loss += loss.item();
            }
        } catch (const NumericsError&) {
            // divergence: fall back to the last completed epoch
            restore_params(params, snapshot);
            metrics.diverged = true;
            break;
        }
        metrics.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
        snapshot = snapshot_params(params);
    }
    metrics.final_train_loss =
        metrics.epoch_losses.empty() ? 0.0 : metrics.epoch_losses.back();

    if (!metrics.diverged) {
        metrics.train_acc = evaluate_split(run.backbone, run.state, caches, run.data.train,
                                           run.data.base_class_ids);
        metrics.base_acc = evaluate_split(run.backbone, run.state, caches, run.data.eval_base,
                                          run.data.base_class_ids);
        if (!run.data.eval_new.empty())
            metrics.new_acc = evaluate_split(run.backbone, run.state, caches, run.data.eval_new,
                                             run.data.new_class_ids);
        metrics.hm = harmonic_mean(metrics.base_acc, metrics.new_acc);
    }

    if (frozen_weight_hash(run.backbone, !cfg.train.prompt.train_kv) != frozen_before)
        throw IntegrityError("frozen backbone weights changed during training");
    if (bank_hash(run.bank) != bank_before)
        throw IntegrityError("supervision bank changed during training");

    metrics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

MetricsRecord train_fewshot(const ExperimentConfig& cfg) {
    MetricsRecord record;
    for (uint64_t seed : cfg.train.seeds)
        record.per_seed.push_back(train_fewshot_single(cfg, seed).metrics);
    record.finalize();
    return record;
}

// ---------------------------------------------------------------------------
// ablation grid

ExperimentConfig apply_ablation_switch(ExperimentConfig cfg, const std::string& key,
                                       const std::string& value) {
    if (key == "amg_mode") {
        cfg.train.prompt.amg_mode = parse_amg_mode(value);
    } else if (key == "amg_shared") {
        if (value == "shared") cfg.train.prompt.amg_shared = true;
        else if (value == "non-shared") cfg.train.prompt.amg_shared = false;
        else throw ConfigError("amg_shared must be 'shared' or 'non-shared', got '" + value + "'");
    } else if (key == "mpf_mode") {
        cfg.train.prompt.mpf_mode = parse_mpf_mode(value);
    } else if (key == "mllm_cache") {
        if (value == "on") cfg.train.prompt.mllm_cache = true;
        else if (value == "random-init") cfg.train.prompt.mllm_cache = false;
        else throw ConfigError("mllm_cache must be 'on' or 'random-init', got '" + value + "'");
    } else {
        throw ConfigError("unknown ablation switch '" + key + "'");
    }
    return cfg;
}

std::vector<AblationCell> run_ablation_grid(
    const ExperimentConfig& base,
    const std::vector<std::pair<std::string, std::vector<std::string>>>& grid) {
    for (const auto& [key, values] : grid) {
        if (values.empty()) throw ConfigError("ablation switch '" + key + "' has no values");
        for (const auto& v : values) apply_ablation_switch(base, key, v);  // validates
    }

    std::vector<AblationCell> cells;
    std::vector<std::pair<std::string, std::string>> current;
    std::function<void(size_t)> recurse = [&](size_t depth) {
        if (depth == grid.size()) {
            ExperimentConfig cfg = base;
            for (const auto& [k, v] : current) cfg = apply_ablation_switch(cfg, k, v);
            AblationCell cell;
            cell.switches = current;
            cell.metrics = train_fewshot(cfg);
            cells.push_back(std::move(cell));
            return;
        }
        for (const auto& v : grid[depth].second) {
            current.emplace_back(grid[depth].first, v);
            recurse(depth + 1);
            current.pop_back();
        }
    };
    recurse(0);
    return cells;
}

} // namespace cpl
