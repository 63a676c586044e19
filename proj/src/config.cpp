#include "cpl/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cpl {

void ExperimentConfig::validate() const {
    backbone.validate();
    data.validate();
    train.prompt.validate(backbone);
    if (train.epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (train.lr <= 0.0) throw ConfigError("train: lr must be positive");
    if (train.batch_size != 1) throw ConfigError("train: batch_size must be 1");
    if (train.weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (train.seeds.empty()) throw ConfigError("train: seeds must be nonempty");
    if (!(loss.lambda >= 0.0) || !std::isfinite(loss.lambda))
        throw ConfigError("loss: lambda must be finite and >= 0");
    if (loss.aug_jitter < 0.0) throw ConfigError("loss: aug_jitter must be >= 0");
    if (data.base_classes + data.new_classes > backbone.max_classes)
        throw ConfigError("data: base+new classes exceed backbone max_classes");
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

int to_int(const std::string& v) {
    int out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("expected an integer, got '" + v + "'");
    return out;
}

uint64_t to_u64(const std::string& v) {
    uint64_t out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("expected a nonnegative integer, got '" + v + "'");
    return out;
}

double to_double(const std::string& v) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("expected a boolean, got '" + v + "'");
}

std::vector<uint64_t> to_seed_list(const std::string& v) {
    std::vector<uint64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(to_u64(item));
    }
    if (out.empty()) throw ConfigError("expected a comma-separated seed list, got '" + v + "'");
    return out;
}

struct KeyDef {
    const char* section;
    const char* key;
    const char* doc;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

std::string fmt_double(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

const std::vector<KeyDef>& schema() {
    static const std::vector<KeyDef> defs = {
        {"backbone", "d_text", "text encoder width",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.d_text = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.d_text); }},
        {"backbone", "d_img", "image encoder width",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.d_img = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.d_img); }},
        {"backbone", "d_mllms", "decoder width",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.d_mllms = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.d_mllms); }},
        {"backbone", "d_embed", "joint embedding width after output projections",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.d_embed = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.d_embed); }},
        {"backbone", "heads", "attention heads, must divide every width",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.heads = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.heads); }},
        {"backbone", "depth", "encoder layers (up to 12)",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.depth = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.depth); }},
        {"backbone", "patches", "image patch tokens M",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.patches = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.patches); }},
        {"backbone", "class_tokens", "class-name token length L",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.class_tokens = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.class_tokens); }},
        {"backbone", "caption_len", "instance representation length S",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.caption_len = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.caption_len); }},
        {"backbone", "max_classes", "class budget of the embedding table",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.max_classes = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.max_classes); }},
        {"backbone", "seed", "backbone weight seed (fixed across run seeds)",
         [](ExperimentConfig& c, const std::string& v) { c.backbone.seed = to_u64(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.backbone.seed); }},

        {"data", "base_classes", "training class count",
         [](ExperimentConfig& c, const std::string& v) { c.data.base_classes = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.data.base_classes); }},
        {"data", "new_classes", "held-out class count for base-to-new evaluation",
         [](ExperimentConfig& c, const std::string& v) { c.data.new_classes = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.data.new_classes); }},
        {"data", "feature_dim", "synthetic feature dimension",
         [](ExperimentConfig& c, const std::string& v) { c.data.feature_dim = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.data.feature_dim); }},
        {"data", "cluster_std", "per-class Gaussian cluster spread",
         [](ExperimentConfig& c, const std::string& v) { c.data.cluster_std = to_double(v); },
         [](const ExperimentConfig& c) { return fmt_double(c.data.cluster_std); }},
        {"data", "shots", "training instances per base class",
         [](ExperimentConfig& c, const std::string& v) { c.data.shots = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.data.shots); }},
        {"data", "eval_per_class", "evaluation instances per class",
         [](ExperimentConfig& c, const std::string& v) { c.data.eval_per_class = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.data.eval_per_class); }},
        {"data", "data_seed", "cluster-center seed (the dataset identity)",
         [](ExperimentConfig& c, const std::string& v) { c.data.data_seed = to_u64(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.data.data_seed); }},
        {"data", "domain", "domain name used by the description templates",
         [](ExperimentConfig& c, const std::string& v) { c.data.domain_name = v; },
         [](const ExperimentConfig& c) { return c.data.domain_name; }},

        {"train", "epochs", "training epochs",
         [](ExperimentConfig& c, const std::string& v) { c.train.epochs = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.train.epochs); }},
        {"train", "lr", "AdamW learning rate",
         [](ExperimentConfig& c, const std::string& v) { c.train.lr = to_double(v); },
         [](const ExperimentConfig& c) { return fmt_double(c.train.lr); }},
        {"train", "batch_size", "instances per step (fixed at 1)",
         [](ExperimentConfig& c, const std::string& v) { c.train.batch_size = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.train.batch_size); }},
        {"train", "weight_decay", "decoupled weight decay",
         [](ExperimentConfig& c, const std::string& v) { c.train.weight_decay = to_double(v); },
         [](const ExperimentConfig& c) { return fmt_double(c.train.weight_decay); }},
        {"train", "seeds", "comma-separated run seeds",
         [](ExperimentConfig& c, const std::string& v) { c.train.seeds = to_seed_list(v); },
         [](const ExperimentConfig& c) {
             std::string s;
             for (size_t i = 0; i < c.train.seeds.size(); ++i)
                 s += (i ? "," : "") + std::to_string(c.train.seeds[i]);
             return s;
         }},
        {"train", "precision", "compute precision: f32 or f64",
         [](ExperimentConfig& c, const std::string& v) { c.train.precision = parse_precision(v); },
         [](const ExperimentConfig& c) { return std::string(precision_name(c.train.precision)); }},
        {"train", "cond_tokens", "conditional prompt length n",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.cond_len = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.train.prompt.cond_len); }},
        {"train", "ctx_tokens", "contextual prompt length m",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.ctx_len = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.train.prompt.ctx_len); }},
        {"train", "insert_layers", "prompt insertion depth l",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.insert_layers = to_int(v); },
         [](const ExperimentConfig& c) { return std::to_string(c.train.prompt.insert_layers); }},
        {"train", "temperature", "softmax temperature tau",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.temperature = to_double(v); },
         [](const ExperimentConfig& c) { return fmt_double(c.train.prompt.temperature); }},
        {"train", "amg_mode", "linear | self | cross | full",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.amg_mode = parse_amg_mode(v); },
         [](const ExperimentConfig& c) { return std::string(amg_mode_name(c.train.prompt.amg_mode)); }},
        {"train", "amg_shared", "share one AMG parameter set across layers",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.amg_shared = to_bool(v); },
         [](const ExperimentConfig& c) { return std::string(c.train.prompt.amg_shared ? "true" : "false"); }},
        {"train", "mpf_mode", "add | concat | both",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.mpf_mode = parse_mpf_mode(v); },
         [](const ExperimentConfig& c) { return std::string(mpf_mode_name(c.train.prompt.mpf_mode)); }},
        {"train", "mllm_cache", "on: query the KV cache; random-init: learnable P_D",
         [](ExperimentConfig& c, const std::string& v) {
             if (v == "on") c.train.prompt.mllm_cache = true;
             else if (v == "random-init") c.train.prompt.mllm_cache = false;
             else throw ConfigError("mllm_cache must be 'on' or 'random-init', got '" + v + "'");
         },
         [](const ExperimentConfig& c) {
             return std::string(c.train.prompt.mllm_cache ? "on" : "random-init");
         }},
        {"train", "train_kv", "also train the decoder key/value projections",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.train_kv = to_bool(v); },
         [](const ExperimentConfig& c) { return std::string(c.train.prompt.train_kv ? "true" : "false"); }},
        {"train", "eval_adapted", "score with adapted features (false: raw features)",
         [](ExperimentConfig& c, const std::string& v) { c.train.prompt.eval_adapted = to_bool(v); },
         [](const ExperimentConfig& c) { return std::string(c.train.prompt.eval_adapted ? "true" : "false"); }},

        {"loss", "lambda", "consistency loss balance factor",
         [](ExperimentConfig& c, const std::string& v) { c.loss.lambda = to_double(v); },
         [](const ExperimentConfig& c) { return fmt_double(c.loss.lambda); }},
        {"loss", "aug_jitter", "image feature jitter scale",
         [](ExperimentConfig& c, const std::string& v) { c.loss.aug_jitter = to_double(v); },
         [](const ExperimentConfig& c) { return fmt_double(c.loss.aug_jitter); }},

        {"paths", "bank", "optional JSON supervision bank; empty renders a mock bank",
         [](ExperimentConfig& c, const std::string& v) { c.paths.bank = v; },
         [](const ExperimentConfig& c) { return c.paths.bank; }},
        {"paths", "out", "output directory",
         [](ExperimentConfig& c, const std::string& v) { c.paths.out = v; },
         [](const ExperimentConfig& c) { return c.paths.out; }},
    };
    return defs;
}

} // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        if (s.front() == '[') {
            if (s.back() != ']')
                throw ConfigError(where + ": malformed section header '" + s + "'");
            section = trim(s.substr(1, s.size() - 2));
            bool known = false;
            for (const auto& def : schema()) known = known || section == def.section;
            if (!known) throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value', got '" + s + "'");
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (section.empty())
            throw ConfigError(where + ": key '" + key + "' appears before any [section]");
        const KeyDef* found = nullptr;
        for (const auto& def : schema())
            if (section == def.section && key == def.key) found = &def;
        if (!found)
            throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
        try {
            found->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": key '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string config_reference() {
    const ExperimentConfig defaults;
    std::ostringstream os;
    std::string section;
    for (const auto& def : schema()) {
        if (section != def.section) {
            section = def.section;
            os << "[" << section << "]\n";
        }
        os << "  " << def.key << " = " << def.get(defaults) << "\n      " << def.doc << "\n";
    }
    return os.str();
}

ExperimentConfig gradcheck_toy_config() {
    ExperimentConfig cfg;
    cfg.backbone.d_text = 8;
    cfg.backbone.d_img = 12;
    cfg.backbone.d_mllms = 16;
    cfg.backbone.d_embed = 8;
    cfg.backbone.heads = 2;
    cfg.backbone.depth = 2;
    cfg.backbone.patches = 4;
    cfg.backbone.class_tokens = 2;
    cfg.backbone.caption_len = 3;
    cfg.backbone.max_classes = 8;
    cfg.backbone.seed = 7;
    cfg.data.base_classes = 3;
    cfg.data.new_classes = 1;
    cfg.data.feature_dim = 6;
    cfg.data.cluster_std = 0.3;
    cfg.data.shots = 1;
    cfg.data.eval_per_class = 2;
    cfg.train.epochs = 1;
    cfg.train.seeds = {1};
    cfg.train.precision = Precision::f64;
    cfg.train.prompt.cond_len = 4;
    cfg.train.prompt.ctx_len = 2;
    cfg.train.prompt.insert_layers = 2;
    cfg.train.prompt.temperature = 0.05;
    cfg.validate();
    return cfg;
}

} // namespace cpl
