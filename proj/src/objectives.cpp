#include "cpl/objectives.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cpl {

Adapters make_adapters(Rng rng, int d_embed) {
    const int hidden = std::max(1, d_embed / 2);
    Adapters a;
    a.va.in = make_affine(rng.split("va_in"), d_embed, hidden, true);
    a.va.out = make_affine(rng.split("va_out"), hidden, d_embed, true);
    a.ta.in = make_affine(rng.split("ta_in"), d_embed, hidden, true);
    a.ta.out = make_affine(rng.split("ta_out"), hidden, d_embed, true);
    return a;
}

Tensor apply_adapter(Tape& t, const Adapter& a, const Tensor& x) {
    if (x.rank() != 1)
        throw DimError("adapter: expected 1-D feature, got " + x.shape_str());
    Tensor row = t.reshape(x, {1, x.shape()[0]});
    Tensor h = t.gelu(t.linear(row, a.in.w, a.in.b));
    Tensor delta = t.linear(h, a.out.w, a.out.b);
    return t.reshape(t.add(row, delta), {x.shape()[0]});
}

// ---------------------------------------------------------------------------
// templates

std::string render_custom_template(const std::string& class_name, const std::string& t_mllms) {
    if (class_name.empty()) throw ContractError("render_custom_template: empty class name");
    if (t_mllms.empty()) return "a photo of a " + class_name + ".";
    return "a photo of a " + class_name + ", with " + t_mllms + ".";
}

std::string render_llm_prompt(const std::string& class_name, const std::string& domain_name,
                              const std::string& t_mllms) {
    if (class_name.empty() || domain_name.empty() || t_mllms.empty())
        throw ContractError("render_llm_prompt: all fields must be nonempty");
    return "What fine-grained characteristics can be used to differentiate the " + class_name +
           " and " + domain_name + "? Combine the VQA-description: [" + t_mllms +
           "]. Texts should be of the form: \"<A/An/The> <category> is <VQA-description> and "
           "<fine-grained characteristics>\".";
}

std::string mock_expansion_sentence(const std::string& class_name, const std::string& t_mllms) {
    return "The " + class_name + " is " + t_mllms +
           " and separable from neighboring clusters by its mean offset.";
}

// ---------------------------------------------------------------------------
// bank

const std::vector<BankSentence>& AugmentedTextBank::sentences_for(
    const std::string& class_name) const {
    auto it = by_class.find(class_name);
    if (it == by_class.end() || it->second.empty())
        throw ConfigError("augmented-text bank has no sentences for class '" + class_name + "'");
    return it->second;
}

Tensor mock_encode_sentence(const FrozenBackbone& bb, const std::string& sentence,
                            uint64_t bank_seed) {
    std::istringstream iss(sentence);
    std::vector<std::string> words;
    for (std::string w; iss >> w;) words.push_back(w);
    if (words.empty()) throw ContractError("mock_encode_sentence: empty sentence");

    Rng bank_rng = Rng(bank_seed).split("bank_tokens");
    std::vector<Tensor> rows;
    rows.push_back(word_embedding_rows(bb, {0}));  // SOS
    Tape t(GradMode::none);
    for (const auto& w : words) {
        Rng r = bank_rng.split(w);
        rows.push_back(Tensor::randn(r, {1, bb.cfg.d_text}, 0.02));
    }
    rows.push_back(word_embedding_rows(bb, {1}));  // EOS
    Tensor seq = t.concat_rows(rows);
    return encode_text_promptless(t, bb, seq, seq.rows() - 1);
}

namespace {

Tensor normalized_copy(const std::vector<double>& row) {
    double n2 = 0.0;
    for (double v : row) n2 += v * v;
    const double n = std::sqrt(n2);
    if (n == 0.0) throw IntegrityError("bank embedding row has zero norm");
    std::vector<double> out(row.size());
    for (size_t i = 0; i < row.size(); ++i) out[i] = row[i] / n;
    return Tensor::from({static_cast<int>(row.size())}, std::move(out));
}

} // namespace

AugmentedTextBank make_mock_bank(const FrozenBackbone& bb, const Dataset& ds,
                                 uint64_t bank_seed) {
    AugmentedTextBank bank;
    for (size_t k = 0; k < ds.class_names.size(); ++k) {
        const std::string& name = ds.class_names[k];
        const std::string& caption = ds.class_captions[k];
        std::vector<BankSentence> sents;
        BankSentence custom;
        custom.text = render_custom_template(name, caption);
        custom.embedding = mock_encode_sentence(bb, custom.text, bank_seed);
        custom.provenance = "custom";
        sents.push_back(std::move(custom));
        BankSentence expansion;
        expansion.text = mock_expansion_sentence(name, caption);
        expansion.embedding = mock_encode_sentence(bb, expansion.text, bank_seed);
        expansion.provenance = "expansion";
        sents.push_back(std::move(expansion));
        bank.by_class.emplace(name, std::move(sents));
    }
    return bank;
}

AugmentedTextBank load_bank_file(const std::string& path, const FrozenBackbone& bb,
                                 uint64_t bank_seed) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open bank file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("bank file '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw IntegrityError("bank file '" + path + "': expected a JSON object");

    AugmentedTextBank bank;
    for (auto& [class_name, entry] : j.items()) {
        if (!entry.contains("sentences") || !entry["sentences"].is_array() ||
            entry["sentences"].empty())
            throw IntegrityError("bank class '" + class_name + "': needs a nonempty sentences array");
        const auto& sentences = entry["sentences"];
        const bool has_emb = entry.contains("embeddings");
        const bool has_prov = entry.contains("provenance");
        if (has_emb && entry["embeddings"].size() != sentences.size())
            throw IntegrityError("bank class '" + class_name +
                                 "': embeddings row count does not match sentences");
        if (has_prov && entry["provenance"].size() != sentences.size())
            throw IntegrityError("bank class '" + class_name +
                                 "': provenance count does not match sentences");

        std::vector<BankSentence> sents;
        for (size_t i = 0; i < sentences.size(); ++i) {
            BankSentence s;
            s.text = sentences[i].get<std::string>();
            s.provenance = has_prov ? entry["provenance"][i].get<std::string>() : "external";
            if (has_emb) {
                auto row = entry["embeddings"][i].get<std::vector<double>>();
                if (static_cast<int>(row.size()) != bb.cfg.d_embed)
                    throw IntegrityError("bank class '" + class_name + "': embedding width " +
                                         std::to_string(row.size()) + ", expected " +
                                         std::to_string(bb.cfg.d_embed));
                s.embedding = normalized_copy(row);
            } else {
                s.embedding = mock_encode_sentence(bb, s.text, bank_seed);
            }
            sents.push_back(std::move(s));
        }
        bank.by_class.emplace(class_name, std::move(sents));
    }
    return bank;
}

const BankSentence& sample_supervision(const AugmentedTextBank& bank,
                                       const std::string& class_name, Rng& rng) {
    const auto& sents = bank.sentences_for(class_name);
    return sents[static_cast<size_t>(rng.uniform_int(static_cast<int>(sents.size())))];
}

uint64_t bank_hash(const AugmentedTextBank& bank) {
    uint64_t h = 14695981039346656037ull;
    for (const auto& [name, sents] : bank.by_class) {
        h = fnv1a64(name.data(), name.size(), h);
        for (const auto& s : sents) {
            h = fnv1a64(s.text.data(), s.text.size(), h);
            h = fnv1a64(s.embedding.data(), s.embedding.size() * sizeof(double), h);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// losses

Tensor ce_loss(Tape& t, const Tensor& f_star, const std::vector<Tensor>& t_star_all,
               int true_index, const Adapters& adapters, double tau) {
    if (t_star_all.empty()) throw ContractError("ce_loss: no class features");
    if (true_index < 0 || true_index >= static_cast<int>(t_star_all.size()))
        throw ContractError("ce_loss: true class index out of range");
    if (tau <= 0.0) throw ContractError("ce_loss: temperature must be positive");

    Tensor f_ad = apply_adapter(t, adapters.va, f_star);
    std::vector<Tensor> cells;
    cells.reserve(t_star_all.size());
    for (const Tensor& ts : t_star_all) {
        Tensor t_ad = apply_adapter(t, adapters.ta, ts);
        cells.push_back(t.reshape(t.cosine(f_ad, t_ad), {1, 1}));
    }
    Tensor logits = t.reshape(t.concat_rows(cells), {static_cast<int>(cells.size())});
    return t.cross_entropy(t.scale(logits, 1.0 / tau), true_index);
}

Tensor cc_loss(Tape& t, const Tensor& t_prime, const Tensor& t_star_adapted,
               const Tensor& f_prime, const Tensor& f_star_adapted) {
    Tensor ct = t.cosine(t_prime, t_star_adapted);
    Tensor cf = t.cosine(f_prime, f_star_adapted);
    return t.add_scalar(t.scale(t.add(ct, cf), -1.0), 2.0);
}

Tensor total_loss(Tape& t, const Tensor& ce, const Tensor& cc, double lambda) {
    if (lambda < 0.0) throw ContractError("total_loss: lambda must be >= 0");
    return t.add(ce, t.scale(cc, lambda));
}

Tensor augment_image_features(const FrozenBackbone& bb, const SyntheticInstance& inst,
                              Rng& rng, double jitter) {
    double rms = 0.0;
    for (double v : inst.features) rms += v * v;
    rms = std::sqrt(rms / static_cast<double>(inst.features.size()));

    SyntheticInstance jittered = inst;
    const double stddev = jitter * rms;
    for (auto& v : jittered.features) v += rng.normal(0.0, stddev);

    Tape t(GradMode::none);
    Tensor patches = patch_embed(bb, jittered);
    return encode_image_promptless(t, bb, patches, 0);
}

} // namespace cpl
