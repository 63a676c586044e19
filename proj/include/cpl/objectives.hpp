#pragma once

#include <map>
#include <string>
#include <vector>

#include "cpl/backbone.hpp"
#include "cpl/scp.hpp"
#include "cpl/tensor.hpp"

namespace cpl {

// Residual bottleneck adapter: x + W2(gelu(W1 x + b1)) + b2, hidden width d/2.
struct Adapter {
    AffineMap in;
    AffineMap out;
};

struct Adapters {
    Adapter va;  // image side
    Adapter ta;  // text side
};

Adapters make_adapters(Rng rng, int d_embed);
Tensor apply_adapter(Tape& t, const Adapter& a, const Tensor& x);  // 1-D in/out

// ---------------------------------------------------------------------------
// text augmentation machinery

std::string render_custom_template(const std::string& class_name, const std::string& t_mllms);
std::string render_llm_prompt(const std::string& class_name, const std::string& domain_name,
                              const std::string& t_mllms);
// mock stand-in for the LLM answer, following the fixed output format clause
std::string mock_expansion_sentence(const std::string& class_name, const std::string& t_mllms);

struct BankSentence {
    std::string text;
    Tensor embedding;        // [d_embed], unit norm, frozen
    std::string provenance;  // custom | expansion | external
};

struct AugmentedTextBank {
    std::map<std::string, std::vector<BankSentence>> by_class;

    const std::vector<BankSentence>& sentences_for(const std::string& class_name) const;
};

// Deterministic per-word embeddings + the frozen text encoder stand in for a
// real sentence encoder when the bank supplies no embeddings.
Tensor mock_encode_sentence(const FrozenBackbone& bb, const std::string& sentence,
                            uint64_t bank_seed);

// Bank rendered from the dataset's class names and mock captions.
AugmentedTextBank make_mock_bank(const FrozenBackbone& bb, const Dataset& ds,
                                 uint64_t bank_seed);

// JSON file: { "class": { "sentences": [...], "embeddings": [[...]] optional,
// "provenance": [...] optional } }. Embedding rows must match sentence count;
// rows are unit-normalized on load. Sentences without embeddings are
// mock-encoded.
AugmentedTextBank load_bank_file(const std::string& path, const FrozenBackbone& bb,
                                 uint64_t bank_seed);

const BankSentence& sample_supervision(const AugmentedTextBank& bank,
                                       const std::string& class_name, Rng& rng);

uint64_t bank_hash(const AugmentedTextBank& bank);

// ---------------------------------------------------------------------------
// training objective: adapted cross-entropy plus consistency terms

Tensor ce_loss(Tape& t, const Tensor& f_star, const std::vector<Tensor>& t_star_all,
               int true_index, const Adapters& adapters, double tau);

// 2 - cos(T', ta(T*)) - cos(F', va(F*)), clamped cosines keep it in [0,4]
Tensor cc_loss(Tape& t, const Tensor& t_prime, const Tensor& t_star_adapted,
               const Tensor& f_prime, const Tensor& f_star_adapted);

Tensor total_loss(Tape& t, const Tensor& ce, const Tensor& cc, double lambda);

// Seeded feature jitter (std = jitter * rms(features)) re-encoded through the
// frozen promptless image path; returns a constant unit vector.
Tensor augment_image_features(const FrozenBackbone& bb, const SyntheticInstance& inst,
                              Rng& rng, double jitter);

} // namespace cpl
