#pragma once

#include "cpl/backbone.hpp"
#include "cpl/tensor.hpp"

namespace cpl {

struct PromptState;

enum class MpfMode { add, concat, both };

MpfMode parse_mpf_mode(std::string_view s);
const char* mpf_mode_name(MpfMode m);

// Class-agnostic learnable prompt tokens, one independent pair per insertion
// layer. The first text layer is initialized from the word embedding of the
// placeholder token "X" repeated m times; everything else is normal(0, 0.02).
struct ContextualPrompts {
    std::vector<Tensor> p_t;  // each [m × d_text]
    std::vector<Tensor> p_v;  // each [m × d_img]
};

ContextualPrompts make_contextual_prompts(Rng rng, const FrozenBackbone& bb, int m,
                                          int insert_layers);

// P_A[j] = P_ctx[j] + mean over conditional rows; same rule for the text pair
// (P_T, P_TD) and the visual pair (P_V, P_VC).
Tensor fuse_prompts(Tape& t, const Tensor& p_ctx, const Tensor& p_cond);

// Canonical "both" orderings; lengths 1+m+L+n+1 and M+n+m.
Tensor assemble_text_sequence(Tape& t, const Tensor& sos, const Tensor& p_ta,
                              const Tensor& words, const Tensor& p_td, const Tensor& eos);
Tensor assemble_visual_sequence(Tape& t, const Tensor& patches, const Tensor& p_vc,
                                const Tensor& p_va);

struct DualEncoderOutput {
    Tensor f_star;               // [d_embed], unit norm
    std::vector<Tensor> t_star;  // one [d_embed] per class, unit norm
};

// Full prompted forward of both encoders with deep prompt re-insertion:
// at every insertion layer the prompt positions produced by the previous
// layer are replaced by freshly assembled blocks.
DualEncoderOutput forward_dual_encoder(Tape& t, const FrozenBackbone& bb,
                                       const PromptState& st,
                                       const SyntheticInstance& inst,
                                       const KVCache& cache,
                                       const std::vector<int>& class_ids);

// softmax over cosine similarities scaled by 1/tau
std::vector<double> predict(const Tensor& f_star, const std::vector<Tensor>& t_star,
                            double tau);

int text_pool_position(MpfMode mode, int m, int l_words, int n);
int text_sequence_length(MpfMode mode, int m, int l_words, int n);
int visual_sequence_length(MpfMode mode, int m, int patches, int n);

} // namespace cpl
