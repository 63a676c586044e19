#pragma once

#include "cpl/scp.hpp"
#include "cpl/tensor.hpp"

namespace cpl {

enum class AmgMode { linear_only, self_only, cross_only, full };

AmgMode parse_amg_mode(std::string_view s);
const char* amg_mode_name(AmgMode m);

// One attention-mutual-guidance parameter set. ln_in normalizes the prompt
// before both attention branches, ln_ffn normalizes the gated product before
// the FFN; the image tokens are normalized without learnable parameters.
// `lin` is the single affine map the linear_only mode swaps in for the whole
// block.
struct AMGWeights {
    AttentionWeights self_attn;   // d_text sequence attending to itself
    AttentionWeights cross_attn;  // queries d_text, keys/values from d_img tokens
    Tensor ln_in_g, ln_in_b;
    Tensor ln_ffn_g, ln_ffn_b;
    Tensor ffn_w1, ffn_b1;  // d_text -> 4*d_text
    Tensor ffn_w2, ffn_b2;
    AffineMap lin;
};

AMGWeights make_amg_weights(Rng rng, int d_text, int d_img, int heads);

// Per-layer affine maps d_text -> d_img producing the VCP.
struct VisualBottlenecks {
    std::vector<AffineMap> layers;
};

VisualBottlenecks make_visual_bottlenecks(Rng rng, int count, int d_text, int d_img);

// P_cross = P_TD + cross(LN(P_TD), LN(F_x)); P_self = P_TD + self(LN(P_TD));
// G = P_cross ∘ P_self; result = G + FFN(LN(G)).
Tensor amg_forward(Tape& t, const Tensor& p_td, const Tensor& f_x, const AMGWeights& w);

// Table-style variants: linear_only replaces the whole block with one affine
// map, self_only/cross_only drop a branch, full is amg_forward.
Tensor amg_apply(Tape& t, const Tensor& p_td, const Tensor& f_x, const AMGWeights& w,
                 AmgMode mode);

Tensor project_vcp(Tape& t, const Tensor& p_c, int layer, const VisualBottlenecks& fvs);

} // namespace cpl
