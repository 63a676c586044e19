#pragma once

#include "cpl/backbone.hpp"
#include "cpl/tensor.hpp"

namespace cpl {

// Learnable query hidden states attending into the per-instance KV-cache of
// the mock decoder layer.
struct QueryPrompt {
    Tensor p_q;  // [n × d_mllms]
    int length() const { return p_q.rows(); }
};

QueryPrompt make_query_prompt(Rng rng, int n, int d_mllms);

struct AffineMap {
    Tensor w;
    Tensor b;
};

AffineMap make_affine(Rng rng, int d_in, int d_out, bool requires_grad);

// One independently parameterized bottleneck (d_mllms -> d_text) per
// prompt-insertion layer.
struct TextBottlenecks {
    std::vector<AffineMap> layers;
};

TextBottlenecks make_text_bottlenecks(Rng rng, int count, int d_mllms, int d_text);

// Scaled dot-product attention of L_q(P_Q) over {cached K/V ++ projected
// P_Q}, heads merged, then L_o. Trainable tensors on this path are P_Q and
// the backbone's dec_wq/dec_bq/dec_wo/dec_bo; dec_wk/dec_wv stay frozen.
Tensor generate_pd(Tape& t, const FrozenBackbone& bb, const QueryPrompt& q,
                   const KVCache& cache);

// P_TD^i = F_t[i](P_D); P_D is computed once per instance per step and
// shared across insertion layers.
Tensor project_scp(Tape& t, const Tensor& p_d, int layer, const TextBottlenecks& fts);

} // namespace cpl
