#pragma once

#include "cpl/amg.hpp"
#include "cpl/backbone.hpp"
#include "cpl/mpf.hpp"
#include "cpl/objectives.hpp"
#include "cpl/scp.hpp"

namespace cpl {

// Switches that shape the learnable state and the forward graph.
struct PromptConfig {
    int cond_len = 16;       // n, conditional prompt tokens
    int ctx_len = 4;         // m, contextual prompt tokens
    int insert_layers = 4;   // prompt depth; <= backbone depth
    double temperature = 0.01;
    AmgMode amg_mode = AmgMode::full;
    bool amg_shared = true;
    MpfMode mpf_mode = MpfMode::both;
    bool mllm_cache = true;  // false: learnable normal-init P_D replaces generate_pd
    bool train_kv = false;   // override: also train the decoder key/value projections
    bool eval_adapted = true;

    void validate(const BackboneConfig& bb) const;
};

// Every learnable tensor in one place: the query prompt and bottlenecks, the
// AMG weights (one set when shared), contextual prompts and the feature
// adapters. The decoder's l_q/l_o live in the backbone but join the trainable
// set, so PromptState and FrozenBackbone together hold the whole model.
struct PromptState {
    PromptConfig cfg;
    QueryPrompt query;
    Tensor p_d_fixed;  // only used when cfg.mllm_cache == false
    TextBottlenecks f_t;
    VisualBottlenecks f_v;
    std::vector<AMGWeights> amg;  // size 1 when shared, else insert_layers
    ContextualPrompts ctx;
    Adapters adapters;
};

PromptState make_prompt_state(const FrozenBackbone& bb, const PromptConfig& cfg,
                              uint64_t seed);

const AMGWeights& amg_at(const PromptState& st, int layer);

// Deterministically ordered (name, tensor) list of exactly the parameters
// the active switches train. Marks them requires_grad and leaves every other
// tensor frozen.
std::vector<Param> trainable_params(PromptState& st, FrozenBackbone& bb);

// Hash over every tensor in the state (trainable or not), for byte-change
// audits.
std::vector<Param> all_state_params(PromptState& st, FrozenBackbone& bb);

} // namespace cpl
