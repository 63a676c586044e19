#include "cpl/mpf.hpp"

#include <algorithm>
#include <cmath>

#include "cpl/prompt_state.hpp"

namespace cpl {

MpfMode parse_mpf_mode(std::string_view s) {
    if (s == "add") return MpfMode::add;
    if (s == "concat") return MpfMode::concat;
    if (s == "both") return MpfMode::both;
    throw ConfigError("unknown mpf_mode '" + std::string(s) + "' (expected add|concat|both)");
}

const char* mpf_mode_name(MpfMode m) {
    switch (m) {
        case MpfMode::add: return "add";
        case MpfMode::concat: return "concat";
        case MpfMode::both: return "both";
    }
    return "?";
}

void PromptConfig::validate(const BackboneConfig& bb) const {
    if (cond_len < 1) throw ConfigError("prompt: cond_tokens must be >= 1");
    if (ctx_len < 1) throw ConfigError("prompt: ctx_tokens must be >= 1");
    if (insert_layers < 1 || insert_layers > bb.depth)
        throw ConfigError("prompt: insert_layers must be in [1, depth=" +
                          std::to_string(bb.depth) + "]");
    if (temperature <= 0.0) throw ConfigError("prompt: temperature must be positive");
}

ContextualPrompts make_contextual_prompts(Rng rng, const FrozenBackbone& bb, int m,
                                          int insert_layers) {
    ContextualPrompts ctx;
    const int d_text = bb.cfg.d_text;
    const int d_img = bb.cfg.d_img;
    for (int i = 0; i < insert_layers; ++i) {
        if (i == 0) {
            // "X X X X": m copies of the placeholder token embedding
            Tensor p = Tensor::zeros({m, d_text}, true);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < d_text; ++c) p.at(r, c) = bb.word_table.at(x_token_id(), c);
            ctx.p_t.push_back(p);
        } else {
            Rng r = rng.split("p_t").split(static_cast<uint64_t>(i));
            ctx.p_t.push_back(Tensor::randn(r, {m, d_text}, 0.02, true));
        }
        Rng rv = rng.split("p_v").split(static_cast<uint64_t>(i));
        ctx.p_v.push_back(Tensor::randn(rv, {m, d_img}, 0.02, true));
    }
    return ctx;
}

Tensor fuse_prompts(Tape& t, const Tensor& p_ctx, const Tensor& p_cond) {
    if (p_ctx.cols() != p_cond.cols())
        throw DimError("fuse_prompts: width mismatch " + p_ctx.shape_str() + " vs " +
                       p_cond.shape_str());
    return t.add_bias(p_ctx, t.mean_rows(p_cond));
}

namespace {

void check_width(const Tensor& x, int d, const char* what) {
    if (x.cols() != d)
        throw DimError(std::string("assemble: ") + what + " has width " +
                       std::to_string(x.cols()) + ", expected " + std::to_string(d));
}

} // namespace

Tensor assemble_text_sequence(Tape& t, const Tensor& sos, const Tensor& p_ta,
                              const Tensor& words, const Tensor& p_td, const Tensor& eos) {
    const int d = sos.cols();
    check_width(p_ta, d, "P_TA");
    check_width(words, d, "word embeddings");
    check_width(p_td, d, "P_TD");
    check_width(eos, d, "EOS");
    return t.concat_rows({sos, p_ta, words, p_td, eos});
}

Tensor assemble_visual_sequence(Tape& t, const Tensor& patches, const Tensor& p_vc,
                                const Tensor& p_va) {
    const int d = patches.cols();
    check_width(p_vc, d, "P_VC");
    check_width(p_va, d, "P_VA");
    return t.concat_rows({patches, p_vc, p_va});
}

int text_sequence_length(MpfMode mode, int m, int l_words, int n) {
    switch (mode) {
        case MpfMode::add: return 1 + m + l_words + 1;
        case MpfMode::concat: return 1 + m + l_words + n + 1;
        case MpfMode::both: return 1 + m + l_words + n + 1;
    }
    return 0;
}

int text_pool_position(MpfMode mode, int m, int l_words, int n) {
    return text_sequence_length(mode, m, l_words, n) - 1;  // EOS is last
}

int visual_sequence_length(MpfMode mode, int m, int patches, int n) {
    switch (mode) {
        case MpfMode::add: return patches + m;
        case MpfMode::concat: return patches + m + n;
        case MpfMode::both: return patches + n + m;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// prompt state

PromptState make_prompt_state(const FrozenBackbone& bb, const PromptConfig& cfg,
                              uint64_t seed) {
    cfg.validate(bb.cfg);
    PromptState st;
    st.cfg = cfg;
    Rng root = Rng(seed).split("prompt_state");

    st.query = make_query_prompt(root.split("query"), cfg.cond_len, bb.cfg.d_mllms);
    {
        Rng r = root.split("p_d_fixed");
        st.p_d_fixed = Tensor::randn(r, {cfg.cond_len, bb.cfg.d_mllms}, 0.02,
                                     /*requires_grad=*/!cfg.mllm_cache);
    }
    st.f_t = make_text_bottlenecks(root.split("f_t"), cfg.insert_layers, bb.cfg.d_mllms,
                                   bb.cfg.d_text);
    st.f_v = make_visual_bottlenecks(root.split("f_v"), cfg.insert_layers, bb.cfg.d_text,
                                     bb.cfg.d_img);
    const int amg_sets = cfg.amg_shared ? 1 : cfg.insert_layers;
    for (int i = 0; i < amg_sets; ++i)
        st.amg.push_back(make_amg_weights(root.split("amg").split(static_cast<uint64_t>(i)),
                                          bb.cfg.d_text, bb.cfg.d_img, bb.cfg.heads));
    st.ctx = make_contextual_prompts(root.split("ctx"), bb, cfg.ctx_len, cfg.insert_layers);
    st.adapters = make_adapters(root.split("adapters"), bb.cfg.d_embed);
    return st;
}

const AMGWeights& amg_at(const PromptState& st, int layer) {
    if (st.cfg.amg_shared) return st.amg.at(0);
    return st.amg.at(static_cast<size_t>(layer));
}

namespace {

void push_affine(std::vector<Param>& out, const std::string& prefix, const AffineMap& m) {
    out.push_back({prefix + ".w", m.w});
    out.push_back({prefix + ".b", m.b});
}

void push_attention(std::vector<Param>& out, const std::string& prefix,
                    const AttentionWeights& w) {
    out.push_back({prefix + ".wq", w.wq});
    out.push_back({prefix + ".bq", w.bq});
    out.push_back({prefix + ".wk", w.wk});
    out.push_back({prefix + ".bk", w.bk});
    out.push_back({prefix + ".wv", w.wv});
    out.push_back({prefix + ".bv", w.bv});
    out.push_back({prefix + ".wo", w.wo});
    out.push_back({prefix + ".bo", w.bo});
}

void push_amg(std::vector<Param>& out, const std::string& prefix, const AMGWeights& w,
              AmgMode mode) {
    if (mode == AmgMode::linear_only) {
        push_affine(out, prefix + ".lin", w.lin);
        return;
    }
    if (mode != AmgMode::cross_only) push_attention(out, prefix + ".self", w.self_attn);
    if (mode != AmgMode::self_only) push_attention(out, prefix + ".cross", w.cross_attn);
    out.push_back({prefix + ".ln_in.g", w.ln_in_g});
    out.push_back({prefix + ".ln_in.b", w.ln_in_b});
    out.push_back({prefix + ".ln_ffn.g", w.ln_ffn_g});
    out.push_back({prefix + ".ln_ffn.b", w.ln_ffn_b});
    out.push_back({prefix + ".ffn.w1", w.ffn_w1});
    out.push_back({prefix + ".ffn.b1", w.ffn_b1});
    out.push_back({prefix + ".ffn.w2", w.ffn_w2});
    out.push_back({prefix + ".ffn.b2", w.ffn_b2});
}

} // namespace

std::vector<Param> trainable_params(PromptState& st, FrozenBackbone& bb) {
    std::vector<Param> out;
    if (st.cfg.mllm_cache) {
        out.push_back({"scp.p_q", st.query.p_q});
        out.push_back({"backbone.dec_wq", bb.dec_wq});
        out.push_back({"backbone.dec_bq", bb.dec_bq});
        out.push_back({"backbone.dec_wo", bb.dec_wo});
        out.push_back({"backbone.dec_bo", bb.dec_bo});
        if (st.cfg.train_kv) {
            out.push_back({"backbone.dec_wk", bb.dec_wk});
            out.push_back({"backbone.dec_bk", bb.dec_bk});
            out.push_back({"backbone.dec_wv", bb.dec_wv});
            out.push_back({"backbone.dec_bv", bb.dec_bv});
        }
    } else {
        out.push_back({"scp.p_d", st.p_d_fixed});
    }
    for (size_t i = 0; i < st.f_t.layers.size(); ++i)
        push_affine(out, "scp.f_t." + std::to_string(i), st.f_t.layers[i]);
    for (size_t i = 0; i < st.amg.size(); ++i)
        push_amg(out, "amg." + std::to_string(i), st.amg[i], st.cfg.amg_mode);
    for (size_t i = 0; i < st.f_v.layers.size(); ++i)
        push_affine(out, "amg.f_v." + std::to_string(i), st.f_v.layers[i]);
    for (size_t i = 0; i < st.ctx.p_t.size(); ++i)
        out.push_back({"mpf.p_t." + std::to_string(i), st.ctx.p_t[i]});
    for (size_t i = 0; i < st.ctx.p_v.size(); ++i)
        out.push_back({"mpf.p_v." + std::to_string(i), st.ctx.p_v[i]});
    push_affine(out, "adapters.va.in", st.adapters.va.in);
    push_affine(out, "adapters.va.out", st.adapters.va.out);
    push_affine(out, "adapters.ta.in", st.adapters.ta.in);
    push_affine(out, "adapters.ta.out", st.adapters.ta.out);

    for (auto& p : out) p.tensor.set_requires_grad(true);
    return out;
}

std::vector<Param> all_state_params(PromptState& st, FrozenBackbone& bb) {
    std::vector<Param> out;
    out.push_back({"scp.p_q", st.query.p_q});
    out.push_back({"scp.p_d", st.p_d_fixed});
    out.push_back({"backbone.dec_wq", bb.dec_wq});
    out.push_back({"backbone.dec_bq", bb.dec_bq});
    out.push_back({"backbone.dec_wk", bb.dec_wk});
    out.push_back({"backbone.dec_bk", bb.dec_bk});
    out.push_back({"backbone.dec_wv", bb.dec_wv});
    out.push_back({"backbone.dec_bv", bb.dec_bv});
    out.push_back({"backbone.dec_wo", bb.dec_wo});
    out.push_back({"backbone.dec_bo", bb.dec_bo});
    for (size_t i = 0; i < st.f_t.layers.size(); ++i)
        push_affine(out, "scp.f_t." + std::to_string(i), st.f_t.layers[i]);
    for (size_t i = 0; i < st.amg.size(); ++i) {
        const std::string prefix = "amg." + std::to_string(i);
        push_attention(out, prefix + ".self", st.amg[i].self_attn);
        push_attention(out, prefix + ".cross", st.amg[i].cross_attn);
        out.push_back({prefix + ".ln_in.g", st.amg[i].ln_in_g});
        out.push_back({prefix + ".ln_in.b", st.amg[i].ln_in_b});
        out.push_back({prefix + ".ln_ffn.g", st.amg[i].ln_ffn_g});
        out.push_back({prefix + ".ln_ffn.b", st.amg[i].ln_ffn_b});
        out.push_back({prefix + ".ffn.w1", st.amg[i].ffn_w1});
        out.push_back({prefix + ".ffn.b1", st.amg[i].ffn_b1});
        out.push_back({prefix + ".ffn.w2", st.amg[i].ffn_w2});
        out.push_back({prefix + ".ffn.b2", st.amg[i].ffn_b2});
        push_affine(out, prefix + ".lin", st.amg[i].lin);
    }
    for (size_t i = 0; i < st.f_v.layers.size(); ++i)
        push_affine(out, "amg.f_v." + std::to_string(i), st.f_v.layers[i]);
    for (size_t i = 0; i < st.ctx.p_t.size(); ++i)
        out.push_back({"mpf.p_t." + std::to_string(i), st.ctx.p_t[i]});
    for (size_t i = 0; i < st.ctx.p_v.size(); ++i)
        out.push_back({"mpf.p_v." + std::to_string(i), st.ctx.p_v[i]});
    push_affine(out, "adapters.va.in", st.adapters.va.in);
    push_affine(out, "adapters.va.out", st.adapters.va.out);
    push_affine(out, "adapters.ta.in", st.adapters.ta.in);
    push_affine(out, "adapters.ta.out", st.adapters.ta.out);
    return out;
}

// ---------------------------------------------------------------------------
// dual-encoder forward

namespace {

struct TextBlocks {
    Tensor p_td;  // [n × d_text]
    Tensor p_ta;  // [m × d_text]
};

Tensor image_prompt_rows(Tape& t, const PromptState& st, const Tensor& p_td,
                         const Tensor& f_x, int layer) {
    Tensor p_c = amg_apply(t, p_td, f_x, amg_at(st, layer), st.cfg.amg_mode);
    return project_vcp(t, p_c, layer, st.f_v);
}

} // namespace

DualEncoderOutput forward_dual_encoder(Tape& t, const FrozenBackbone& bb,
                                       const PromptState& st,
                                       const SyntheticInstance& inst,
                                       const KVCache& cache,
                                       const std::vector<int>& class_ids) {
    if (class_ids.empty()) throw ContractError("forward_dual_encoder: no classes");
    const PromptConfig& pc = st.cfg;
    const int insert = pc.insert_layers;
    const int depth = bb.cfg.depth;
    const int m = pc.ctx_len;
    const int n = pc.cond_len;
    const int big_m = bb.cfg.patches;
    const int l_words = bb.cfg.class_tokens;

    Tensor p_d = pc.mllm_cache ? generate_pd(t, bb, st.query, cache) : st.p_d_fixed;

    // per-layer text blocks are shared by every class row
    std::vector<TextBlocks> text_blocks(static_cast<size_t>(insert));
    for (int i = 0; i < insert; ++i) {
        text_blocks[static_cast<size_t>(i)].p_td = project_scp(t, p_d, i, st.f_t);
        text_blocks[static_cast<size_t>(i)].p_ta =
            fuse_prompts(t, st.ctx.p_t[static_cast<size_t>(i)],
                         text_blocks[static_cast<size_t>(i)].p_td);
    }

    // ---- image branch ----
    Tensor patches = patch_embed(bb, inst);

    auto visual_sequence = [&](const Tensor& patch_rows, int layer) {
        const Tensor& p_td = text_blocks[static_cast<size_t>(layer)].p_td;
        switch (pc.mpf_mode) {
            case MpfMode::add: {
                Tensor p_vc = image_prompt_rows(t, st, p_td, patch_rows, layer);
                Tensor p_va = fuse_prompts(t, st.ctx.p_v[static_cast<size_t>(layer)], p_vc);
                return t.concat_rows({patch_rows, p_va});
            }
            case MpfMode::concat: {
                Tensor p_vc = image_prompt_rows(t, st, p_td, patch_rows, layer);
                return t.concat_rows(
                    {patch_rows, st.ctx.p_v[static_cast<size_t>(layer)], p_vc});
            }
            case MpfMode::both: {
                Tensor p_vc = image_prompt_rows(t, st, p_td, patch_rows, layer);
                Tensor p_va = fuse_prompts(t, st.ctx.p_v[static_cast<size_t>(layer)], p_vc);
                return assemble_visual_sequence(t, patch_rows, p_vc, p_va);
            }
        }
        throw ConfigError("bad mpf mode");
    };

    Tensor h_img = visual_sequence(patches, 0);
    for (int j = 0; j < depth; ++j) {
        h_img = encoder_block_forward(t, bb.image_layers[static_cast<size_t>(j)], h_img);
        if (j + 1 < insert) {
            Tensor f_x = t.slice_rows(h_img, 0, big_m);
            h_img = visual_sequence(f_x, j + 1);
        }
    }
    Tensor f_star = pool_project_image(t, bb, h_img, 0);

    // ---- text branch, one sequence per class ----
    auto text_sequence = [&](int layer, const Tensor& sos, const Tensor& words,
                             const Tensor& eos) {
        const TextBlocks& blk = text_blocks[static_cast<size_t>(layer)];
        switch (pc.mpf_mode) {
            case MpfMode::add:
                return t.concat_rows({sos, blk.p_ta, words, eos});
            case MpfMode::concat:
                return t.concat_rows(
                    {sos, st.ctx.p_t[static_cast<size_t>(layer)], words, blk.p_td, eos});
            case MpfMode::both:
                return assemble_text_sequence(t, sos, blk.p_ta, words, blk.p_td, eos);
        }
        throw ConfigError("bad mpf mode");
    };

    const int pool = text_pool_position(pc.mpf_mode, m, l_words, n);
    DualEncoderOutput out;
    out.t_star.reserve(class_ids.size());
    for (int class_id : class_ids) {
        ClassTextEmbedding cls = embed_class_text(bb, class_id);
        Tensor h = text_sequence(0, cls.sos, cls.words, cls.eos);
        for (int j = 0; j < depth; ++j) {
            h = encoder_block_forward(t, bb.text_layers[static_cast<size_t>(j)], h);
            if (j + 1 < insert) {
                Tensor sos_row = t.slice_rows(h, 0, 1);
                Tensor word_rows = t.slice_rows(h, 1 + m, l_words);
                Tensor eos_row = t.slice_rows(h, pool, 1);
                h = text_sequence(j + 1, sos_row, word_rows, eos_row);
            }
        }
        out.t_star.push_back(pool_project_text(t, bb, h, pool));
    }
    out.f_star = f_star;
    return out;
}

std::vector<double> predict(const Tensor& f_star, const std::vector<Tensor>& t_star,
                            double tau) {
    if (tau <= 0.0) throw ContractError("predict: temperature must be positive");
    if (t_star.empty()) throw ContractError("predict: no class features");
    Tape t(GradMode::none);
    const size_t k = t_star.size();
    std::vector<double> logits(k);
    for (size_t i = 0; i < k; ++i)
        logits[i] = t.cosine(f_star, t_star[i]).item() / tau;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    std::vector<double> probs(k);
    for (size_t i = 0; i < k; ++i) {
        probs[i] = std::exp(logits[i] - mx);
        denom += probs[i];
    }
    for (auto& p : probs) p /= denom;
    return probs;
}

} // namespace cpl
