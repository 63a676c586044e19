#include "cpl/amg.hpp"

#include <cmath>

namespace cpl {

AmgMode parse_amg_mode(std::string_view s) {
    if (s == "linear") return AmgMode::linear_only;
    if (s == "self") return AmgMode::self_only;
    if (s == "cross") return AmgMode::cross_only;
    if (s == "full") return AmgMode::full;
    throw ConfigError("unknown amg_mode '" + std::string(s) +
                      "' (expected linear|self|cross|full)");
}

const char* amg_mode_name(AmgMode m) {
    switch (m) {
        case AmgMode::linear_only: return "linear";
        case AmgMode::self_only: return "self";
        case AmgMode::cross_only: return "cross";
        case AmgMode::full: return "full";
    }
    return "?";
}

AMGWeights make_amg_weights(Rng rng, int d_text, int d_img, int heads) {
    if (d_text % heads != 0)
        throw ConfigError("amg: heads=" + std::to_string(heads) + " does not divide d_text=" +
                          std::to_string(d_text));
    AMGWeights w;
    w.self_attn = make_attention_weights(rng.split("self"), d_text, d_text, d_text, d_text,
                                         heads, /*requires_grad=*/true);
    w.cross_attn = make_attention_weights(rng.split("cross"), d_text, d_img, d_text, d_text,
                                          heads, /*requires_grad=*/true);
    w.ln_in_g = Tensor::full({d_text}, 1.0, true);
    w.ln_in_b = Tensor::zeros({d_text}, true);
    w.ln_ffn_g = Tensor::full({d_text}, 1.0, true);
    w.ln_ffn_b = Tensor::zeros({d_text}, true);
    Rng f1 = rng.split("ffn_w1");
    w.ffn_w1 = Tensor::randn(f1, {d_text, 4 * d_text}, 1.0 / std::sqrt(static_cast<double>(d_text)), true);
    w.ffn_b1 = Tensor::zeros({4 * d_text}, true);
    Rng f2 = rng.split("ffn_w2");
    w.ffn_w2 = Tensor::randn(f2, {4 * d_text, d_text},
                             1.0 / std::sqrt(static_cast<double>(4 * d_text)), true);
    w.ffn_b2 = Tensor::zeros({d_text}, true);
    w.lin = make_affine(rng.split("lin"), d_text, d_text, /*requires_grad=*/true);
    return w;
}

VisualBottlenecks make_visual_bottlenecks(Rng rng, int count, int d_text, int d_img) {
    VisualBottlenecks fvs;
    for (int i = 0; i < count; ++i)
        fvs.layers.push_back(make_affine(rng.split(static_cast<uint64_t>(i)), d_text, d_img,
                                         /*requires_grad=*/true));
    return fvs;
}

namespace {

// image tokens are inputs rather than a residual stream; normalize them
// without learnable scale/shift
Tensor plain_ln(Tape& t, const Tensor& x) {
    Tensor g = Tensor::full({x.cols()}, 1.0);
    Tensor b = Tensor::zeros({x.cols()});
    return t.layer_norm(x, g, b, kLayerNormEps);
}

Tensor gated_output(Tape& t, const Tensor& gate, const AMGWeights& w) {
    Tensor ffn_in = t.layer_norm(gate, w.ln_ffn_g, w.ln_ffn_b, kLayerNormEps);
    Tensor ffn = t.linear(t.gelu(t.linear(ffn_in, w.ffn_w1, w.ffn_b1)), w.ffn_w2, w.ffn_b2);
    return t.add(gate, ffn);
}

} // namespace

Tensor amg_forward(Tape& t, const Tensor& p_td, const Tensor& f_x, const AMGWeights& w) {
    return amg_apply(t, p_td, f_x, w, AmgMode::full);
}

Tensor amg_apply(Tape& t, const Tensor& p_td, const Tensor& f_x, const AMGWeights& w,
                 AmgMode mode) {
    if (mode == AmgMode::linear_only) return t.linear(p_td, w.lin.w, w.lin.b);

    if (mode != AmgMode::self_only) {
        if (!f_x.defined() || f_x.rows() < 1)
            throw ContractError("amg: cross attention needs a nonempty image token sequence");
        if (f_x.cols() != w.cross_attn.wk.rows())
            throw DimError("amg: image token width " + std::to_string(f_x.cols()) +
                           " does not match cross-attention weights " +
                           std::to_string(w.cross_attn.wk.rows()));
    }

    Tensor p_norm = t.layer_norm(p_td, w.ln_in_g, w.ln_in_b, kLayerNormEps);

    Tensor gate;
    switch (mode) {
        case AmgMode::self_only:
            gate = t.add(p_td, t.multi_head_attention(p_norm, p_norm, p_norm, w.self_attn));
            break;
        case AmgMode::cross_only: {
            Tensor fx_norm = plain_ln(t, f_x);
            gate = t.add(p_td, t.multi_head_attention(p_norm, fx_norm, fx_norm, w.cross_attn));
            break;
        }
        case AmgMode::full: {
            Tensor fx_norm = plain_ln(t, f_x);
            Tensor p_cross =
                t.add(p_td, t.multi_head_attention(p_norm, fx_norm, fx_norm, w.cross_attn));
            Tensor p_self =
                t.add(p_td, t.multi_head_attention(p_norm, p_norm, p_norm, w.self_attn));
            gate = t.mul(p_cross, p_self);
            break;
        }
        case AmgMode::linear_only:
            break;  // handled above
    }
    return gated_output(t, gate, w);
}

Tensor project_vcp(Tape& t, const Tensor& p_c, int layer, const VisualBottlenecks& fvs) {
    if (layer < 0 || layer >= static_cast<int>(fvs.layers.size()))
        throw ConfigError("project_vcp: layer " + std::to_string(layer) +
                          " has no bottleneck (have " + std::to_string(fvs.layers.size()) + ")");
    const AffineMap& m = fvs.layers[static_cast<size_t>(layer)];
    return t.linear(p_c, m.w, m.b);
}

} // namespace cpl
