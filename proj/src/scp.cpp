#include "cpl/scp.hpp"

#include <cmath>

namespace cpl {

QueryPrompt make_query_prompt(Rng rng, int n, int d_mllms) {
    if (n < 1) throw ConfigError("query prompt length must be >= 1");
    Rng r = rng.split("p_q");
    QueryPrompt q;
    q.p_q = Tensor::randn(r, {n, d_mllms}, 0.02, /*requires_grad=*/true);
    return q;
}

AffineMap make_affine(Rng rng, int d_in, int d_out, bool requires_grad) {
    AffineMap m;
    Rng r = rng.split("w");
    m.w = Tensor::randn(r, {d_in, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in)),
                        requires_grad);
    m.b = Tensor::zeros({d_out}, requires_grad);
    return m;
}

TextBottlenecks make_text_bottlenecks(Rng rng, int count, int d_mllms, int d_text) {
    TextBottlenecks fts;
    for (int i = 0; i < count; ++i)
        fts.layers.push_back(make_affine(rng.split(static_cast<uint64_t>(i)), d_mllms, d_text,
                                         /*requires_grad=*/true));
    return fts;
}

Tensor generate_pd(Tape& t, const FrozenBackbone& bb, const QueryPrompt& q,
                   const KVCache& cache) {
    const int d = bb.cfg.d_mllms;
    const int heads = bb.cfg.heads;
    const int dh = d / heads;
    if (q.p_q.cols() != d)
        throw ConfigError("query prompt width " + std::to_string(q.p_q.cols()) +
                          " does not match decoder width " + std::to_string(d));
    if (cache.seq_len > 0 && (cache.heads() != heads || cache.head_dim() != dh))
        throw ConfigError("cache heads/head_dim " + std::to_string(cache.heads()) + "/" +
                          std::to_string(cache.head_dim()) + " do not match decoder " +
                          std::to_string(heads) + "/" + std::to_string(dh));

    Tensor qry = t.linear(q.p_q, bb.dec_wq, bb.dec_bq);
    Tensor key = t.linear(q.p_q, bb.dec_wk, bb.dec_bk);
    Tensor val = t.linear(q.p_q, bb.dec_wv, bb.dec_bv);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = t.slice_cols(qry, h * dh, dh);
        Tensor kh = t.slice_cols(key, h * dh, dh);
        Tensor vh = t.slice_cols(val, h * dh, dh);
        if (cache.seq_len > 0) {
            kh = t.concat_rows({cache.k_heads[static_cast<size_t>(h)], kh});
            vh = t.concat_rows({cache.v_heads[static_cast<size_t>(h)], vh});
        }
        Tensor attn = t.softmax(t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt_dh), -1);
        head_outs.push_back(t.matmul(attn, vh));
    }
    Tensor merged = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
    return t.linear(merged, bb.dec_wo, bb.dec_bo);
}

Tensor project_scp(Tape& t, const Tensor& p_d, int layer, const TextBottlenecks& fts) {
    if (layer < 0 || layer >= static_cast<int>(fts.layers.size()))
        throw ConfigError("project_scp: layer " + std::to_string(layer) +
                          " has no bottleneck (have " + std::to_string(fts.layers.size()) + ")");
    const AffineMap& m = fts.layers[static_cast<size_t>(layer)];
    return t.linear(p_d, m.w, m.b);
}

} // namespace cpl
