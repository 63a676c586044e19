#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cpl/scp.hpp"
#include "cpl/trainer.hpp"

using namespace cpl;

namespace {

AttentionWeights decoder_weights(const FrozenBackbone& bb) {
    AttentionWeights w;
    w.wq = bb.dec_wq;
    w.bq = bb.dec_bq;
    w.wk = bb.dec_wk;
    w.bk = bb.dec_bk;
    w.wv = bb.dec_wv;
    w.bv = bb.dec_bv;
    w.wo = bb.dec_wo;
    w.bo = bb.dec_bo;
    w.heads = bb.cfg.heads;
    return w;
}

double max_rel_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max(1.0, std::abs(b.data()[i]));
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]) / denom);
    }
    return m;
}

} // namespace

TEST_CASE("generate_pd: shape and cache equivalence against the joint-sequence oracle") {
    BackboneConfig cfg;
    cfg.d_mllms = 64;
    FrozenBackbone bb = build_backbone(cfg, 16);
    DataConfig dc;
    Dataset ds = make_dataset(dc, cfg, 5);

    Rng rng(900);
    for (int trial = 0; trial < 25; ++trial) {
        const SyntheticInstance& inst =
            ds.eval_base[static_cast<size_t>(trial) % ds.eval_base.size()];
        QueryPrompt q = make_query_prompt(rng.split(static_cast<uint64_t>(trial)), 16, cfg.d_mllms);

        Tape t(GradMode::none);
        KVCache cache = encode_instance_offline(bb, inst);
        Tensor p_d = generate_pd(t, bb, q, cache);
        CHECK(p_d.rows() == 16);
        CHECK(p_d.cols() == 64);

        // no-cache recomputation: keys/values from the whole [Z_x; P_Q] sequence
        Tensor z = instance_representation(bb, inst);
        Tensor joint = t.concat_rows({z, q.p_q});
        Tensor want = t.multi_head_attention(q.p_q, joint, joint, decoder_weights(bb));
        CHECK(max_rel_diff(p_d, want) < 1e-10);
    }
}

TEST_CASE("generate_pd with an empty cache reduces to self-attention over P_Q") {
    BackboneConfig cfg;
    FrozenBackbone bb = build_backbone(cfg, 16);
    Rng rng(901);
    QueryPrompt q = make_query_prompt(rng, 8, cfg.d_mllms);

    Tape t(GradMode::none);
    KVCache empty;  // S = 0, test-only
    empty.seq_len = 0;
    Tensor p_d = generate_pd(t, bb, q, empty);
    Tensor want = t.multi_head_attention(q.p_q, q.p_q, q.p_q, decoder_weights(bb));
    CHECK(max_rel_diff(p_d, want) < 1e-12);
}

TEST_CASE("generate_pd rejects mismatched widths") {
    BackboneConfig cfg;
    FrozenBackbone bb = build_backbone(cfg, 16);
    Rng rng(902);
    QueryPrompt narrow = make_query_prompt(rng, 4, 32);  // decoder width is 64
    KVCache empty;
    Tape t(GradMode::none);
    CHECK_THROWS_AS(generate_pd(t, bb, narrow, empty), ConfigError);
}

TEST_CASE("project_scp: affine at zero, shapes, per-layer distinctness") {
    BackboneConfig cfg;
    Rng rng(903);
    TextBottlenecks fts = make_text_bottlenecks(rng, 3, cfg.d_mllms, cfg.d_text);

    Tape t(GradMode::none);
    Tensor zero = Tensor::zeros({16, cfg.d_mllms});
    Tensor p0 = project_scp(t, zero, 1, fts);
    CHECK(p0.rows() == 16);
    CHECK(p0.cols() == cfg.d_text);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < cfg.d_text; ++c)
            CHECK(p0.at(r, c) == fts.layers[1].b.at(c));

    Tensor p_d = Tensor::randn(rng, {16, cfg.d_mllms}, 1.0);
    Tensor a = project_scp(t, p_d, 0, fts);
    Tensor b = project_scp(t, p_d, 2, fts);
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0);

    CHECK_THROWS_AS(project_scp(t, p_d, 3, fts), ConfigError);
    CHECK_THROWS_AS(project_scp(t, p_d, -1, fts), ConfigError);
}

TEST_CASE("gradient flow: P_Q, L_q, L_o receive gradients; L_k, L_v stay frozen") {
    BackboneConfig cfg;
    cfg.d_mllms = 16;
    cfg.heads = 2;
    cfg.caption_len = 3;
    FrozenBackbone bb = build_backbone(cfg, 8);
    DataConfig dc;
    dc.feature_dim = 8;
    Dataset ds = make_dataset(dc, cfg, 1);

    Rng rng(904);
    QueryPrompt q = make_query_prompt(rng, 4, cfg.d_mllms);
    bb.dec_wq.set_requires_grad(true);
    bb.dec_bq.set_requires_grad(true);
    bb.dec_wo.set_requires_grad(true);
    bb.dec_bo.set_requires_grad(true);

    KVCache cache = encode_instance_offline(bb, ds.train.front());
    Tape t(GradMode::record);
    Tensor loss = t.sum(generate_pd(t, bb, q, cache));
    t.backward(loss);

    auto grad_norm = [](const Tensor& x) {
        if (!x.grad()) return 0.0;
        double n = 0.0;
        for (size_t i = 0; i < x.size(); ++i) n += std::abs(x.grad()[i]);
        return n;
    };
    CHECK(grad_norm(q.p_q) > 0.0);
    CHECK(grad_norm(bb.dec_wq) > 0.0);
    CHECK(grad_norm(bb.dec_wo) > 0.0);
    CHECK(!bb.dec_wk.has_grad());
    CHECK(!bb.dec_wv.has_grad());
}

TEST_CASE("instance sensitivity: distinct caches give distinct P_D") {
    BackboneConfig cfg;
    FrozenBackbone bb = build_backbone(cfg, 16);
    DataConfig dc;
    Dataset ds = make_dataset(dc, cfg, 7);
    Rng rng(905);
    QueryPrompt q = make_query_prompt(rng, 8, cfg.d_mllms);

    Tape t(GradMode::none);
    KVCache c1 = encode_instance_offline(bb, ds.train[0]);
    KVCache c2 = encode_instance_offline(bb, ds.train[1]);
    Tensor p1 = generate_pd(t, bb, q, c1);
    Tensor p2 = generate_pd(t, bb, q, c2);
    CHECK(std::memcmp(p1.data(), p2.data(), p1.size() * sizeof(double)) != 0);
}
