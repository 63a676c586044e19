#include <doctest.h>

#include <cmath>
#include <cstring>
#include <thread>
#include <vector>

#include "cpl/prompt_state.hpp"
#include "cpl/trainer.hpp"

using namespace cpl;

namespace {

bool same_bytes(const Tensor& a, const Tensor& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("fuse_prompts: anchors and the naive double-loop oracle") {
    Rng rng(700);
    Tape t(GradMode::none);

    // all conditional rows equal v -> every fused row is ctx + v
    Tensor ctx = Tensor::randn(rng, {4, 6}, 1.0);
    Tensor v = Tensor::randn(rng, {1, 6}, 1.0);
    std::vector<double> rows;
    for (int r = 0; r < 5; ++r)
        rows.insert(rows.end(), v.data(), v.data() + 6);
    Tensor cond_const = Tensor::from({5, 6}, rows);
    Tensor fused = fuse_prompts(t, ctx, cond_const);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j)
            CHECK(fused.at(i, j) == doctest::Approx(ctx.at(i, j) + v.at(0, j)).epsilon(1e-12));

    // n = 1 collapses to adding the single row
    Tensor single = Tensor::randn(rng, {1, 6}, 1.0);
    Tensor fused1 = fuse_prompts(t, ctx, single);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j)
            CHECK(fused1.at(i, j) == doctest::Approx(ctx.at(i, j) + single.at(0, j)).epsilon(1e-12));

    // the broadcast/sum/average double loop
    for (int trial = 0; trial < 100; ++trial) {
        const int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8), d = 1 + rng.uniform_int(6);
        Tensor pc = Tensor::randn(rng, {m, d}, 1.0);
        Tensor pd = Tensor::randn(rng, {n, d}, 1.0);
        Tensor got = fuse_prompts(t, pc, pd);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) {
                double acc = 0.0;
                for (int k = 0; k < n; ++k) acc += pc.at(i, j) + pd.at(k, j);
                acc /= n;
                CHECK(std::abs(got.at(i, j) - acc) < 1e-12);
            }
    }

    CHECK_THROWS_AS(fuse_prompts(t, ctx, Tensor::zeros({2, 5})), DimError);
}

TEST_CASE("fuse_prompts is linear in the conditional part") {
    Rng rng(701);
    Tape t(GradMode::none);
    for (int trial = 0; trial < 30; ++trial) {
        const double alpha = rng.normal(0.0, 2.0);
        Tensor pc = Tensor::randn(rng, {3, 5}, 1.0);
        Tensor pd = Tensor::randn(rng, {4, 5}, 1.0);
        Tensor lhs = t.sub(fuse_prompts(t, pc, t.scale(pd, alpha)), pc);
        Tensor rhs = t.scale(t.sub(fuse_prompts(t, pc, pd), pc), alpha);
        for (size_t i = 0; i < lhs.size(); ++i) {
            const double denom = std::max(1.0, std::abs(rhs.data()[i]));
            CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) / denom < 1e-10);
        }
    }
}

TEST_CASE("sequence assembly: lengths and bit-exact round trips") {
    Rng rng(702);
    Tape t(GradMode::none);
    const int m = 4, l_words = 3, n = 16, d = 8;
    Tensor sos = Tensor::randn(rng, {1, d}, 1.0);
    Tensor p_ta = Tensor::randn(rng, {m, d}, 1.0);
    Tensor words = Tensor::randn(rng, {l_words, d}, 1.0);
    Tensor p_td = Tensor::randn(rng, {n, d}, 1.0);
    Tensor eos = Tensor::randn(rng, {1, d}, 1.0);

    Tensor w = assemble_text_sequence(t, sos, p_ta, words, p_td, eos);
    CHECK(w.rows() == 1 + m + l_words + n + 1);  // 25 at defaults
    CHECK(w.rows() == 25);
    CHECK(same_bytes(t.slice_rows(w, 0, 1), sos));
    CHECK(same_bytes(t.slice_rows(w, 1, m), p_ta));
    CHECK(same_bytes(t.slice_rows(w, 1 + m, l_words), words));
    CHECK(same_bytes(t.slice_rows(w, 1 + m + l_words, n), p_td));
    CHECK(same_bytes(t.slice_rows(w, 1 + m + l_words + n, 1), eos));

    const int big_m = 9, d_img = 6;
    Tensor patches = Tensor::randn(rng, {big_m, d_img}, 1.0);
    Tensor p_vc = Tensor::randn(rng, {n, d_img}, 1.0);
    Tensor p_va = Tensor::randn(rng, {m, d_img}, 1.0);
    Tensor e = assemble_visual_sequence(t, patches, p_vc, p_va);
    CHECK(e.rows() == big_m + n + m);  // 29 at defaults
    CHECK(same_bytes(t.slice_rows(e, 0, big_m), patches));
    CHECK(same_bytes(t.slice_rows(e, big_m, n), p_vc));
    CHECK(same_bytes(t.slice_rows(e, big_m + n, m), p_va));

    CHECK_THROWS_AS(assemble_text_sequence(t, sos, p_ta, Tensor::zeros({2, d + 1}), p_td, eos),
                    DimError);
}

TEST_CASE("mpf mode sequence lengths match the documented table") {
    const int m = 4, l_words = 3, n = 16, big_m = 9;
    CHECK(text_sequence_length(MpfMode::add, m, l_words, n) == 1 + m + l_words + 1);
    CHECK(text_sequence_length(MpfMode::concat, m, l_words, n) == 1 + m + l_words + n + 1);
    CHECK(text_sequence_length(MpfMode::both, m, l_words, n) == 1 + m + l_words + n + 1);
    CHECK(visual_sequence_length(MpfMode::add, m, big_m, n) == big_m + m);
    CHECK(visual_sequence_length(MpfMode::concat, m, big_m, n) == big_m + m + n);
    CHECK(visual_sequence_length(MpfMode::both, m, big_m, n) == big_m + n + m);
}

TEST_CASE("forward_dual_encoder: determinism and class-count contract") {
    BackboneConfig bc;
    bc.d_text = 8;
    bc.d_img = 8;
    bc.d_mllms = 8;
    bc.d_embed = 8;
    bc.heads = 2;
    bc.depth = 2;
    bc.patches = 3;
    bc.class_tokens = 2;
    bc.caption_len = 2;
    FrozenBackbone bb = build_backbone(bc, 4);
    DataConfig dc;
    dc.base_classes = 3;
    dc.new_classes = 1;
    dc.feature_dim = 4;
    Dataset ds = make_dataset(dc, bc, 1);

    PromptConfig pc;
    pc.cond_len = 2;
    pc.ctx_len = 2;
    pc.insert_layers = 2;
    PromptState st = make_prompt_state(bb, pc, 3);
    KVCache cache = encode_instance_offline(bb, ds.train.front());

    Tape t1(GradMode::none), t2(GradMode::none);
    DualEncoderOutput a =
        forward_dual_encoder(t1, bb, st, ds.train.front(), cache, ds.base_class_ids);
    DualEncoderOutput b =
        forward_dual_encoder(t2, bb, st, ds.train.front(), cache, ds.base_class_ids);
    REQUIRE(a.t_star.size() == 3);
    CHECK(same_bytes(a.f_star, b.f_star));
    for (size_t k = 0; k < a.t_star.size(); ++k) CHECK(same_bytes(a.t_star[k], b.t_star[k]));

    // K = 1
    std::vector<int> one = {ds.base_class_ids[0]};
    Tape t3(GradMode::none);
    DualEncoderOutput c = forward_dual_encoder(t3, bb, st, ds.train.front(), cache, one);
    CHECK(c.t_star.size() == 1);
    CHECK(same_bytes(c.t_star[0], a.t_star[0]));  // per-class text path is independent

    // permuting the class order permutes the text features identically
    std::vector<int> reversed(ds.base_class_ids.rbegin(), ds.base_class_ids.rend());
    Tape t4(GradMode::none);
    DualEncoderOutput r =
        forward_dual_encoder(t4, bb, st, ds.train.front(), cache, reversed);
    CHECK(same_bytes(r.f_star, a.f_star));
    for (size_t k = 0; k < reversed.size(); ++k)
        CHECK(same_bytes(r.t_star[k], a.t_star[a.t_star.size() - 1 - k]));

    CHECK_THROWS_AS(forward_dual_encoder(t3, bb, st, ds.train.front(), cache, {}),
                    ContractError);
}

// ---------------------------------------------------------------------------
// hand-sized straight-line recomputation of the whole prompted forward

namespace {

using Vec = std::vector<double>;

Vec affine_plain(const Vec& x, int r, int c, const Tensor& w, const Tensor& b) {
    const int o = w.cols();
    Vec out(static_cast<size_t>(r) * o);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < o; ++j) {
            double acc = b.defined() ? b.at(j) : 0.0;
            for (int k = 0; k < c; ++k) acc += x[static_cast<size_t>(i) * c + k] * w.at(k, j);
            out[static_cast<size_t>(i) * o + j] = acc;
        }
    return out;
}

Vec matmul_plain(const Vec& x, int r, int c, const Tensor& w) {
    return affine_plain(x, r, c, w, Tensor());
}

Vec ln_plain(const Vec& x, int r, int c, const double* g, const double* b) {
    Vec out(x.size());
    for (int i = 0; i < r; ++i) {
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += x[static_cast<size_t>(i) * c + j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = x[static_cast<size_t>(i) * c + j] - mean;
            var += d * d;
        }
        var /= c;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] =
                (x[static_cast<size_t>(i) * c + j] - mean) * inv * (g ? g[j] : 1.0) +
                (b ? b[j] : 0.0);
    }
    return out;
}

double gelu_plain(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// single-head attention over full projected sequences
Vec attention1_plain(const Vec& q_in, int a, int d_q, const Vec& k_in, const Vec& v_in, int b,
                     int d_kv, const AttentionWeights& w) {
    REQUIRE(w.heads == 1);
    const int p = w.wq.cols();
    Vec q = affine_plain(q_in, a, d_q, w.wq, w.bq);
    Vec k = affine_plain(k_in, b, d_kv, w.wk, w.bk);
    Vec v = affine_plain(v_in, b, d_kv, w.wv, w.bv);
    Vec mix(static_cast<size_t>(a) * p, 0.0);
    for (int i = 0; i < a; ++i) {
        Vec logits(static_cast<size_t>(b));
        double mx = -1e300;
        for (int j = 0; j < b; ++j) {
            double acc = 0.0;
            for (int cix = 0; cix < p; ++cix)
                acc += q[static_cast<size_t>(i) * p + cix] * k[static_cast<size_t>(j) * p + cix];
            logits[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(p));
            mx = std::max(mx, logits[static_cast<size_t>(j)]);
        }
        double denom = 0.0;
        for (int j = 0; j < b; ++j) {
            logits[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
            denom += logits[static_cast<size_t>(j)];
        }
        for (int j = 0; j < b; ++j)
            for (int cix = 0; cix < p; ++cix)
                mix[static_cast<size_t>(i) * p + cix] += logits[static_cast<size_t>(j)] / denom *
                                                         v[static_cast<size_t>(j) * p + cix];
    }
    return affine_plain(mix, a, p, w.wo, w.bo);
}

Vec encoder_block_plain(const Vec& x, int rows, int d, const EncoderBlock& blk) {
    Vec xn = ln_plain(x, rows, d, blk.ln1_g.data(), blk.ln1_b.data());
    Vec att = attention1_plain(xn, rows, d, xn, xn, rows, d, blk.attn);
    Vec h(x.size());
    for (size_t i = 0; i < x.size(); ++i) h[i] = x[i] + att[i];
    Vec hn = ln_plain(h, rows, d, blk.ln2_g.data(), blk.ln2_b.data());
    Vec f1 = affine_plain(hn, rows, d, blk.ffn_w1, blk.ffn_b1);
    for (auto& v : f1) v = gelu_plain(v);
    Vec f2 = affine_plain(f1, rows, 4 * d, blk.ffn_w2, blk.ffn_b2);
    for (size_t i = 0; i < h.size(); ++i) f2[i] += h[i];
    return f2;
}

Vec pool_norm_plain(const Vec& h, int rows, int d, int pos, const Tensor& ln_g,
                    const Tensor& ln_b, const Tensor& proj) {
    Vec hn = ln_plain(h, rows, d, ln_g.data(), ln_b.data());
    Vec row(hn.begin() + static_cast<size_t>(pos) * d, hn.begin() + static_cast<size_t>(pos + 1) * d);
    Vec e = matmul_plain(row, 1, d, proj);
    double n2 = 0.0;
    for (double v : e) n2 += v * v;
    const double inv = 1.0 / std::sqrt(n2);
    for (auto& v : e) v *= inv;
    return e;
}

} // namespace

TEST_CASE("depth-1 hand-sized forward matches an independent straight-line recomputation") {
    BackboneConfig bc;
    bc.d_text = 4;
    bc.d_img = 4;
    bc.d_mllms = 4;
    bc.d_embed = 4;
    bc.heads = 1;
    bc.depth = 1;
    bc.patches = 2;
    bc.class_tokens = 2;
    bc.caption_len = 2;
    bc.max_classes = 4;
    bc.seed = 5;
    FrozenBackbone bb = build_backbone(bc, 3);

    DataConfig dc;
    dc.base_classes = 2;
    dc.new_classes = 1;
    dc.feature_dim = 3;
    dc.shots = 1;
    dc.eval_per_class = 1;
    Dataset ds = make_dataset(dc, bc, 9);
    const SyntheticInstance& inst = ds.train.front();

    PromptConfig pc;
    pc.cond_len = 1;
    pc.ctx_len = 1;
    pc.insert_layers = 1;
    PromptState st = make_prompt_state(bb, pc, 9);

    KVCache cache = encode_instance_offline(bb, inst);
    Tape tape(GradMode::none);
    DualEncoderOutput got =
        forward_dual_encoder(tape, bb, st, inst, cache, ds.base_class_ids);

    const int d = 4, S = 2, M = 2, L = 2;

    // instance representation and decoder pass
    Vec feat(inst.features.begin(), inst.features.end());
    Vec hid = affine_plain(feat, 1, 3, bb.enc_w1, bb.enc_b1);
    for (auto& v : hid) v = gelu_plain(v);
    Vec z = affine_plain(hid, 1, 2 * d, bb.enc_w2, bb.enc_b2);  // 1×(S*d) == S×d

    Vec pq(st.query.p_q.data(), st.query.p_q.data() + d);
    Vec q = affine_plain(pq, 1, d, bb.dec_wq, bb.dec_bq);
    Vec k_cache = affine_plain(z, S, d, bb.dec_wk, bb.dec_bk);
    Vec v_cache = affine_plain(z, S, d, bb.dec_wv, bb.dec_bv);
    Vec k_self = affine_plain(pq, 1, d, bb.dec_wk, bb.dec_bk);
    Vec v_self = affine_plain(pq, 1, d, bb.dec_wv, bb.dec_bv);
    Vec k_all = k_cache;
    k_all.insert(k_all.end(), k_self.begin(), k_self.end());
    Vec v_all = v_cache;
    v_all.insert(v_all.end(), v_self.begin(), v_self.end());

    Vec logits(S + 1);
    double mx = -1e300;
    for (int j = 0; j < S + 1; ++j) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += q[c] * k_all[static_cast<size_t>(j) * d + c];
        logits[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, logits[static_cast<size_t>(j)]);
    }
    double denom = 0.0;
    for (auto& lv : logits) {
        lv = std::exp(lv - mx);
        denom += lv;
    }
    Vec mixed(d, 0.0);
    for (int j = 0; j < S + 1; ++j)
        for (int c = 0; c < d; ++c)
            mixed[static_cast<size_t>(c)] +=
                logits[static_cast<size_t>(j)] / denom * v_all[static_cast<size_t>(j) * d + c];
    Vec p_d = affine_plain(mixed, 1, d, bb.dec_wo, bb.dec_bo);

    // SCP / fused text prompt
    Vec p_td = affine_plain(p_d, 1, d, st.f_t.layers[0].w, st.f_t.layers[0].b);
    Vec p_t0(st.ctx.p_t[0].data(), st.ctx.p_t[0].data() + d);
    Vec p_ta(d);
    for (int j = 0; j < d; ++j) p_ta[j] = p_t0[j] + p_td[j];  // n = m = 1

    // patches and AMG
    Vec patches = affine_plain(feat, 1, 3, bb.patch_w, bb.patch_b);  // M×d flattened
    const AMGWeights& aw = st.amg[0];
    Vec pn = ln_plain(p_td, 1, d, aw.ln_in_g.data(), aw.ln_in_b.data());
    Vec fxn = ln_plain(patches, M, d, nullptr, nullptr);
    Vec cross = attention1_plain(pn, 1, d, fxn, fxn, M, d, aw.cross_attn);
    Vec self = attention1_plain(pn, 1, d, pn, pn, 1, d, aw.self_attn);
    Vec gate(d);
    for (int j = 0; j < d; ++j) gate[j] = (p_td[j] + cross[j]) * (p_td[j] + self[j]);
    Vec gn = ln_plain(gate, 1, d, aw.ln_ffn_g.data(), aw.ln_ffn_b.data());
    Vec f1 = affine_plain(gn, 1, d, aw.ffn_w1, aw.ffn_b1);
    for (auto& v : f1) v = gelu_plain(v);
    Vec f2 = affine_plain(f1, 1, 4 * d, aw.ffn_w2, aw.ffn_b2);
    Vec p_c(d);
    for (int j = 0; j < d; ++j) p_c[j] = gate[j] + f2[j];
    Vec p_vc = affine_plain(p_c, 1, d, st.f_v.layers[0].w, st.f_v.layers[0].b);
    Vec p_v0(st.ctx.p_v[0].data(), st.ctx.p_v[0].data() + d);
    Vec p_va(d);
    for (int j = 0; j < d; ++j) p_va[j] = p_v0[j] + p_vc[j];

    // image sequence [patches; P_VC; P_VA], one block, pool at patch 0
    Vec e_seq = patches;
    e_seq.insert(e_seq.end(), p_vc.begin(), p_vc.end());
    e_seq.insert(e_seq.end(), p_va.begin(), p_va.end());
    Vec h_img = encoder_block_plain(e_seq, M + 2, d, bb.image_layers[0]);
    Vec f_star = pool_norm_plain(h_img, M + 2, d, 0, bb.img_ln_g, bb.img_ln_b, bb.img_proj);
    for (int j = 0; j < d; ++j)
        CHECK(got.f_star.at(j) == doctest::Approx(f_star[static_cast<size_t>(j)]).epsilon(1e-9));

    // text sequences per class, pool at the EOS row
    for (size_t kx = 0; kx < ds.base_class_ids.size(); ++kx) {
        ClassTextEmbedding cls = embed_class_text(bb, ds.base_class_ids[kx]);
        Vec w_seq(cls.sos.data(), cls.sos.data() + d);
        w_seq.insert(w_seq.end(), p_ta.begin(), p_ta.end());
        w_seq.insert(w_seq.end(), cls.words.data(), cls.words.data() + L * d);
        w_seq.insert(w_seq.end(), p_td.begin(), p_td.end());
        w_seq.insert(w_seq.end(), cls.eos.data(), cls.eos.data() + d);
        const int rows = 1 + 1 + L + 1 + 1;
        Vec h_txt = encoder_block_plain(w_seq, rows, d, bb.text_layers[0]);
        Vec t_star =
            pool_norm_plain(h_txt, rows, d, rows - 1, bb.text_ln_g, bb.text_ln_b, bb.text_proj);
        for (int j = 0; j < d; ++j)
            CHECK(got.t_star[kx].at(j) ==
                  doctest::Approx(t_star[static_cast<size_t>(j)]).epsilon(1e-9));
    }
}

TEST_CASE("concurrent forward evaluations match the serial pass bit-exactly") {
    BackboneConfig bc;
    bc.d_text = 8;
    bc.d_img = 8;
    bc.d_mllms = 8;
    bc.d_embed = 8;
    bc.heads = 2;
    bc.depth = 2;
    bc.patches = 3;
    bc.class_tokens = 2;
    bc.caption_len = 2;
    FrozenBackbone bb = build_backbone(bc, 4);
    DataConfig dc;
    dc.base_classes = 3;
    dc.new_classes = 1;
    dc.feature_dim = 4;
    dc.eval_per_class = 4;
    Dataset ds = make_dataset(dc, bc, 2);
    PromptConfig pc;
    pc.cond_len = 2;
    pc.ctx_len = 2;
    pc.insert_layers = 2;
    PromptState st = make_prompt_state(bb, pc, 2);

    KVCacheStore caches;
    for (const auto& inst : ds.eval_base) caches.get_or_build(bb, inst);

    auto score_all = [&] {
        std::vector<std::vector<double>> scores;
        for (const auto& inst : ds.eval_base) {
            Tape t(GradMode::none);
            DualEncoderOutput out =
                forward_dual_encoder(t, bb, st, inst, caches.get_or_build(bb, inst),
                                     ds.base_class_ids);
            scores.push_back(instance_scores(t, st, out));
        }
        return scores;
    };
    const auto serial = score_all();

    std::vector<std::vector<std::vector<double>>> per_thread(4);
    std::vector<std::thread> threads;
    for (int w = 0; w < 4; ++w)
        threads.emplace_back([&, w] { per_thread[static_cast<size_t>(w)] = score_all(); });
    for (auto& th : threads) th.join();

    for (const auto& got : per_thread) {
        REQUIRE(got.size() == serial.size());
        for (size_t i = 0; i < got.size(); ++i)
            for (size_t k = 0; k < got[i].size(); ++k)
                CHECK(std::memcmp(&got[i][k], &serial[i][k], sizeof(double)) == 0);
    }
}

TEST_CASE("predict: anchors, normalization, tau invariance, permutation equivariance") {
    Rng rng(703);
    const int d = 8;

    // K = 1
    Tensor f = Tensor::randn(rng, {d}, 1.0);
    std::vector<Tensor> one = {Tensor::randn(rng, {d}, 1.0)};
    auto p1 = predict(f, one, 0.01);
    REQUIRE(p1.size() == 1);
    CHECK(p1[0] == doctest::Approx(1.0).epsilon(1e-12));

    // identical class features -> uniform
    Tensor shared_row = Tensor::randn(rng, {d}, 1.0);
    std::vector<Tensor> same = {shared_row, shared_row.clone(), shared_row.clone()};
    auto pu = predict(f, same, 0.1);
    for (double p : pu) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-9));

    // cosines {0.2, 0.4} at tau 0.1: probabilities {1/(1+e^2), e^2/(1+e^2)}
    Tensor ex = Tensor::from({2}, {1, 0});
    Tensor ey = Tensor::from({2}, {0, 1});
    Tape tt(GradMode::none);
    auto unit_with_cos = [&](double c) {
        // vector at angle acos(c) from ex in the xy-plane
        return Tensor::from({2}, {c, std::sqrt(1 - c * c)});
    };
    std::vector<Tensor> ts = {unit_with_cos(0.2), unit_with_cos(0.4)};
    auto probs = predict(ex, ts, 0.1);
    const double e2 = std::exp(2.0);
    CHECK(probs[0] == doctest::Approx(1.0 / (1.0 + e2)).epsilon(1e-9));
    CHECK(probs[1] == doctest::Approx(e2 / (1.0 + e2)).epsilon(1e-9));
    CHECK(probs[0] == doctest::Approx(0.1192).epsilon(1e-3));
    CHECK(probs[1] == doctest::Approx(0.8808).epsilon(1e-3));

    // normalization, open interval at a representable tau, tau-invariant
    // argmax (down to the saturating tau=0.01), permutation equivariance
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 2 + rng.uniform_int(5);
        Tensor fs = Tensor::randn(rng, {d}, 1.0);
        std::vector<Tensor> cls;
        for (int i = 0; i < k; ++i) cls.push_back(Tensor::randn(rng, {d}, 1.0));
        auto pa = predict(fs, cls, 0.5);
        double sum = 0.0;
        for (double p : pa) {
            CHECK(p > 0.0);
            CHECK(p < 1.0);
            sum += p;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);

        const size_t arg_a = std::max_element(pa.begin(), pa.end()) - pa.begin();
        for (double tau : {0.01, 0.1, 3.7}) {
            auto pb = predict(fs, cls, tau);
            double sb = 0.0;
            for (double p : pb) {
                CHECK(p >= 0.0);
                CHECK(p <= 1.0);
                sb += p;
            }
            CHECK(std::abs(sb - 1.0) < 1e-6);
            const size_t arg_b = std::max_element(pb.begin(), pb.end()) - pb.begin();
            CHECK(arg_a == arg_b);
        }

        std::vector<Tensor> rev(cls.rbegin(), cls.rend());
        auto pr = predict(fs, rev, 0.5);
        for (int i = 0; i < k; ++i)
            CHECK(pr[static_cast<size_t>(i)] ==
                  doctest::Approx(pa[static_cast<size_t>(k - 1 - i)]).epsilon(1e-12));
    }

    CHECK_THROWS_AS(predict(f, one, 0.0), ContractError);
    CHECK_THROWS_AS(predict(Tensor::zeros({d}), one, 0.1), ContractError);
}
