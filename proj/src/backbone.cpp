#include "cpl/backbone.hpp"

#include <cmath>
#include <cstdio>

#include "cpl/kernels.hpp"

namespace cpl {

void BackboneConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw ConfigError(std::string("backbone: ") + name + " must be >= 1");
    };
    positive(d_text, "d_text");
    positive(d_img, "d_img");
    positive(d_mllms, "d_mllms");
    positive(d_embed, "d_embed");
    positive(heads, "heads");
    positive(depth, "depth");
    positive(patches, "patches");
    positive(class_tokens, "class_tokens");
    positive(caption_len, "caption_len");
    positive(max_classes, "max_classes");
    for (auto [w, name] : {std::pair{d_text, "d_text"}, std::pair{d_img, "d_img"},
                           std::pair{d_mllms, "d_mllms"}}) {
        if (w % heads != 0)
            throw ConfigError("backbone: heads=" + std::to_string(heads) +
                              " does not divide " + name + "=" + std::to_string(w));
    }
}

void DataConfig::validate() const {
    if (base_classes < 1) throw ConfigError("data: base_classes must be >= 1");
    if (new_classes < 0) throw ConfigError("data: new_classes must be >= 0");
    if (feature_dim < 1) throw ConfigError("data: feature_dim must be >= 1");
    if (cluster_std < 0.0) throw ConfigError("data: cluster_std must be >= 0");
    if (shots < 1) throw ConfigError("data: shots must be >= 1");
    if (eval_per_class < 1) throw ConfigError("data: eval_per_class must be >= 1");
}

namespace {

Tensor frozen_randn(Rng rng, std::vector<int> shape, double stddev) {
    return Tensor::randn(rng, std::move(shape), stddev, false);
}

// projection matrices: std 1/sqrt(fan_in); embedding-like tables: std 0.02
Tensor proj_init(Rng parent, const char* name, int fan_in, int fan_out) {
    Rng r = parent.split(name);
    return frozen_randn(r, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

EncoderBlock make_block(Rng rng, int width, int heads) {
    EncoderBlock blk;
    blk.attn = make_attention_weights(rng.split("attn"), width, width, width, width, heads,
                                      /*requires_grad=*/false);
    blk.ln1_g = Tensor::full({width}, 1.0);
    blk.ln1_b = Tensor::zeros({width});
    blk.ln2_g = Tensor::full({width}, 1.0);
    blk.ln2_b = Tensor::zeros({width});
    blk.ffn_w1 = proj_init(rng, "ffn_w1", width, 4 * width);
    blk.ffn_b1 = Tensor::zeros({4 * width});
    blk.ffn_w2 = proj_init(rng, "ffn_w2", 4 * width, width);
    blk.ffn_b2 = Tensor::zeros({width});
    return blk;
}

} // namespace

FrozenBackbone build_backbone(const BackboneConfig& cfg, int feature_dim) {
    cfg.validate();
    if (feature_dim < 1) throw ConfigError("backbone: feature_dim must be >= 1");

    FrozenBackbone bb;
    bb.cfg = cfg;
    bb.feature_dim = feature_dim;
    Rng root(cfg.seed);

    Rng tenc = root.split("text_encoder");
    Rng venc = root.split("image_encoder");
    for (int i = 0; i < cfg.depth; ++i) {
        bb.text_layers.push_back(make_block(tenc.split(static_cast<uint64_t>(i)), cfg.d_text, cfg.heads));
        bb.image_layers.push_back(make_block(venc.split(static_cast<uint64_t>(i)), cfg.d_img, cfg.heads));
    }
    bb.text_ln_g = Tensor::full({cfg.d_text}, 1.0);
    bb.text_ln_b = Tensor::zeros({cfg.d_text});
    bb.img_ln_g = Tensor::full({cfg.d_img}, 1.0);
    bb.img_ln_b = Tensor::zeros({cfg.d_img});
    bb.text_proj = proj_init(root, "text_proj", cfg.d_text, cfg.d_embed);
    bb.img_proj = proj_init(root, "img_proj", cfg.d_img, cfg.d_embed);

    bb.vocab_size = 3 + cfg.max_classes * cfg.class_tokens;
    {
        Rng r = root.split("word_table");
        bb.word_table = frozen_randn(r, {bb.vocab_size, cfg.d_text}, 0.02);
    }

    bb.patch_w = proj_init(root, "patch_w", feature_dim, cfg.patches * cfg.d_img);
    {
        Rng r = root.split("patch_b");
        bb.patch_b = frozen_randn(r, {cfg.patches * cfg.d_img}, 0.02);
    }

    const int enc_hidden = 2 * cfg.d_mllms;
    bb.enc_w1 = proj_init(root, "enc_w1", feature_dim, enc_hidden);
    bb.enc_b1 = Tensor::zeros({enc_hidden});
    bb.enc_w2 = proj_init(root, "enc_w2", enc_hidden, cfg.caption_len * cfg.d_mllms);
    bb.enc_b2 = Tensor::zeros({cfg.caption_len * cfg.d_mllms});

    // decoder layer; l_q/l_o become trainable when a training run opts in
    bb.dec_wq = proj_init(root, "dec_wq", cfg.d_mllms, cfg.d_mllms);
    bb.dec_wk = proj_init(root, "dec_wk", cfg.d_mllms, cfg.d_mllms);
    bb.dec_wv = proj_init(root, "dec_wv", cfg.d_mllms, cfg.d_mllms);
    bb.dec_wo = proj_init(root, "dec_wo", cfg.d_mllms, cfg.d_mllms);
    bb.dec_bq = Tensor::zeros({cfg.d_mllms});
    bb.dec_bk = Tensor::zeros({cfg.d_mllms});
    bb.dec_bv = Tensor::zeros({cfg.d_mllms});
    bb.dec_bo = Tensor::zeros({cfg.d_mllms});

    return bb;
}

Tensor instance_representation(const FrozenBackbone& bb, const SyntheticInstance& inst) {
    if (static_cast<int>(inst.features.size()) != bb.feature_dim)
        throw DimError("instance feature dim " + std::to_string(inst.features.size()) +
                       " does not match backbone feature dim " + std::to_string(bb.feature_dim));
    Tape t(GradMode::none);
    Tensor f = Tensor::from({1, bb.feature_dim}, inst.features);
    Tensor h = t.gelu(t.linear(f, bb.enc_w1, bb.enc_b1));
    Tensor z = t.linear(h, bb.enc_w2, bb.enc_b2);
    return t.reshape(z, {bb.cfg.caption_len, bb.cfg.d_mllms});
}

KVCache encode_instance_offline(const FrozenBackbone& bb, const SyntheticInstance& inst) {
    Tape t(GradMode::none);
    Tensor z = instance_representation(bb, inst);
    Tensor k = t.linear(z, bb.dec_wk, bb.dec_bk);
    Tensor v = t.linear(z, bb.dec_wv, bb.dec_bv);
    const int heads = bb.cfg.heads;
    const int dh = bb.cfg.d_mllms / heads;
    KVCache cache;
    cache.seq_len = bb.cfg.caption_len;
    for (int h = 0; h < heads; ++h) {
        cache.k_heads.push_back(t.slice_cols(k, h * dh, dh));
        cache.v_heads.push_back(t.slice_cols(v, h * dh, dh));
    }
    return cache;
}

const KVCache& KVCacheStore::get_or_build(const FrozenBackbone& bb,
                                          const SyntheticInstance& inst) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = store_.find(inst.id);
    if (it != store_.end()) return it->second;
    return store_.emplace(inst.id, encode_instance_offline(bb, inst)).first->second;
}

bool KVCacheStore::contains(int id) const {
    std::lock_guard<std::mutex> lock(mu_);
    return store_.count(id) > 0;
}

size_t KVCacheStore::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return store_.size();
}

void KVCacheStore::clear() {
    std::lock_guard<std::mutex> lock(mu_);
    store_.clear();
}

int x_token_id() { return 2; }

Tensor word_embedding_rows(const FrozenBackbone& bb, const std::vector<int>& token_ids) {
    Tensor out = Tensor::zeros({static_cast<int>(token_ids.size()), bb.cfg.d_text});
    for (size_t i = 0; i < token_ids.size(); ++i) {
        const int id = token_ids[i];
        if (id < 0 || id >= bb.vocab_size)
            throw LookupError("token id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(bb.vocab_size));
        for (int j = 0; j < bb.cfg.d_text; ++j) out.at(static_cast<int>(i), j) = bb.word_table.at(id, j);
    }
    return out;
}

ClassTextEmbedding embed_class_text(const FrozenBackbone& bb, int class_id) {
    if (class_id < 0 || class_id >= bb.cfg.max_classes)
        throw LookupError("class id " + std::to_string(class_id) + " outside table budget of " +
                          std::to_string(bb.cfg.max_classes));
    ClassTextEmbedding e;
    e.sos = word_embedding_rows(bb, {0});
    e.eos = word_embedding_rows(bb, {1});
    std::vector<int> ids(static_cast<size_t>(bb.cfg.class_tokens));
    for (int j = 0; j < bb.cfg.class_tokens; ++j)
        ids[static_cast<size_t>(j)] = 3 + class_id * bb.cfg.class_tokens + j;
    e.words = word_embedding_rows(bb, ids);
    return e;
}

Tensor patch_embed(const FrozenBackbone& bb, const SyntheticInstance& inst) {
    if (static_cast<int>(inst.features.size()) != bb.feature_dim)
        throw DimError("instance feature dim " + std::to_string(inst.features.size()) +
                       " does not match backbone feature dim " + std::to_string(bb.feature_dim));
    Tape t(GradMode::none);
    Tensor f = Tensor::from({1, bb.feature_dim}, inst.features);
    Tensor p = t.linear(f, bb.patch_w, bb.patch_b);
    return t.reshape(p, {bb.cfg.patches, bb.cfg.d_img});
}

Tensor encoder_block_forward(Tape& t, const EncoderBlock& blk, const Tensor& x) {
    Tensor xn = t.layer_norm(x, blk.ln1_g, blk.ln1_b, kLayerNormEps);
    Tensor h = t.add(x, t.multi_head_attention(xn, xn, xn, blk.attn));
    Tensor f = t.linear(t.gelu(t.linear(t.layer_norm(h, blk.ln2_g, blk.ln2_b, kLayerNormEps),
                                        blk.ffn_w1, blk.ffn_b1)),
                        blk.ffn_w2, blk.ffn_b2);
    return t.add(h, f);
}

Tensor pool_project_text(Tape& t, const FrozenBackbone& bb, const Tensor& hidden, int pos) {
    Tensor ln = t.layer_norm(hidden, bb.text_ln_g, bb.text_ln_b, kLayerNormEps);
    Tensor row = t.slice_rows(ln, pos, 1);
    Tensor e = t.matmul(row, bb.text_proj);
    return t.normalize(t.reshape(e, {bb.cfg.d_embed}));
}

Tensor pool_project_image(Tape& t, const FrozenBackbone& bb, const Tensor& hidden, int pos) {
    Tensor ln = t.layer_norm(hidden, bb.img_ln_g, bb.img_ln_b, kLayerNormEps);
    Tensor row = t.slice_rows(ln, pos, 1);
    Tensor e = t.matmul(row, bb.img_proj);
    return t.normalize(t.reshape(e, {bb.cfg.d_embed}));
}

Tensor encode_text_promptless(Tape& t, const FrozenBackbone& bb, const Tensor& rows, int pool_pos) {
    Tensor h = rows;
    for (const auto& blk : bb.text_layers) h = encoder_block_forward(t, blk, h);
    return pool_project_text(t, bb, h, pool_pos);
}

Tensor encode_image_promptless(Tape& t, const FrozenBackbone& bb, const Tensor& rows, int pool_pos) {
    Tensor h = rows;
    for (const auto& blk : bb.image_layers) h = encoder_block_forward(t, blk, h);
    return pool_project_image(t, bb, h, pool_pos);
}

Dataset make_dataset(const DataConfig& dc, const BackboneConfig& bc, uint64_t run_seed) {
    dc.validate();
    const int total = dc.base_classes + dc.new_classes;
    if (total > bc.max_classes)
        throw ConfigError("dataset needs " + std::to_string(total) +
                          " classes but the backbone table budget is " +
                          std::to_string(bc.max_classes));

    Dataset ds;
    for (int k = 0; k < dc.base_classes; ++k) ds.base_class_ids.push_back(k);
    for (int k = 0; k < dc.new_classes; ++k) ds.new_class_ids.push_back(dc.base_classes + k);

    char buf[64];
    for (int k = 0; k < total; ++k) {
        std::snprintf(buf, sizeof(buf), "class_%02d", k);
        ds.class_names.emplace_back(buf);
        std::snprintf(buf, sizeof(buf), "cluster pattern %d in feature space", k);
        ds.class_captions.emplace_back(buf);
    }

    Rng centers_rng = Rng(dc.data_seed).split("centers");
    std::vector<std::vector<double>> centers;
    for (int k = 0; k < total; ++k)
        centers.push_back(centers_rng.split(static_cast<uint64_t>(k))
                              .normal_vec(static_cast<size_t>(dc.feature_dim), 1.0));

    Rng run(run_seed);
    int next_id = 0;
    auto draw = [&](Rng& rng, int class_id) {
        SyntheticInstance inst;
        inst.id = next_id++;
        inst.class_id = class_id;
        inst.features.resize(static_cast<size_t>(dc.feature_dim));
        for (int j = 0; j < dc.feature_dim; ++j)
            inst.features[static_cast<size_t>(j)] =
                centers[static_cast<size_t>(class_id)][static_cast<size_t>(j)] +
                rng.normal(0.0, dc.cluster_std);
        inst.caption_tokens.resize(static_cast<size_t>(bc.caption_len));
        for (int j = 0; j < bc.caption_len; ++j)
            inst.caption_tokens[static_cast<size_t>(j)] = rng.uniform_int(3 + total * bc.class_tokens);
        return inst;
    };

    Rng train_rng = run.split("train");
    for (int k : ds.base_class_ids) {
        Rng r = train_rng.split(static_cast<uint64_t>(k));
        for (int s = 0; s < dc.shots; ++s) ds.train.push_back(draw(r, k));
    }
    Rng eval_rng = run.split("eval_base");
    for (int k : ds.base_class_ids) {
        Rng r = eval_rng.split(static_cast<uint64_t>(k));
        for (int s = 0; s < dc.eval_per_class; ++s) ds.eval_base.push_back(draw(r, k));
    }
    Rng new_rng = run.split("eval_new");
    for (int k : ds.new_class_ids) {
        Rng r = new_rng.split(static_cast<uint64_t>(k));
        for (int s = 0; s < dc.eval_per_class; ++s) ds.eval_new.push_back(draw(r, k));
    }
    return ds;
}

namespace {

void hash_tensor(uint64_t& h, const Tensor& t) {
    h = fnv1a64(t.data(), t.size() * sizeof(double), h);
}

void hash_block(uint64_t& h, const EncoderBlock& blk) {
    for (const Tensor* t : {&blk.attn.wq, &blk.attn.bq, &blk.attn.wk, &blk.attn.bk,
                            &blk.attn.wv, &blk.attn.bv, &blk.attn.wo, &blk.attn.bo,
                            &blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b,
                            &blk.ffn_w1, &blk.ffn_b1, &blk.ffn_w2, &blk.ffn_b2})
        hash_tensor(h, *t);
}

} // namespace

uint64_t frozen_weight_hash(const FrozenBackbone& bb, bool kv_frozen) {
    uint64_t h = 14695981039346656037ull;
    for (const auto& blk : bb.text_layers) hash_block(h, blk);
    for (const auto& blk : bb.image_layers) hash_block(h, blk);
    for (const Tensor* t : {&bb.text_ln_g, &bb.text_ln_b, &bb.img_ln_g, &bb.img_ln_b,
                            &bb.text_proj, &bb.img_proj, &bb.word_table, &bb.patch_w,
                            &bb.patch_b, &bb.enc_w1, &bb.enc_b1, &bb.enc_w2, &bb.enc_b2})
        hash_tensor(h, *t);
    if (kv_frozen)
        for (const Tensor* t : {&bb.dec_wk, &bb.dec_bk, &bb.dec_wv, &bb.dec_bv})
            hash_tensor(h, *t);
    return h;
}

} // namespace cpl
