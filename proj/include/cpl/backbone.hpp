#pragma once

#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "cpl/tensor.hpp"

namespace cpl {

inline constexpr double kLayerNormEps = 1e-5;

struct BackboneConfig {
    int d_text = 32;       // text encoder width
    int d_img = 48;        // image encoder width
    int d_mllms = 64;      // decoder width
    int d_embed = 32;      // joint embedding width after output projections
    int heads = 4;
    int depth = 4;         // encoder layers (configurable up to 12)
    int patches = 9;       // M
    int class_tokens = 3;  // L, tokens per class name
    int caption_len = 7;   // S, tokens of the instance representation Z_x
    int max_classes = 64;  // embedding-table budget for class-name tokens
    uint64_t seed = 7;

    void validate() const;
};

struct DataConfig {
    int base_classes = 8;
    int new_classes = 4;
    int feature_dim = 16;
    double cluster_std = 0.3;
    int shots = 4;
    int eval_per_class = 20;
    uint64_t data_seed = 123;
    std::string domain_name = "synthetic clusters";

    void validate() const;
};

// Pre-LN transformer block shared by both encoders.
struct EncoderBlock {
    AttentionWeights attn;
    Tensor ln1_g, ln1_b;
    Tensor ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1;  // d -> 4d
    Tensor ffn_w2, ffn_b2;  // 4d -> d
};

struct SyntheticInstance {
    int id = 0;
    int class_id = 0;
    std::vector<double> features;
    std::vector<int> caption_tokens;  // length S, mock caption ids
};

// Frozen per-instance key/value states from the mock decoder layer. Built
// once, immutable afterwards. seq_len of zero (tests only) means no cached
// positions exist.
struct KVCache {
    std::vector<Tensor> k_heads;  // each [S × d_head]
    std::vector<Tensor> v_heads;
    int seq_len = 0;

    int heads() const { return static_cast<int>(k_heads.size()); }
    int head_dim() const { return k_heads.empty() ? 0 : k_heads[0].cols(); }
};

// Seeded, immutable mock of the VLM dual encoders plus the MLLM final
// decoder layer. Everything is generated from config.seed; two constructions
// with the same config are bit-identical. The only members an optimizer may
// touch are dec_wq/dec_bq/dec_wo/dec_bo (the designated trainable subset).
struct FrozenBackbone {
    BackboneConfig cfg;

    std::vector<EncoderBlock> text_layers;
    std::vector<EncoderBlock> image_layers;
    Tensor text_ln_g, text_ln_b;  // final LN before pooling
    Tensor img_ln_g, img_ln_b;
    Tensor text_proj;  // [d_text × d_embed]
    Tensor img_proj;   // [d_img × d_embed]

    // word table rows: 0=SOS, 1=EOS, 2="X", then class k token j at
    // 3 + k*class_tokens + j
    Tensor word_table;
    int vocab_size = 0;

    Tensor patch_w, patch_b;  // feature_dim -> patches*d_img

    // mock instance encoder (stands in for Q-former(ViT(.)))
    Tensor enc_w1, enc_b1;
    Tensor enc_w2, enc_b2;

    // mock MLLM final decoder layer
    Tensor dec_wq, dec_bq;
    Tensor dec_wk, dec_bk;
    Tensor dec_wv, dec_bv;
    Tensor dec_wo, dec_bo;

    int feature_dim = 16;  // input width of patch/instance encoders
};

FrozenBackbone build_backbone(const BackboneConfig& cfg, int feature_dim = 16);

// Z_x = instance_encoder(features): [S × d_mllms], frozen.
Tensor instance_representation(const FrozenBackbone& bb, const SyntheticInstance& inst);

KVCache encode_instance_offline(const FrozenBackbone& bb, const SyntheticInstance& inst);

// Thread-safe insert-if-absent store keyed by instance id.
class KVCacheStore {
public:
    const KVCache& get_or_build(const FrozenBackbone& bb, const SyntheticInstance& inst);
    bool contains(int id) const;
    size_t size() const;
    void clear();

private:
    mutable std::mutex mu_;
    std::map<int, KVCache> store_;
};

struct ClassTextEmbedding {
    Tensor sos;    // [1 × d_text]
    Tensor words;  // [L × d_text]
    Tensor eos;    // [1 × d_text]
};

ClassTextEmbedding embed_class_text(const FrozenBackbone& bb, int class_id);
Tensor word_embedding_rows(const FrozenBackbone& bb, const std::vector<int>& token_ids);
int x_token_id();

Tensor patch_embed(const FrozenBackbone& bb, const SyntheticInstance& inst);

// One pre-LN block: x + attn(LN1(x)) followed by x + FFN(LN2(x)).
Tensor encoder_block_forward(Tape& t, const EncoderBlock& blk, const Tensor& x);

// Run a raw token sequence through every layer with no prompt handling,
// pool one position, apply final LN + output projection, unit-normalize.
Tensor encode_text_promptless(Tape& t, const FrozenBackbone& bb, const Tensor& rows, int pool_pos);
Tensor encode_image_promptless(Tape& t, const FrozenBackbone& bb, const Tensor& rows, int pool_pos);

Tensor pool_project_text(Tape& t, const FrozenBackbone& bb, const Tensor& hidden, int pos);
Tensor pool_project_image(Tape& t, const FrozenBackbone& bb, const Tensor& hidden, int pos);

struct Dataset {
    std::vector<SyntheticInstance> train;      // base classes, shots each
    std::vector<SyntheticInstance> eval_base;
    std::vector<SyntheticInstance> eval_new;
    std::vector<int> base_class_ids;
    std::vector<int> new_class_ids;
    std::vector<std::string> class_names;      // indexed by global class id
    std::vector<std::string> class_captions;   // mock T_mllms phrase per class
};

// Cluster centers come from data_seed (the dataset identity); instance draws
// come from run_seed (the per-run few-shot sample).
Dataset make_dataset(const DataConfig& dc, const BackboneConfig& bc, uint64_t run_seed);

// FNV hash over every frozen tensor outside the designated trainable subset;
// used to assert immutability after training. kv_frozen=false additionally
// exempts the decoder key/value projections (the train_kv override).
uint64_t frozen_weight_hash(const FrozenBackbone& bb, bool kv_frozen = true);

} // namespace cpl
