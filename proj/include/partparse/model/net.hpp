#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "partparse/autodiff.hpp"
#include "partparse/model/params.hpp"

namespace partparse::model {

struct ModelConfig {
    int feature_dim = 64;   // d
    int num_queries = 10;   // N
    int decoder_layers = 2;
    int num_heads = 4;
    int part_classes = 4;   // C (background handled as channel 0 of C+1)
    int stride = 8;
    int psi_k_hidden = 64;
    int ffn_hidden = 256;
    std::uint64_t init_seed = 1;
};

enum class Branch { both, content, context };
enum class Activation { relu, identity };

struct ForwardOptions {
    bool use_cfs = true;
    Branch branch = Branch::both;
    bool want_attention = false;
};

struct EmbPair {
    ad::Var content;  // stacked per-part embeddings [N*C, d]
    ad::Var context;  // [N*C, d]
};

struct ForwardOutputs {
    int fh = 0, fw = 0;
    ad::Var feat;            // F [d, hw]
    ad::Var inst_feat;       // f_o [N, d]
    ad::Var cls_logits;      // [N, 2], column 0 = person
    ad::Var boxes;           // [N, 4] in (0,1), cx cy w h
    ad::Var f_i;             // instance-aware features [N, d, hw]
    ad::Var logits_fused;    // mask logits used for inference [N, C+1, hw]
    // factor-separation path (set when use_cfs)
    ad::Var part_logits;     // c_a [N, C]
    ad::Var part_weights;    // W_a lease [d, C]
    ad::Var affinity;        // A [N, C, hw], entries in (0,1)
    EmbPair embeddings;      // f_v / f_u
    ad::Var rep_content;     // p^c [N, d, hw]
    ad::Var rep_context;     // p^t [N, d, hw]
    ad::Var logits_content;  // M^c logits [N, C+1, hw]
    ad::Var logits_context;  // M^t logits [N, C+1, hw]
    ad::Var attention;       // cross-attention weights [N, hw] (averaged heads)
};

// One-stage multi-person part parser: convolutional encoder, query decoder
// with dynamic per-instance kernels, and dual content/context mask heads.
class Parser {
public:
    explicit Parser(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    std::vector<ad::Var> bind(ad::Graph& g, bool trainable = true) const;

    ForwardOutputs forward(ad::Graph& g, const std::vector<ad::Var>& P, const Tensor& image,
                           const ForwardOptions& opt = {}) const;

    // --- individual operation surfaces (used by forward and by tests) ---
    ad::Var backbone_forward(ad::Graph& g, const std::vector<ad::Var>& P, const Tensor& image,
                             int* fh, int* fw) const;
    ad::Var decode_instances(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var feat, int fh,
                             int fw, ad::Var* attention = nullptr) const;
    std::pair<ad::Var, ad::Var> detect(ad::Graph& g, const std::vector<ad::Var>& P,
                                       ad::Var inst_feat) const;  // logits, boxes
    ad::Var instance_features(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var feat,
                              ad::Var inst_feat, Activation act = Activation::relu) const;
    std::pair<ad::Var, ad::Var> part_classify(ad::Graph& g, const std::vector<ad::Var>& P,
                                              ad::Var inst_feat) const;  // c_a, W_a
    ad::Var compute_affinity(ad::Graph& g, ad::Var part_weights, ad::Var part_logits,
                             ad::Var feat) const;
    EmbPair aggregate(ad::Graph& g, ad::Var feat, ad::Var affinity) const;
    std::pair<ad::Var, ad::Var> build_causal_reps(ad::Graph& g, const std::vector<ad::Var>& P,
                                                  const EmbPair& emb, ad::Var f_i,
                                                  Activation act = Activation::relu) const;
    ad::Var segment(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var rep) const;
    ad::Var fuse_masks(ad::Graph& g, ad::Var logits_a, ad::Var logits_b) const;
    ad::Var baseline_segment(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var f_i) const;

    void save(const std::filesystem::path& path, const std::string& config_echo) const;
    std::string load(const std::filesystem::path& path);

    // 2D sinusoidal positional encoding, [hw, d]
    static Tensor positional_encoding(int h, int w, int d);

private:
    struct MlpIds {
        int w1, b1, w2, b2;
    };
    struct AttnIds {
        int wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct LayerIds {
        int ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
        AttnIds self_attn, cross_attn;
        MlpIds ffn;
    };

    ad::Var kernel_mlp(ad::Graph& g, const std::vector<ad::Var>& P, const MlpIds& mlp,
                       ad::Var input) const;  // [rows, d*d+d]
    ad::Var attn(ad::Graph& g, const std::vector<ad::Var>& P, const AttnIds& ids, ad::Var q_in,
                 ad::Var kv, ad::Var kv_pos, ad::Var* attention) const;

    ModelConfig cfg_;
    ParamStore store_;

    // parameter ids
    std::vector<int> bb_w_, bb_b_;
    int queries_ = -1;
    std::vector<LayerIds> layers_;
    int final_ln_g_ = -1, final_ln_b_ = -1;
    int cls_w_ = -1, cls_b_ = -1, box_w_ = -1, box_b_ = -1;
    int pa_w_ = -1, pa_b_ = -1;
    MlpIds psi_k_inst_{}, psi_k_content_{}, psi_k_context_{};
    int seg_w_ = -1, seg_b_ = -1;
};

}  // namespace partparse::model
