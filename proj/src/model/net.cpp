#include "partparse/model/net.hpp"

#include <cmath>

namespace partparse::model {

namespace ad = partparse::ad;

namespace {

// running ordinal for init seeds so every tensor gets its own stream
struct SeedSeq {
    std::uint64_t base;
    std::uint64_t next() { return mix_seed(base, ++n); }
    std::uint64_t n = 0;
};

}  // namespace

Parser::Parser(ModelConfig cfg) : cfg_(cfg) {
    PP_CHECK(cfg_.stride == 8, "Parser: encoder is built for stride 8");
    PP_CHECK(cfg_.feature_dim % cfg_.num_heads == 0, "Parser: heads must divide feature_dim");
    int d = cfg_.feature_dim;
    int C = cfg_.part_classes;
    SeedSeq seed{cfg_.init_seed};

    // encoder: three stride-2 blocks and one stride-1 block
    std::vector<int> chans{3, std::max(4, d / 4), std::max(8, d / 2), d, d};
    std::vector<int> strides{2, 2, 2, 1};
    for (int i = 0; i < 4; ++i) {
        bb_w_.push_back(store_.add("encoder.conv" + std::to_string(i + 1) + ".w",
                                   init_he_conv({chans[i + 1], chans[i], 3, 3}, seed.next())));
        bb_b_.push_back(store_.add("encoder.conv" + std::to_string(i + 1) + ".b",
                                   init_const({chans[i + 1]}, 0), false));
    }
    (void)strides;

    queries_ = store_.add("decoder.queries",
                          init_normal({cfg_.num_queries, d}, 0.5, seed.next()), false);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        std::string p = "decoder.layer" + std::to_string(l) + ".";
        LayerIds ids;
        auto ln = [&](const std::string& name, int& gid, int& bid) {
            gid = store_.add(p + name + ".g", init_const({d}, 1), false);
            bid = store_.add(p + name + ".b", init_const({d}, 0), false);
        };
        ln("ln1", ids.ln1_g, ids.ln1_b);
        ln("ln2", ids.ln2_g, ids.ln2_b);
        ln("ln3", ids.ln3_g, ids.ln3_b);
        auto attn_ids = [&](const std::string& name) {
            AttnIds a;
            a.wq = store_.add(p + name + ".wq", init_xavier({d, d}, seed.next()));
            a.bq = store_.add(p + name + ".bq", init_const({d}, 0), false);
            a.wk = store_.add(p + name + ".wk", init_xavier({d, d}, seed.next()));
            a.bk = store_.add(p + name + ".bk", init_const({d}, 0), false);
            a.wv = store_.add(p + name + ".wv", init_xavier({d, d}, seed.next()));
            a.bv = store_.add(p + name + ".bv", init_const({d}, 0), false);
            a.wo = store_.add(p + name + ".wo", init_xavier({d, d}, seed.next()));
            a.bo = store_.add(p + name + ".bo", init_const({d}, 0), false);
            return a;
        };
        ids.self_attn = attn_ids("self");
        ids.cross_attn = attn_ids("cross");
        ids.ffn.w1 = store_.add(p + "ffn.w1", init_xavier({d, cfg_.ffn_hidden}, seed.next()));
        ids.ffn.b1 = store_.add(p + "ffn.b1", init_const({cfg_.ffn_hidden}, 0), false);
        ids.ffn.w2 = store_.add(p + "ffn.w2", init_xavier({cfg_.ffn_hidden, d}, seed.next()));
        ids.ffn.b2 = store_.add(p + "ffn.b2", init_const({d}, 0), false);
        layers_.push_back(ids);
    }
    final_ln_g_ = store_.add("decoder.final_ln.g", init_const({d}, 1), false);
    final_ln_b_ = store_.add("decoder.final_ln.b", init_const({d}, 0), false);

    cls_w_ = store_.add("detect.cls.w", init_xavier({d, 2}, seed.next()));
    cls_b_ = store_.add("detect.cls.b", init_const({2}, 0), false);
    box_w_ = store_.add("detect.box.w", init_xavier({d, 4}, seed.next()));
    box_b_ = store_.add("detect.box.b", init_const({4}, 0), false);

    pa_w_ = store_.add("parts.classifier.w", init_xavier({d, C}, seed.next()));
    pa_b_ = store_.add("parts.classifier.b", init_const({C}, 0), false);

    auto make_mlp = [&](const std::string& name) {
        MlpIds m;
        m.w1 = store_.add(name + ".w1", init_xavier({d, cfg_.psi_k_hidden}, seed.next()));
        m.b1 = store_.add(name + ".b1", init_const({cfg_.psi_k_hidden}, 0), false);
        // small output init keeps early dynamic kernels near zero
        m.w2 = store_.add(name + ".w2",
                          init_normal({cfg_.psi_k_hidden, d * d + d}, 0.01, seed.next()));
        m.b2 = store_.add(name + ".b2", init_const({d * d + d}, 0), false);
        return m;
    };
    psi_k_inst_ = make_mlp("kernels.instance");
    psi_k_content_ = make_mlp("kernels.content");
    psi_k_context_ = make_mlp("kernels.context");

    seg_w_ = store_.add("segmentor.w", init_xavier({d, C + 1}, seed.next()));
    seg_b_ = store_.add("segmentor.b", init_const({C + 1}, 0), false);
}

std::vector<ad::Var> Parser::bind(ad::Graph& g, bool trainable) const {
    std::vector<ad::Var> vars;
    vars.reserve(static_cast<size_t>(store_.count()));
    for (int i = 0; i < store_.count(); ++i) vars.push_back(g.leaf(store_.value(i), trainable));
    return vars;
}

Tensor Parser::positional_encoding(int h, int w, int d) {
    PP_CHECK(d % 4 == 0, "positional_encoding: d must be a multiple of 4");
    Tensor pe({h * w, d});
    int quarter = d / 4;  // sin/cos pairs per axis
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int p = y * w + x;
            for (int i = 0; i < quarter; ++i) {
                real freq = std::pow(real(10000), -real(2 * i) / (d / 2));
                pe.at(p, 2 * i) = std::sin(y * freq);
                pe.at(p, 2 * i + 1) = std::cos(y * freq);
                pe.at(p, d / 2 + 2 * i) = std::sin(x * freq);
                pe.at(p, d / 2 + 2 * i + 1) = std::cos(x * freq);
            }
        }
    return pe;
}

ad::Var Parser::backbone_forward(ad::Graph& g, const std::vector<ad::Var>& P,
                                 const Tensor& image, int* fh, int* fw) const {
    PP_CHECK(image.rank() == 3 && image.dim(0) == 3, "backbone_forward: image must be [3,H,W]");
    PP_CHECK(image.dim(1) % cfg_.stride == 0 && image.dim(2) % cfg_.stride == 0,
             "backbone_forward: image size must be a multiple of the stride");
    PP_CHECK(image.all_finite(), "backbone_forward: non-finite input");
    Tensor centered = image;
    for (long i = 0; i < centered.numel(); ++i) centered[i] -= real(0.5);
    ad::Var x = g.constant(std::move(centered));
    std::array<int, 4> strides{2, 2, 2, 1};
    for (int i = 0; i < 4; ++i)
        x = ad::relu(ad::conv2d(x, P[static_cast<size_t>(bb_w_[static_cast<size_t>(i)])],
                                P[static_cast<size_t>(bb_b_[static_cast<size_t>(i)])],
                                strides[static_cast<size_t>(i)], 1));
    const Tensor& xv = g.value(x);
    int d = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    if (fh) *fh = h;
    if (fw) *fw = w;
    return ad::reshape(x, {d, h * w});
}

ad::Var Parser::attn(ad::Graph& g, const std::vector<ad::Var>& P, const AttnIds& ids,
                     ad::Var q_in, ad::Var kv, ad::Var kv_pos, ad::Var* attention) const {
    (void)g;
    int d = cfg_.feature_dim;
    int heads = cfg_.num_heads;
    int dh = d / heads;
    ad::Var keys_in = kv_pos.valid() ? ad::add(kv, kv_pos) : kv;
    ad::Var q = ad::linear(q_in, P[static_cast<size_t>(ids.wq)], P[static_cast<size_t>(ids.bq)]);
    ad::Var k = ad::linear(keys_in, P[static_cast<size_t>(ids.wk)], P[static_cast<size_t>(ids.bk)]);
    ad::Var v = ad::linear(kv, P[static_cast<size_t>(ids.wv)], P[static_cast<size_t>(ids.bv)]);
    std::vector<ad::Var> head_outs;
    ad::Var attn_sum;
    for (int hd = 0; hd < heads; ++hd) {
        ad::Var qh = ad::slice_cols(q, hd * dh, (hd + 1) * dh);
        ad::Var kh = ad::slice_cols(k, hd * dh, (hd + 1) * dh);
        ad::Var vh = ad::slice_cols(v, hd * dh, (hd + 1) * dh);
        ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)),
                                   real(1) / std::sqrt(real(dh)));
        ad::Var a = ad::softmax_rows(scores);
        if (attention) attn_sum = attn_sum.valid() ? ad::add(attn_sum, a) : a;
        head_outs.push_back(ad::matmul(a, vh));
    }
    if (attention) *attention = ad::scale(attn_sum, real(1) / heads);
    ad::Var cat = ad::concat_cols(head_outs);
    return ad::linear(cat, P[static_cast<size_t>(ids.wo)], P[static_cast<size_t>(ids.bo)]);
}

ad::Var Parser::decode_instances(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var feat,
                                 int fh, int fw, ad::Var* attention) const {
    const Tensor& fv = g.value(feat);
    PP_CHECK(fv.rank() == 2 && fv.dim(0) == cfg_.feature_dim,
             "decode_instances: feature dim mismatch with queries");
    int d = cfg_.feature_dim;
    ad::Var cells = ad::transpose(feat);  // [hw, d]
    ad::Var pos = g.constant(positional_encoding(fh, fw, d));
    ad::Var h = P[static_cast<size_t>(queries_)];
    ad::Var no_pos;
    for (const LayerIds& ids : layers_) {
        ad::Var h1 = ad::layer_norm_rows(h, P[static_cast<size_t>(ids.ln1_g)],
                                         P[static_cast<size_t>(ids.ln1_b)]);
        h = ad::add(h, attn(g, P, ids.self_attn, h1, h1, no_pos, nullptr));
        ad::Var h2 = ad::layer_norm_rows(h, P[static_cast<size_t>(ids.ln2_g)],
                                         P[static_cast<size_t>(ids.ln2_b)]);
        h = ad::add(h, attn(g, P, ids.cross_attn, h2, cells, pos, attention));
        ad::Var h3 = ad::layer_norm_rows(h, P[static_cast<size_t>(ids.ln3_g)],
                                         P[static_cast<size_t>(ids.ln3_b)]);
        ad::Var ff = ad::linear(h3, P[static_cast<size_t>(ids.ffn.w1)],
                                P[static_cast<size_t>(ids.ffn.b1)]);
        ff = ad::linear(ad::relu(ff), P[static_cast<size_t>(ids.ffn.w2)],
                        P[static_cast<size_t>(ids.ffn.b2)]);
        h = ad::add(h, ff);
    }
    return ad::layer_norm_rows(h, P[static_cast<size_t>(final_ln_g_)],
                               P[static_cast<size_t>(final_ln_b_)]);
}

std::pair<ad::Var, ad::Var> Parser::detect(ad::Graph& g, const std::vector<ad::Var>& P,
                                           ad::Var inst_feat) const {
    (void)g;
    ad::Var logits = ad::linear(inst_feat, P[static_cast<size_t>(cls_w_)],
                                P[static_cast<size_t>(cls_b_)]);
    ad::Var boxes = ad::sigmoid(ad::linear(inst_feat, P[static_cast<size_t>(box_w_)],
                                           P[static_cast<size_t>(box_b_)]));
    return {logits, boxes};
}

ad::Var Parser::kernel_mlp(ad::Graph& g, const std::vector<ad::Var>& P, const MlpIds& mlp,
                           ad::Var input) const {
    (void)g;
    ad::Var hidden = ad::relu(ad::linear(input, P[static_cast<size_t>(mlp.w1)],
                                         P[static_cast<size_t>(mlp.b1)]));
    return ad::linear(hidden, P[static_cast<size_t>(mlp.w2)], P[static_cast<size_t>(mlp.b2)]);
}

ad::Var Parser::instance_features(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var feat,
                                  ad::Var inst_feat, Activation act) const {
    int d = cfg_.feature_dim;
    ad::Var kb = kernel_mlp(g, P, psi_k_inst_, inst_feat);  // [N, d*d+d]
    ad::Var kernels = ad::slice_cols(kb, 0, d * d);
    ad::Var bias = ad::slice_cols(kb, d * d, d * d + d);
    ad::Var out = ad::inst_conv(kernels, bias, feat, d);
    return act == Activation::relu ? ad::relu(out) : out;
}

std::pair<ad::Var, ad::Var> Parser::part_classify(ad::Graph& g, const std::vector<ad::Var>& P,
                                                  ad::Var inst_feat) const {
    (void)g;
    ad::Var wa = P[static_cast<size_t>(pa_w_)];
    ad::Var ca = ad::linear(inst_feat, wa, P[static_cast<size_t>(pa_b_)]);
    return {ca, wa};
}

ad::Var Parser::compute_affinity(ad::Graph& g, ad::Var part_weights, ad::Var part_logits,
                                 ad::Var feat) const {
    const Tensor& wv = g.value(part_weights);
    const Tensor& fv = g.value(feat);
    PP_CHECK(wv.dim(0) == fv.dim(0), "compute_affinity: d mismatch between W_a and F");
    // per part j: response row R[j] = W_a[:,j] . F, then scaled per instance by
    // the squashed part score before the final sigmoid
    ad::Var responses = ad::matmul(ad::transpose(part_weights), feat);  // [C, hw]
    ad::Var scores = ad::sigmoid(part_logits);                          // [N, C]
    return ad::sigmoid(ad::rows_scale_outer(responses, scores));        // [N, C, hw]
}

EmbPair Parser::aggregate(ad::Graph& g, ad::Var feat, ad::Var affinity) const {
    const Tensor& av = g.value(affinity);
    PP_CHECK(av.rank() == 3, "aggregate: affinity must be [N,C,hw]");
    int n = av.dim(0), C = av.dim(1);
    std::vector<ad::Var> content_rows, context_rows;
    content_rows.reserve(static_cast<size_t>(n) * C);
    context_rows.reserve(static_cast<size_t>(n) * C);
    for (int i = 0; i < n; ++i) {
        ad::Var rows = ad::index_first(affinity, i);            // [C, hw]
        ad::Var total = ad::scale(ad::mean_rows(rows), real(C));  // sum over parts
        for (int c = 0; c < C; ++c) {
            ad::Var w = ad::row(rows, c);
            content_rows.push_back(ad::pool_weighted(feat, w));
            ad::Var comp = ad::clamp(ad::sub(total, w), 0, 1);
            context_rows.push_back(ad::pool_weighted(feat, comp));
        }
    }
    return {ad::stack_rows(content_rows), ad::stack_rows(context_rows)};
}

std::pair<ad::Var, ad::Var> Parser::build_causal_reps(ad::Graph& g,
                                                      const std::vector<ad::Var>& P,
                                                      const EmbPair& emb, ad::Var f_i,
                                                      Activation act) const {
    int d = cfg_.feature_dim;
    int C = cfg_.part_classes;
    int n = g.value(f_i).dim(0);
    // mean over the part axis gives one kernel-generating vector per instance
    Tensor avg({n, n * C});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < C; ++c) avg.at(i, i * C + c) = real(1) / C;
    ad::Var avg_m = g.constant(std::move(avg));

    auto branch = [&](const MlpIds& mlp, ad::Var stacked) {
        ad::Var per_inst = ad::matmul(avg_m, stacked);  // [N, d]
        ad::Var kb = kernel_mlp(g, P, mlp, per_inst);
        ad::Var kernels = ad::slice_cols(kb, 0, d * d);
        ad::Var bias = ad::slice_cols(kb, d * d, d * d + d);
        ad::Var out = ad::inst_conv_per(kernels, bias, f_i, d);
        return act == Activation::relu ? ad::relu(out) : out;
    };
    return {branch(psi_k_content_, emb.content), branch(psi_k_context_, emb.context)};
}

ad::Var Parser::segment(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var rep) const {
    (void)g;
    return ad::conv1x1_batch(ad::transpose(P[static_cast<size_t>(seg_w_)]),
                             P[static_cast<size_t>(seg_b_)], rep);
}

ad::Var Parser::fuse_masks(ad::Graph& g, ad::Var logits_a, ad::Var logits_b) const {
    (void)g;
    return ad::scale(ad::add(logits_a, logits_b), real(0.5));
}

ad::Var Parser::baseline_segment(ad::Graph& g, const std::vector<ad::Var>& P, ad::Var f_i) const {
    return segment(g, P, f_i);
}

ForwardOutputs Parser::forward(ad::Graph& g, const std::vector<ad::Var>& P, const Tensor& image,
                               const ForwardOptions& opt) const {
    ForwardOutputs out;
    out.feat = backbone_forward(g, P, image, &out.fh, &out.fw);
    out.inst_feat = decode_instances(g, P, out.feat, out.fh, out.fw,
                                     opt.want_attention ? &out.attention : nullptr);
    auto det = detect(g, P, out.inst_feat);
    out.cls_logits = det.first;
    out.boxes = det.second;
    out.f_i = instance_features(g, P, out.feat, out.inst_feat);
    if (!opt.use_cfs) {
        out.logits_fused = baseline_segment(g, P, out.f_i);
        return out;
    }
    auto pc = part_classify(g, P, out.inst_feat);
    out.part_logits = pc.first;
    out.part_weights = pc.second;
    out.affinity = compute_affinity(g, out.part_weights, out.part_logits, out.feat);
    out.embeddings = aggregate(g, out.feat, out.affinity);
    auto reps = build_causal_reps(g, P, out.embeddings, out.f_i);
    out.rep_content = reps.first;
    out.rep_context = reps.second;
    if (opt.branch != Branch::context) out.logits_content = segment(g, P, out.rep_content);
    if (opt.branch != Branch::content) out.logits_context = segment(g, P, out.rep_context);
    switch (opt.branch) {
        case Branch::both:
            out.logits_fused = fuse_masks(g, out.logits_content, out.logits_context);
            break;
        case Branch::content: out.logits_fused = out.logits_content; break;
        case Branch::context: out.logits_fused = out.logits_context; break;
    }
    return out;
}

void Parser::save(const std::filesystem::path& path, const std::string& config_echo) const {
    store_.save_checkpoint(path, config_echo);
}

std::string Parser::load(const std::filesystem::path& path) {
    return store_.load_checkpoint(path);
}

}  // namespace partparse::model
