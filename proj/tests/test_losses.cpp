#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "partparse/loss/objectives.hpp"
#include "test_util.hpp"

using namespace partparse;
using namespace partparse::losses;
namespace ad = partparse::ad;
using pptest::max_rel_err;
using pptest::numeric_grad;
using pptest::random_tensor;

namespace {

// Hand-built 4x4-grid targets: one instance, parts as explicit cell lists.
GtTargets toy_targets(int C = 4) {
    GtTargets t;
    t.fh = t.fw = 4;
    t.C = C;
    InstanceTarget it;
    it.coverage = Tensor({C, 16});
    it.masks_bin = Tensor({C, 16});
    it.label_map.assign(16, 0);
    it.silhouette = Tensor({16});
    it.presence.assign(static_cast<size_t>(C), false);
    // head: cell 1; torso: cells 5,6; left: 9; right: 10,14
    std::vector<std::vector<int>> cells{{1}, {5, 6}, {9}, {10, 14}};
    for (int c = 0; c < C && c < 4; ++c) {
        for (int x : cells[static_cast<size_t>(c)]) {
            it.coverage.at(c, x) = 1;
            it.masks_bin.at(c, x) = 1;
            it.label_map[static_cast<size_t>(x)] = c + 1;
            it.silhouette[x] = 1;
        }
        it.presence[static_cast<size_t>(c)] = true;
    }
    it.box = Tensor::from({4}, {0.5, 0.5, 0.4, 0.6});
    t.instances.push_back(std::move(it));
    return t;
}

match::Assignment single_pair(int q = 0) {
    match::Assignment a;
    a.pairs = {{q, 0}};
    return a;
}

}  // namespace

TEST_CASE("targets from a generated scene: coverage, labels, silhouette") {
    synth::LabeledScene scene = synth::generate_scene(1, synth::StyleId::natural, 7, 64);
    GtTargets t = build_targets(scene, 8, 8);
    REQUIRE(t.instances.size() == 1);
    const auto& it = t.instances[0];
    // coverage sums match pixel counts / cell area
    for (int c = 0; c < t.C; ++c) {
        real total_cov = 0;
        for (int x = 0; x < 64; ++x) total_cov += it.coverage.at(c, x);
        real pixels = static_cast<real>(scene.instances[0].part_masks[static_cast<size_t>(c)].count());
        CHECK(total_cov * 64 == doctest::Approx(pixels).epsilon(1e-9));
    }
    // silhouette bounded, label map in range
    for (int x = 0; x < 64; ++x) {
        CHECK(it.silhouette[x] <= 1.0);
        CHECK(it.label_map[static_cast<size_t>(x)] >= 0);
        CHECK(it.label_map[static_cast<size_t>(x)] <= t.C);
    }
    CHECK_THROWS_AS(build_targets(scene, 7, 8), Error);
}

TEST_CASE("phi: constant field returns the constant for every present part") {
    GtTargets t = toy_targets();
    ad::Graph g;
    Tensor rep({2, 3, 16});
    for (int k = 0; k < 3; ++k)
        for (int x = 0; x < 16; ++x) rep.at(0, k, x) = 2.5 + k;
    auto pv = phi_aggregate(g, g.leaf(rep, false), t, single_pair(0));
    REQUIRE(pv.vecs.size() == 1);
    CHECK(pv.skipped == 0);
    for (int c = 0; c < 4; ++c) {
        REQUIRE(pv.vecs[0][static_cast<size_t>(c)].valid());
        const Tensor& v = g.value(pv.vecs[0][static_cast<size_t>(c)]);
        for (int k = 0; k < 3; ++k) CHECK(v[k] == doctest::Approx(2.5 + k).epsilon(1e-12));
    }
}

TEST_CASE("phi: single-cell mask returns that cell's feature; oracle equality on 4x4") {
    GtTargets t = toy_targets();
    Rng rng(5);
    Tensor rep = random_tensor({1, 6, 16}, rng);
    ad::Graph g;
    auto pv = phi_aggregate(g, g.leaf(rep, false), t, single_pair(0));
    // head mask is exactly cell 1
    const Tensor& head = g.value(pv.vecs[0][0]);
    for (int k = 0; k < 6; ++k) CHECK(head[k] == rep.at(0, k, 1));  // exact

    // explicit-loop masked-mean oracle, exact equality for every part
    for (int c = 0; c < 4; ++c) {
        const Tensor& got = g.value(pv.vecs[0][static_cast<size_t>(c)]);
        for (int k = 0; k < 6; ++k) {
            real num = 0, den = 0;
            for (int x = 0; x < 16; ++x) {
                num += rep.at(0, k, x) * t.instances[0].masks_bin.at(c, x);
                den += t.instances[0].masks_bin.at(c, x);
            }
            CHECK(got[k] == num / den);  // bitwise
        }
    }
}

TEST_CASE("phi: parts that vanish at feature resolution are skipped and counted") {
    GtTargets t = toy_targets();
    // keep full-res presence but zero the downsampled mask of part 2
    for (int x = 0; x < 16; ++x) t.instances[0].masks_bin.at(2, x) = 0;
    ad::Graph g;
    auto pv = phi_aggregate(g, g.constant(Tensor({1, 3, 16})), t, single_pair(0));
    CHECK(pv.skipped == 1);
    CHECK(!pv.vecs[0][2].valid());
    CHECK(pv.vecs[0][0].valid());
}

TEST_CASE("loss_part: perfect, uniform, and symmetric cases") {
    GtTargets t = toy_targets();
    int K = 5;
    // perfect one-hot logits
    Tensor logits({1, K, 16});
    for (int x = 0; x < 16; ++x) {
        int y = t.instances[0].label_map[static_cast<size_t>(x)];
        for (int c = 0; c < K; ++c) logits.at(0, c, x) = c == y ? 60.0 : 0.0;
    }
    ad::Graph g;
    CHECK(g.value(loss_part(g, g.constant(logits), t, single_pair(0)))[0] <= 1e-6);

    // uniform logits -> ln 5 per pixel
    ad::Graph g2;
    auto u = g2.value(loss_part(g2, g2.constant(Tensor({1, K, 16})), t, single_pair(0)))[0];
    CHECK(u == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    // no matches -> 0 with warning counter
    ad::Graph g3;
    long warn = 0;
    match::Assignment none;
    CHECK(g3.value(loss_part(g3, g3.constant(Tensor({1, K, 16})), t, none, &warn))[0] == 0.0);
    CHECK(warn == 1);
}

TEST_CASE("diversity similarity: identical, orthogonal, antiparallel phi vectors") {
    GtTargets t = toy_targets();
    auto build_phi = [&](ad::Graph& g, const Tensor& rep) {
        return phi_aggregate(g, g.leaf(rep, false), t, single_pair(0));
    };
    Rng rng(11);
    Tensor rep = random_tensor({1, 4, 16}, rng);

    ad::Graph g;
    auto a = build_phi(g, rep);
    auto b = build_phi(g, rep);
    auto sim = mean_cosine(g, a, b);
    REQUIRE(sim.has_value());
    CHECK(g.value(*sim)[0] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor neg = rep;
    for (long i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
    ad::Graph g2;
    auto c = build_phi(g2, rep);
    auto d = build_phi(g2, neg);
    CHECK(g2.value(*mean_cosine(g2, c, d))[0] == doctest::Approx(-1.0).epsilon(1e-12));

    // orthogonal constant fields: [1,0,...] vs [0,1,...]
    Tensor e1({1, 4, 16}), e2({1, 4, 16});
    for (int x = 0; x < 16; ++x) {
        e1.at(0, 0, x) = 1;
        e2.at(0, 1, x) = 1;
    }
    ad::Graph g3;
    auto e = build_phi(g3, e1);
    auto f = build_phi(g3, e2);
    CHECK(g3.value(*mean_cosine(g3, e, f))[0] == doctest::Approx(0.0).epsilon(1e-12));

    // zero vector cosine defined as 0
    ad::Graph g4;
    auto z = build_phi(g4, Tensor({1, 4, 16}));
    auto r = build_phi(g4, rep);
    CHECK(g4.value(*mean_cosine(g4, z, r))[0] == doctest::Approx(0.0));
}

TEST_CASE("invariance: zero for identical views, half for one orthogonal view, loop oracle") {
    GtTargets t = toy_targets();
    Rng rng(13);
    Tensor rep = random_tensor({1, 4, 16}, rng);
    ad::Graph g;
    auto orig_c = phi_aggregate(g, g.leaf(rep, false), t, single_pair(0));
    auto orig_t = phi_aggregate(g, g.leaf(rep, false), t, single_pair(0));

    // identical views -> exactly 0
    {
        std::vector<std::pair<PhiVectors, PhiVectors>> views;
        views.emplace_back(phi_aggregate(g, g.leaf(rep, false), t, single_pair(0)),
                           phi_aggregate(g, g.leaf(rep, false), t, single_pair(0)));
        views.emplace_back(phi_aggregate(g, g.leaf(rep, false), t, single_pair(0)),
                           phi_aggregate(g, g.leaf(rep, false), t, single_pair(0)));
        CHECK(g.value(loss_inv(g, orig_c, orig_t, views))[0] == 0.0);
    }

    // content branch only: one orthogonal view (T=0), one identical (T=1)
    {
        GtTargets t1 = toy_targets(1);  // single part so T is a single cosine
        Tensor base({1, 2, 16});
        for (int x = 0; x < 16; ++x) base.at(0, 0, x) = 1;  // unit e1 field
        Tensor orth({1, 2, 16});
        for (int x = 0; x < 16; ++x) orth.at(0, 1, x) = 1;  // unit e2 field
        ad::Graph g2;
        auto oc = phi_aggregate(g2, g2.leaf(base, false), t1, single_pair(0));
        PhiVectors empty_ctx;  // no entries: context terms drop out
        empty_ctx.vecs.resize(1);
        empty_ctx.vecs[0].resize(1);
        std::vector<std::pair<PhiVectors, PhiVectors>> views;
        PhiVectors v1 = phi_aggregate(g2, g2.leaf(orth, false), t1, single_pair(0));
        PhiVectors v2 = phi_aggregate(g2, g2.leaf(base, false), t1, single_pair(0));
        PhiVectors e1c;
        e1c.vecs.resize(1);
        e1c.vecs[0].resize(1);
        views.emplace_back(std::move(v1), e1c);
        views.emplace_back(std::move(v2), e1c);
        CHECK(g2.value(loss_inv(g2, oc, empty_ctx, views))[0] ==
              doctest::Approx(0.5).epsilon(1e-12));
    }

    // E=2 loop oracle with random views
    {
        Tensor va = random_tensor({1, 4, 16}, rng);
        Tensor vb = random_tensor({1, 4, 16}, rng);
        ad::Graph g3;
        auto oc = phi_aggregate(g3, g3.leaf(rep, false), t, single_pair(0));
        auto ot = phi_aggregate(g3, g3.leaf(rep, false), t, single_pair(0));
        std::vector<std::pair<PhiVectors, PhiVectors>> views;
        views.emplace_back(phi_aggregate(g3, g3.leaf(va, false), t, single_pair(0)),
                           phi_aggregate(g3, g3.leaf(va, false), t, single_pair(0)));
        views.emplace_back(phi_aggregate(g3, g3.leaf(vb, false), t, single_pair(0)),
                           phi_aggregate(g3, g3.leaf(vb, false), t, single_pair(0)));
        real got = g3.value(loss_inv(g3, oc, ot, views))[0];

        // hand computation with explicit loops
        auto masked_mean = [&](const Tensor& r, int c, int k) {
            real num = 0, den = 0;
            for (int x = 0; x < 16; ++x) {
                num += r.at(0, k, x) * t.instances[0].masks_bin.at(c, x);
                den += t.instances[0].masks_bin.at(c, x);
            }
            return num / den;
        };
        auto mean_cos = [&](const Tensor& r1, const Tensor& r2) {
            real acc = 0;
            for (int c = 0; c < 4; ++c) {
                real dotv = 0, n1 = 0, n2 = 0;
                for (int k = 0; k < 4; ++k) {
                    real u = masked_mean(r1, c, k), v = masked_mean(r2, c, k);
                    dotv += u * v;
                    n1 += u * u;
                    n2 += v * v;
                }
                acc += dotv / (std::sqrt(n1) * std::sqrt(n2));
            }
            return acc / 4;
        };
        real expect = 0.5 * (std::abs(1 - mean_cos(rep, va)) + std::abs(1 - mean_cos(rep, vb))) +
                      0.5 * (std::abs(1 - mean_cos(rep, va)) + std::abs(1 - mean_cos(rep, vb)));
        CHECK(got == doctest::Approx(expect).epsilon(1e-9));
        CHECK(got >= 0.0);
        CHECK(got <= 4.0);
    }
}

TEST_CASE("loss_inv is invariant to positive rescaling of the views") {
    GtTargets t = toy_targets();
    Rng rng(17);
    Tensor rep = random_tensor({1, 4, 16}, rng);
    Tensor view = random_tensor({1, 4, 16}, rng);
    Tensor view_scaled = view;
    for (long i = 0; i < view_scaled.numel(); ++i) view_scaled[i] *= 7.3;
    ad::Graph g;
    auto oc = phi_aggregate(g, g.leaf(rep, false), t, single_pair(0));
    auto ot = phi_aggregate(g, g.leaf(rep, false), t, single_pair(0));
    std::vector<std::pair<PhiVectors, PhiVectors>> v1, v2;
    v1.emplace_back(phi_aggregate(g, g.leaf(view, false), t, single_pair(0)),
                    phi_aggregate(g, g.leaf(view, false), t, single_pair(0)));
    v2.emplace_back(phi_aggregate(g, g.leaf(view_scaled, false), t, single_pair(0)),
                    phi_aggregate(g, g.leaf(view_scaled, false), t, single_pair(0)));
    real a = g.value(loss_inv(g, oc, ot, v1))[0];
    real b = g.value(loss_inv(g, oc, ot, v2))[0];
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("loss_det: analytic cases") {
    GtTargets t = toy_targets();
    LossWeights w;

    // perfect predictions: matched query confident person with exact box,
    // others confident no-person, presence logits strongly correct
    ad::Graph g;
    Tensor cls({3, 2});
    cls.at(0, 0) = 60;  // matched -> person
    cls.at(1, 1) = 60;
    cls.at(2, 1) = 60;
    Tensor boxes({3, 4});
    for (int k = 0; k < 4; ++k) boxes.at(0, k) = t.instances[0].box[k];
    Tensor ca = Tensor::full({3, 4}, 60);  // all parts present
    auto det = loss_det(g, g.constant(cls), g.constant(boxes),
                        std::optional<ad::Var>(g.constant(ca)), t, single_pair(0), w);
    CHECK(g.value(det)[0] <= 1e-6);

    // box off by delta < 1 in one coordinate adds 0.5 delta^2
    ad::Graph g2;
    Tensor boxes2 = boxes;
    boxes2.at(0, 2) += 0.3;
    auto det2 = loss_det(g2, g2.constant(cls), g2.constant(boxes2),
                         std::optional<ad::Var>(g2.constant(ca)), t, single_pair(0), w);
    CHECK(g2.value(det2)[0] == doctest::Approx(0.5 * 0.3 * 0.3).epsilon(1e-6));

    // presence target [1,1,1,1] with zero logits costs ln 2 per part
    ad::Graph g3;
    auto det3 = loss_det(g3, g3.constant(cls), g3.constant(boxes),
                         std::optional<ad::Var>(g3.constant(Tensor({3, 4}))), t,
                         single_pair(0), w);
    CHECK(g3.value(det3)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("loss gradients match finite differences") {
    GtTargets t = toy_targets();
    match::Assignment a = single_pair(0);

    // l_part wrt mask logits
    {
        Rng rng(23);
        Tensor logits = random_tensor({2, 5, 16}, rng);
        ad::Graph g;
        auto lv = g.leaf(logits, true);
        auto loss = loss_part(g, lv, t, a);
        g.backward(loss);
        auto eval = [&](const Tensor& probe) {
            ad::Graph g2;
            return g2.value(loss_part(g2, g2.leaf(probe, false), t, a))[0];
        };
        CHECK(max_rel_err(g.grad(lv), numeric_grad(eval, logits)) < 1e-5);
    }
    // diversity similarity wrt representations
    {
        Rng rng(29);
        Tensor rc = random_tensor({1, 4, 16}, rng);
        Tensor rt = random_tensor({1, 4, 16}, rng);
        ad::Graph g;
        auto rcv = g.leaf(rc, true);
        auto rtv = g.leaf(rt, true);
        auto sim = mean_cosine(g, phi_aggregate(g, rcv, t, a), phi_aggregate(g, rtv, t, a));
        REQUIRE(sim.has_value());
        g.backward(*sim);
        auto eval_c = [&](const Tensor& probe) {
            ad::Graph g2;
            auto s = mean_cosine(g2, phi_aggregate(g2, g2.leaf(probe, false), t, a),
                                 phi_aggregate(g2, g2.leaf(rt, false), t, a));
            return g2.value(*s)[0];
        };
        CHECK(max_rel_err(g.grad(rcv), numeric_grad(eval_c, rc)) < 1e-5);
    }
    // invariance wrt original and view representations
    {
        Rng rng(31);
        Tensor rc = random_tensor({1, 4, 16}, rng);
        Tensor view = random_tensor({1, 4, 16}, rng);
        auto build = [&](ad::Graph& g, ad::Var rcv, ad::Var vv) {
            auto oc = phi_aggregate(g, rcv, t, a);
            auto ot = phi_aggregate(g, rcv, t, a);
            std::vector<std::pair<PhiVectors, PhiVectors>> views;
            views.emplace_back(phi_aggregate(g, vv, t, a), phi_aggregate(g, vv, t, a));
            return loss_inv(g, oc, ot, views);
        };
        ad::Graph g;
        auto rcv = g.leaf(rc, true);
        auto vv = g.leaf(view, true);
        g.backward(build(g, rcv, vv));
        auto eval_rc = [&](const Tensor& probe) {
            ad::Graph g2;
            return g2.value(build(g2, g2.leaf(probe, false), g2.leaf(view, false)))[0];
        };
        auto eval_v = [&](const Tensor& probe) {
            ad::Graph g2;
            return g2.value(build(g2, g2.leaf(rc, false), g2.leaf(probe, false)))[0];
        };
        CHECK(max_rel_err(g.grad(rcv), numeric_grad(eval_rc, rc)) < 1e-5);
        CHECK(max_rel_err(g.grad(vv), numeric_grad(eval_v, view)) < 1e-5);
    }
    // detection wrt logits and boxes
    {
        Rng rng(37);
        Tensor cls = random_tensor({3, 2}, rng);
        Tensor boxes = random_tensor({3, 4}, rng, 0.1, 0.9);
        Tensor ca = random_tensor({3, 4}, rng);
        LossWeights w;
        ad::Graph g;
        auto cv = g.leaf(cls, true);
        auto bv = g.leaf(boxes, true);
        auto av = g.leaf(ca, true);
        auto loss = loss_det(g, cv, bv, std::optional<ad::Var>(av), t, a, w);
        g.backward(loss);
        auto eval = [&](int which) {
            return [&, which](const Tensor& probe) {
                ad::Graph g2;
                auto c2 = g2.leaf(which == 0 ? probe : cls, false);
                auto b2 = g2.leaf(which == 1 ? probe : boxes, false);
                auto a2 = g2.leaf(which == 2 ? probe : ca, false);
                return g2.value(loss_det(g2, c2, b2, std::optional<ad::Var>(a2), t, a, w))[0];
            };
        };
        CHECK(max_rel_err(g.grad(cv), numeric_grad(eval(0), cls)) < 1e-5);
        CHECK(max_rel_err(g.grad(bv), numeric_grad(eval(1), boxes)) < 1e-5);
        CHECK(max_rel_err(g.grad(av), numeric_grad(eval(2), ca)) < 1e-5);
    }
}

TEST_CASE("total loss wiring and breakdown bookkeeping") {
    // build a tiny real forward pass so every head exists
    model::ModelConfig cfg;
    cfg.feature_dim = 8;
    cfg.num_queries = 3;
    cfg.decoder_layers = 1;
    cfg.num_heads = 2;
    cfg.psi_k_hidden = 8;
    cfg.ffn_hidden = 16;
    model::Parser parser(cfg);
    synth::LabeledScene scene = synth::generate_scene(1, synth::StyleId::natural, 3, 32);
    GtTargets t = build_targets(scene, 4, 4);

    ad::Graph g;
    auto P = parser.bind(g, false);
    auto out = parser.forward(g, P, scene.image);
    match::Assignment a = match::match(g.value(out.cls_logits), g.value(out.boxes),
                                       g.value(ad::softmax_channels(out.logits_fused)),
                                       silhouettes_of(t), boxes_of(t));

    LossToggles toggles;
    LossWeights w;

    // CIL-off arm: total = l_det + l_part exactly, E = 0
    toggles.use_div = false;
    toggles.use_inv = false;
    auto off = total_loss(g, parser, out, {}, t, a, toggles, w);
    CHECK(off.breakdown.E == 0);
    CHECK(off.breakdown.l_inv == 0.0);
    CHECK(off.breakdown.l_div == off.breakdown.l_part);
    CHECK(off.breakdown.total ==
          doctest::Approx(off.breakdown.l_det + off.breakdown.l_part).epsilon(1e-12));

    // full arm with two intervened views
    synth::InterventionSpec ispec;
    ispec.kind = synth::InterventionKind::random_style;
    ispec.seed = 1;
    synth::LabeledScene v1 = synth::apply_intervention(scene, ispec);
    ispec.seed = 2;
    synth::LabeledScene v2 = synth::apply_intervention(scene, ispec);
    auto fo1 = parser.forward(g, P, v1.image);
    auto fo2 = parser.forward(g, P, v2.image);
    toggles.use_div = true;
    toggles.use_inv = true;
    auto full = total_loss(g, parser, out, {fo1, fo2}, t, a, toggles, w);
    CHECK(full.breakdown.E == 2);
    CHECK(full.breakdown.total ==
          doctest::Approx(full.breakdown.l_det + full.breakdown.l_div + full.breakdown.l_inv)
              .epsilon(1e-12));
    CHECK(std::isfinite(full.breakdown.total));

    // diversity without both branches is rejected
    LossToggles bad;
    bad.use_div = true;
    bad.branch = model::Branch::content;
    CHECK_THROWS_AS(total_loss(g, parser, out, {}, t, a, bad, w), Error);
}
