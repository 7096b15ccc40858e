#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "partparse/autodiff.hpp"
#include "test_util.hpp"

using namespace partparse;
namespace ad = partparse::ad;
using pptest::max_rel_err;
using pptest::numeric_grad;
using pptest::random_tensor;

namespace {

// Checks d(f)/d(x) for a scalar-valued graph builder applied to one input.
void check_grad(const std::function<ad::Var(ad::Graph&, ad::Var)>& build, Tensor x,
                real tol = 1e-6) {
    ad::Graph g;
    ad::Var xv = g.leaf(x, true);
    ad::Var loss = build(g, xv);
    g.backward(loss);
    Tensor analytic = g.grad(xv);

    Tensor numeric = numeric_grad(
        [&](const Tensor& probe) {
            ad::Graph g2;
            ad::Var pv = g2.leaf(probe, false);
            return g2.value(build(g2, pv))[0];
        },
        x);
    CHECK(max_rel_err(analytic, numeric) < tol);
}

}  // namespace

TEST_CASE("elementwise ops: values") {
    ad::Graph g;
    auto a = g.constant(Tensor::from({2, 2}, {1, -2, 3, -4}));
    auto b = g.constant(Tensor::from({2, 2}, {5, 6, 7, 8}));
    CHECK(g.value(ad::add(a, b))[1] == doctest::Approx(4));
    CHECK(g.value(ad::sub(a, b))[0] == doctest::Approx(-4));
    CHECK(g.value(ad::mul(a, b))[3] == doctest::Approx(-32));
    CHECK(g.value(ad::relu(a))[1] == doctest::Approx(0));
    CHECK(g.value(ad::sigmoid(g.constant(Tensor::scalar(0))))[0] == doctest::Approx(0.5));
    CHECK(g.value(ad::clamp(a, -1, 1))[3] == doctest::Approx(-1));
    CHECK(g.value(ad::abs_of(a))[1] == doctest::Approx(2));
}

TEST_CASE("shape ops: values and grads") {
    Rng rng(7);
    check_grad([](ad::Graph& g, ad::Var x) { return ad::sum_all(ad::transpose(x)); },
               random_tensor({3, 4}, rng));
    check_grad(
        [](ad::Graph& g, ad::Var x) {
            return ad::sum_all(ad::mul(ad::slice_cols(x, 1, 3), ad::slice_cols(x, 0, 2)));
        },
        random_tensor({3, 4}, rng));
    check_grad(
        [](ad::Graph& g, ad::Var x) {
            auto r = ad::row(x, 1);
            return ad::dot(r, r);
        },
        random_tensor({3, 4}, rng));
    check_grad(
        [](ad::Graph& g, ad::Var x) {
            auto s = ad::index_first(x, 0);
            auto t = ad::index_first(x, 2);
            return ad::sum_all(ad::mul(s, t));
        },
        random_tensor({3, 2, 5}, rng));
    check_grad(
        [](ad::Graph& g, ad::Var x) {
            auto r = ad::reshape(x, {4, 3});
            return ad::sum_all(ad::mul(r, r));
        },
        random_tensor({3, 4}, rng));
    check_grad(
        [](ad::Graph& g, ad::Var x) {
            auto c = ad::concat_cols({ad::slice_cols(x, 0, 2), ad::slice_cols(x, 2, 4)});
            return ad::sum_all(ad::mul(c, c));
        },
        random_tensor({3, 4}, rng));
}

TEST_CASE("matmul: value and grads vs finite differences") {
    Rng rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);

    ad::Graph g;
    auto av = g.leaf(a, true);
    auto bv = g.leaf(b, true);
    auto loss = ad::sum_all(ad::mul(ad::matmul(av, bv), ad::matmul(av, bv)));
    g.backward(loss);

    auto eval_a = [&](const Tensor& probe) {
        ad::Graph g2;
        auto pa = g2.leaf(probe, false);
        auto pb = g2.leaf(b, false);
        auto mm = ad::matmul(pa, pb);
        return g2.value(ad::sum_all(ad::mul(mm, mm)))[0];
    };
    auto eval_b = [&](const Tensor& probe) {
        ad::Graph g2;
        auto pa = g2.leaf(a, false);
        auto pb = g2.leaf(probe, false);
        auto mm = ad::matmul(pa, pb);
        return g2.value(ad::sum_all(ad::mul(mm, mm)))[0];
    };
    CHECK(max_rel_err(g.grad(av), numeric_grad(eval_a, a)) < 1e-6);
    CHECK(max_rel_err(g.grad(bv), numeric_grad(eval_b, b)) < 1e-6);
}

TEST_CASE("softmax rows: normalization and grad") {
    Rng rng(13);
    Tensor x = random_tensor({4, 6}, rng, -3, 3);
    ad::Graph g;
    auto xv = g.leaf(x, false);
    const Tensor& sm = g.value(ad::softmax_rows(xv));
    for (int i = 0; i < 4; ++i) {
        real s = 0;
        for (int j = 0; j < 6; ++j) s += sm.at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    check_grad(
        [](ad::Graph& g2, ad::Var v) {
            auto p = ad::softmax_rows(v);
            return ad::sum_all(ad::mul(p, p));
        },
        x);
    check_grad(
        [](ad::Graph& g2, ad::Var v) {
            auto p = ad::log_softmax_rows(v);
            return ad::sum_all(ad::mul(p, p));
        },
        x, 1e-5);
}

TEST_CASE("layer norm: grad wrt input and params") {
    Rng rng(17);
    Tensor x = random_tensor({3, 8}, rng);
    Tensor gain = random_tensor({8}, rng, 0.5, 1.5);
    Tensor bias = random_tensor({8}, rng);

    ad::Graph g;
    auto xv = g.leaf(x, true);
    auto gv = g.leaf(gain, true);
    auto bv = g.leaf(bias, true);
    auto out = ad::layer_norm_rows(xv, gv, bv);
    auto loss = ad::sum_all(ad::mul(out, out));
    g.backward(loss);

    auto make_eval = [&](int which) {
        return [&, which](const Tensor& probe) {
            ad::Graph g2;
            auto px = g2.leaf(which == 0 ? probe : x, false);
            auto pg = g2.leaf(which == 1 ? probe : gain, false);
            auto pb = g2.leaf(which == 2 ? probe : bias, false);
            auto o = ad::layer_norm_rows(px, pg, pb);
            return g2.value(ad::sum_all(ad::mul(o, o)))[0];
        };
    };
    CHECK(max_rel_err(g.grad(xv), numeric_grad(make_eval(0), x)) < 1e-5);
    CHECK(max_rel_err(g.grad(gv), numeric_grad(make_eval(1), gain)) < 1e-6);
    CHECK(max_rel_err(g.grad(bv), numeric_grad(make_eval(2), bias)) < 1e-6);
}

TEST_CASE("conv2d: shape, value oracle, grads") {
    Rng rng(19);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);

    ad::Graph g;
    auto xv = g.leaf(x, true);
    auto wv = g.leaf(w, true);
    auto bv = g.leaf(b, true);
    auto out = ad::conv2d(xv, wv, bv, 2, 1);
    const Tensor& ov = g.value(out);
    REQUIRE(ov.shape() == std::vector<int>{3, 3, 3});

    // explicit loop oracle at one output location
    {
        int k = 1, oy = 1, ox = 2;
        real acc = b[k];
        for (int c = 0; c < 2; ++c)
            for (int ki = 0; ki < 3; ++ki)
                for (int kj = 0; kj < 3; ++kj) {
                    int iy = oy * 2 + ki - 1, ix = ox * 2 + kj - 1;
                    if (iy >= 0 && iy < 6 && ix >= 0 && ix < 6)
                        acc += x.at(c, iy, ix) * w[((k * 2 + c) * 3 + ki) * 3 + kj];
                }
        CHECK(ov.at(k, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
    }

    auto loss = ad::sum_all(ad::mul(out, out));
    g.backward(loss);
    auto make_eval = [&](int which) {
        return [&, which](const Tensor& probe) {
            ad::Graph g2;
            auto px = g2.leaf(which == 0 ? probe : x, false);
            auto pw = g2.leaf(which == 1 ? probe : w, false);
            auto pb = g2.leaf(which == 2 ? probe : b, false);
            auto o = ad::conv2d(px, pw, pb, 2, 1);
            return g2.value(ad::sum_all(ad::mul(o, o)))[0];
        };
    };
    CHECK(max_rel_err(g.grad(xv), numeric_grad(make_eval(0), x)) < 1e-5);
    CHECK(max_rel_err(g.grad(wv), numeric_grad(make_eval(1), w)) < 1e-5);
    CHECK(max_rel_err(g.grad(bv), numeric_grad(make_eval(2), b)) < 1e-6);

    ad::Graph g3;
    CHECK_THROWS_AS(ad::conv2d(g3.constant(Tensor({2, 1, 1})), g3.constant(w),
                               g3.constant(b), 2, 0),
                    Error);
}

TEST_CASE("batched instance convs: identity kernels and grads") {
    Rng rng(23);
    int n = 2, d = 4, hw = 6;
    Tensor field = random_tensor({d, hw}, rng);

    // identity kernels, zero bias -> output equals the field for every instance
    Tensor ident({n, d * d});
    for (int i = 0; i < n; ++i)
        for (int r = 0; r < d; ++r) ident.at(i, r * d + r) = 1;
    {
        ad::Graph g;
        auto out = ad::inst_conv(g.constant(ident), g.constant(Tensor({n, d})),
                                 g.constant(field), d);
        const Tensor& ov = g.value(out);
        for (int i = 0; i < n; ++i)
            for (long j = 0; j < field.numel(); ++j)
                CHECK(ov[i * field.numel() + j] == doctest::Approx(field[j]).epsilon(1e-12));
    }

    Tensor kern = random_tensor({n, d * d}, rng);
    Tensor bias = random_tensor({n, d}, rng);
    Tensor fields = random_tensor({n, d, hw}, rng);

    // grads for the shared-field variant
    {
        ad::Graph g;
        auto kv = g.leaf(kern, true);
        auto bv = g.leaf(bias, true);
        auto fv = g.leaf(field, true);
        auto out = ad::inst_conv(kv, bv, fv, d);
        auto loss = ad::sum_all(ad::mul(out, out));
        g.backward(loss);
        auto make_eval = [&](int which) {
            return [&, which](const Tensor& probe) {
                ad::Graph g2;
                auto pk = g2.leaf(which == 0 ? probe : kern, false);
                auto pb = g2.leaf(which == 1 ? probe : bias, false);
                auto pf = g2.leaf(which == 2 ? probe : field, false);
                auto o = ad::inst_conv(pk, pb, pf, d);
                return g2.value(ad::sum_all(ad::mul(o, o)))[0];
            };
        };
        CHECK(max_rel_err(g.grad(kv), numeric_grad(make_eval(0), kern)) < 1e-5);
        CHECK(max_rel_err(g.grad(bv), numeric_grad(make_eval(1), bias)) < 1e-6);
        CHECK(max_rel_err(g.grad(fv), numeric_grad(make_eval(2), field)) < 1e-5);
    }

    // grads for the per-instance-field variant
    {
        ad::Graph g;
        auto kv = g.leaf(kern, true);
        auto bv = g.leaf(bias, true);
        auto fv = g.leaf(fields, true);
        auto out = ad::inst_conv_per(kv, bv, fv, d);
        auto loss = ad::sum_all(ad::mul(out, out));
        g.backward(loss);
        auto make_eval = [&](int which) {
            return [&, which](const Tensor& probe) {
                ad::Graph g2;
                auto pk = g2.leaf(which == 0 ? probe : kern, false);
                auto pb = g2.leaf(which == 1 ? probe : bias, false);
                auto pf = g2.leaf(which == 2 ? probe : fields, false);
                auto o = ad::inst_conv_per(pk, pb, pf, d);
                return g2.value(ad::sum_all(ad::mul(o, o)))[0];
            };
        };
        CHECK(max_rel_err(g.grad(kv), numeric_grad(make_eval(0), kern)) < 1e-5);
        CHECK(max_rel_err(g.grad(bv), numeric_grad(make_eval(1), bias)) < 1e-6);
        CHECK(max_rel_err(g.grad(fv), numeric_grad(make_eval(2), fields)) < 1e-5);
    }
}

TEST_CASE("conv1x1_batch and softmax_channels") {
    Rng rng(29);
    int n = 2, d = 4, hw = 5, k = 3;
    Tensor w = random_tensor({k, d}, rng);
    Tensor b = random_tensor({k}, rng);
    Tensor fields = random_tensor({n, d, hw}, rng);

    ad::Graph g;
    auto wv = g.leaf(w, true);
    auto bv = g.leaf(b, true);
    auto fv = g.leaf(fields, true);
    auto logits = ad::conv1x1_batch(wv, bv, fv);
    auto probs = ad::softmax_channels(logits);
    const Tensor& pv = g.value(probs);
    for (int i = 0; i < n; ++i)
        for (int x = 0; x < hw; ++x) {
            real s = 0;
            for (int c = 0; c < k; ++c) s += pv.at(i, c, x);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }

    auto loss = ad::sum_all(ad::mul(probs, probs));
    g.backward(loss);
    auto make_eval = [&](int which) {
        return [&, which](const Tensor& probe) {
            ad::Graph g2;
            auto pw = g2.leaf(which == 0 ? probe : w, false);
            auto pb = g2.leaf(which == 1 ? probe : b, false);
            auto pf = g2.leaf(which == 2 ? probe : fields, false);
            auto p = ad::softmax_channels(ad::conv1x1_batch(pw, pb, pf));
            return g2.value(ad::sum_all(ad::mul(p, p)))[0];
        };
    };
    CHECK(max_rel_err(g.grad(wv), numeric_grad(make_eval(0), w)) < 1e-5);
    CHECK(max_rel_err(g.grad(bv), numeric_grad(make_eval(1), b)) < 1e-5);
    CHECK(max_rel_err(g.grad(fv), numeric_grad(make_eval(2), fields)) < 1e-5);
}

TEST_CASE("rows_scale_outer: value and grads") {
    Rng rng(31);
    Tensor rows = random_tensor({3, 5}, rng);
    Tensor s = random_tensor({2, 3}, rng);

    ad::Graph g;
    auto rv = g.leaf(rows, true);
    auto sv = g.leaf(s, true);
    auto out = ad::rows_scale_outer(rv, sv);
    CHECK(g.value(out).at(1, 2, 3) == doctest::Approx(s.at(1, 2) * rows.at(2, 3)));

    auto loss = ad::sum_all(ad::mul(out, out));
    g.backward(loss);
    auto eval_r = [&](const Tensor& probe) {
        ad::Graph g2;
        auto o = ad::rows_scale_outer(g2.leaf(probe, false), g2.leaf(s, false));
        return g2.value(ad::sum_all(ad::mul(o, o)))[0];
    };
    auto eval_s = [&](const Tensor& probe) {
        ad::Graph g2;
        auto o = ad::rows_scale_outer(g2.leaf(rows, false), g2.leaf(probe, false));
        return g2.value(ad::sum_all(ad::mul(o, o)))[0];
    };
    CHECK(max_rel_err(g.grad(rv), numeric_grad(eval_r, rows)) < 1e-5);
    CHECK(max_rel_err(g.grad(sv), numeric_grad(eval_s, s)) < 1e-5);
}

TEST_CASE("pool_weighted: uniform weights give plain mean, zero weights gate to zero") {
    Rng rng(37);
    Tensor field = random_tensor({3, 8}, rng);

    ad::Graph g;
    auto ones = g.constant(Tensor::full({8}, 1));
    auto pooled = ad::pool_weighted(g.constant(field), ones);
    for (int r = 0; r < 3; ++r) {
        real mean = 0;
        for (int x = 0; x < 8; ++x) mean += field.at(r, x);
        mean /= 8;
        CHECK(g.value(pooled)[r] == doctest::Approx(mean).epsilon(1e-12));
    }

    auto zeros = g.constant(Tensor({8}));
    auto gated = ad::pool_weighted(g.constant(field), zeros);
    for (int r = 0; r < 3; ++r) CHECK(g.value(gated)[r] == 0.0);

    // grads wrt field and weights
    Tensor w = random_tensor({8}, rng, 0.1, 1.0);
    ad::Graph g2;
    auto fv = g2.leaf(field, true);
    auto wv = g2.leaf(w, true);
    auto p = ad::pool_weighted(fv, wv);
    auto loss = ad::dot(p, p);
    g2.backward(loss);
    auto eval_f = [&](const Tensor& probe) {
        ad::Graph g3;
        auto pp = ad::pool_weighted(g3.leaf(probe, false), g3.leaf(w, false));
        return g3.value(ad::dot(pp, pp))[0];
    };
    auto eval_w = [&](const Tensor& probe) {
        ad::Graph g3;
        auto pp = ad::pool_weighted(g3.leaf(field, false), g3.leaf(probe, false));
        return g3.value(ad::dot(pp, pp))[0];
    };
    CHECK(max_rel_err(g2.grad(fv), numeric_grad(eval_f, field)) < 1e-5);
    CHECK(max_rel_err(g2.grad(wv), numeric_grad(eval_w, w)) < 1e-5);
}

TEST_CASE("cosine: identical, orthogonal, antiparallel, zero guard, grads") {
    ad::Graph g;
    auto u = g.constant(Tensor::from({3}, {1, 2, 3}));
    auto v = g.constant(Tensor::from({3}, {-1, -2, -3}));
    auto w = g.constant(Tensor::from({3}, {2, -1, 0}));
    auto z = g.constant(Tensor({3}));
    CHECK(g.value(ad::cosine(u, u))[0] == doctest::Approx(1.0));
    CHECK(g.value(ad::cosine(u, v))[0] == doctest::Approx(-1.0));
    CHECK(g.value(ad::cosine(u, w))[0] == doctest::Approx(0.0));
    CHECK(g.value(ad::cosine(u, z))[0] == 0.0);

    Rng rng(41);
    Tensor a = random_tensor({6}, rng);
    Tensor b = random_tensor({6}, rng);
    ad::Graph g2;
    auto av = g2.leaf(a, true);
    auto bv = g2.leaf(b, true);
    auto c = ad::cosine(av, bv);
    g2.backward(c);
    auto eval_a = [&](const Tensor& probe) {
        ad::Graph g3;
        return g3.value(ad::cosine(g3.leaf(probe, false), g3.leaf(b, false)))[0];
    };
    auto eval_b = [&](const Tensor& probe) {
        ad::Graph g3;
        return g3.value(ad::cosine(g3.leaf(a, false), g3.leaf(probe, false)))[0];
    };
    CHECK(max_rel_err(g2.grad(av), numeric_grad(eval_a, a)) < 1e-5);
    CHECK(max_rel_err(g2.grad(bv), numeric_grad(eval_b, b)) < 1e-5);

    // cosine is invariant to positive rescaling
    ad::Graph g4;
    auto s1 = g4.value(ad::cosine(g4.constant(a), g4.constant(b)))[0];
    Tensor b2 = b;
    for (long i = 0; i < b2.numel(); ++i) b2[i] *= 3.7;
    auto s2 = g4.value(ad::cosine(g4.constant(a), g4.constant(b2)))[0];
    CHECK(s1 == doctest::Approx(s2).epsilon(1e-12));
}

TEST_CASE("cross entropy: analytic values and grads") {
    // uniform logits over K classes -> CE = ln K
    {
        ad::Graph g;
        auto logits = g.constant(Tensor({4, 5}));
        auto ce = ad::ce_rows_mean(logits, {0, 1, 2, 3});
        CHECK(g.value(ce)[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
    // one-hot-ish perfect predictions -> near zero
    {
        ad::Graph g;
        Tensor t({2, 3});
        t.at(0, 1) = 50;
        t.at(1, 2) = 50;
        auto ce = ad::ce_rows_mean(g.constant(t), {1, 2});
        CHECK(g.value(ce)[0] < 1e-6);
    }
    // weighted mean uses label weights
    {
        ad::Graph g;
        auto logits = g.constant(Tensor({2, 2}));
        auto ce = ad::ce_rows_mean(logits, {0, 1}, {1.0, 0.1});
        CHECK(g.value(ce)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }

    Rng rng(43);
    Tensor logits = random_tensor({5, 4}, rng, -2, 2);
    std::vector<int> labels{0, 3, 1, 2, 2};
    std::vector<real> weights{1.0, 0.5, 2.0, 0.1};
    ad::Graph g;
    auto lv = g.leaf(logits, true);
    auto ce = ad::ce_rows_mean(lv, labels, weights);
    g.backward(ce);
    auto eval = [&](const Tensor& probe) {
        ad::Graph g2;
        return g2.value(ad::ce_rows_mean(g2.leaf(probe, false), labels, weights))[0];
    };
    CHECK(max_rel_err(g.grad(lv), numeric_grad(eval, logits)) < 1e-5);

    // pixel variant
    Tensor plog = random_tensor({3, 6}, rng, -2, 2);
    std::vector<int> plabels{0, 1, 2, 1, 0, 2};
    ad::Graph g3;
    auto pv = g3.leaf(plog, true);
    auto pce = ad::ce_pixels_mean(pv, plabels);
    g3.backward(pce);
    auto peval = [&](const Tensor& probe) {
        ad::Graph g4;
        return g4.value(ad::ce_pixels_mean(g4.leaf(probe, false), plabels))[0];
    };
    CHECK(max_rel_err(g3.grad(pv), numeric_grad(peval, plog)) < 1e-5);
}

TEST_CASE("bce with logits: ln2 at zero logits, grads") {
    ad::Graph g;
    auto logits = g.constant(Tensor({4}));
    Tensor targets = Tensor::from({4}, {1, 1, 1, 1});
    CHECK(g.value(ad::bce_logits_mean(logits, targets))[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Rng rng(47);
    Tensor x = random_tensor({6}, rng, -2, 2);
    Tensor t = Tensor::from({6}, {0, 1, 0, 1, 1, 0});
    ad::Graph g2;
    auto xv = g2.leaf(x, true);
    auto loss = ad::bce_logits_mean(xv, t);
    g2.backward(loss);
    auto eval = [&](const Tensor& probe) {
        ad::Graph g3;
        return g3.value(ad::bce_logits_mean(g3.leaf(probe, false), t))[0];
    };
    CHECK(max_rel_err(g2.grad(xv), numeric_grad(eval, x)) < 1e-5);
}

TEST_CASE("smooth l1: quadratic inside unit interval, linear outside, grads") {
    ad::Graph g;
    Tensor target = Tensor::from({2}, {0, 0});
    auto near = g.constant(Tensor::from({2}, {0.4, 0}));
    CHECK(g.value(ad::smooth_l1_sum(near, target))[0] ==
          doctest::Approx(0.5 * 0.4 * 0.4).epsilon(1e-12));
    auto far = g.constant(Tensor::from({2}, {2.5, 0}));
    CHECK(g.value(ad::smooth_l1_sum(far, target))[0] == doctest::Approx(2.0).epsilon(1e-12));

    Rng rng(53);
    Tensor x = random_tensor({8}, rng, -2, 2);
    Tensor t = random_tensor({8}, rng, -2, 2);
    ad::Graph g2;
    auto xv = g2.leaf(x, true);
    auto loss = ad::smooth_l1_sum(xv, t);
    g2.backward(loss);
    auto eval = [&](const Tensor& probe) {
        ad::Graph g3;
        return g3.value(ad::smooth_l1_sum(g3.leaf(probe, false), t))[0];
    };
    CHECK(max_rel_err(g2.grad(xv), numeric_grad(eval, x)) < 1e-4);
}

TEST_CASE("composite graph: reuse of a node accumulates gradient") {
    Rng rng(59);
    Tensor x = random_tensor({3, 3}, rng);
    check_grad(
        [](ad::Graph& g, ad::Var v) {
            auto a = ad::relu(v);
            auto b = ad::sigmoid(v);
            auto c = ad::add(ad::mul(a, b), ad::scale(v, 0.5));
            return ad::mean_all(ad::mul(c, c));
        },
        x, 1e-5);
}

TEST_CASE("mean_rows and add_rowwise") {
    Rng rng(61);
    Tensor x = random_tensor({4, 3}, rng);
    ad::Graph g;
    auto m = ad::mean_rows(g.constant(x));
    for (int j = 0; j < 3; ++j) {
        real s = 0;
        for (int i = 0; i < 4; ++i) s += x.at(i, j);
        CHECK(g.value(m)[j] == doctest::Approx(s / 4).epsilon(1e-12));
    }
    check_grad(
        [](ad::Graph& g2, ad::Var v) {
            auto mr = ad::mean_rows(v);
            return ad::dot(mr, mr);
        },
        x);

    Tensor b = random_tensor({3}, rng);
    ad::Graph g5;
    auto xv = g5.leaf(x, true);
    auto bv = g5.leaf(b, true);
    auto out = ad::add_rowwise(xv, bv);
    auto loss = ad::sum_all(ad::mul(out, out));
    g5.backward(loss);
    auto eval_b = [&](const Tensor& probe) {
        ad::Graph g6;
        auto o = ad::add_rowwise(g6.leaf(x, false), g6.leaf(probe, false));
        return g6.value(ad::sum_all(ad::mul(o, o)))[0];
    };
    CHECK(max_rel_err(g5.grad(bv), numeric_grad(eval_b, b)) < 1e-6);
}

TEST_CASE("error paths: shape mismatches throw") {
    ad::Graph g;
    auto a = g.constant(Tensor({2, 3}));
    auto b = g.constant(Tensor({3, 2}));
    CHECK_THROWS_AS(ad::add(a, b), Error);
    CHECK_THROWS_AS(ad::matmul(a, a), Error);
    CHECK_THROWS_AS(ad::slice_cols(a, 2, 2), Error);
    CHECK_THROWS_AS(g.backward(a), Error);  // non-scalar root
}
