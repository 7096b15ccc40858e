#include "partparse/loss/objectives.hpp"

#include <cmath>

namespace partparse::losses {

namespace ad = partparse::ad;
using model::Branch;

GtTargets build_targets(const synth::LabeledScene& scene, int fh, int fw) {
    int H = scene.height(), W = scene.width();
    PP_CHECK(H % fh == 0 && W % fw == 0, "build_targets: grid must divide the image size");
    int by = H / fh, bx = W / fw;
    real cell = static_cast<real>(by) * bx;
    GtTargets t;
    t.fh = fh;
    t.fw = fw;
    t.C = synth::kNumParts;
    for (const auto& inst : scene.instances) {
        InstanceTarget it;
        it.coverage = Tensor({t.C, fh * fw});
        it.masks_bin = Tensor({t.C, fh * fw});
        it.label_map.assign(static_cast<size_t>(fh * fw), 0);
        it.silhouette = Tensor({fh * fw});
        for (int c = 0; c < t.C; ++c) {
            const synth::Mask& m = inst.part_masks[static_cast<size_t>(c)];
            for (int gy = 0; gy < fh; ++gy)
                for (int gx = 0; gx < fw; ++gx) {
                    long cnt = 0;
                    for (int y = gy * by; y < (gy + 1) * by; ++y)
                        for (int x = gx * bx; x < (gx + 1) * bx; ++x) cnt += m.at(y, x) ? 1 : 0;
                    real frac = cnt / cell;
                    it.coverage.at(c, gy * fw + gx) = frac;
                    it.masks_bin.at(c, gy * fw + gx) = frac > real(0.5) ? 1 : 0;
                }
        }
        for (int x = 0; x < fh * fw; ++x) {
            real total = 0, best = 0;
            int best_c = -1;
            for (int c = 0; c < t.C; ++c) {
                real f = it.coverage.at(c, x);
                total += f;
                if (f > best) {
                    best = f;
                    best_c = c;
                }
            }
            it.silhouette[x] = std::min(real(1), total);
            // a part wins the cell only if it also beats the uncovered remainder
            if (best_c >= 0 && best > 1 - total)
                it.label_map[static_cast<size_t>(x)] = best_c + 1;
        }
        it.presence.assign(static_cast<size_t>(t.C), false);
        for (int c = 0; c < t.C; ++c)
            it.presence[static_cast<size_t>(c)] = inst.part_presence[static_cast<size_t>(c)];
        it.box = Tensor::from({4}, {inst.box.cx, inst.box.cy, inst.box.w, inst.box.h});
        t.instances.push_back(std::move(it));
    }
    return t;
}

std::vector<Tensor> silhouettes_of(const GtTargets& t) {
    std::vector<Tensor> out;
    out.reserve(t.instances.size());
    for (const auto& it : t.instances) out.push_back(it.silhouette);
    return out;
}

std::vector<Tensor> boxes_of(const GtTargets& t) {
    std::vector<Tensor> out;
    out.reserve(t.instances.size());
    for (const auto& it : t.instances) out.push_back(it.box);
    return out;
}

PhiVectors phi_aggregate(ad::Graph& g, ad::Var rep, const GtTargets& targets,
                         const match::Assignment& assignment) {
    PhiVectors out;
    const Tensor& rv = g.value(rep);
    PP_CHECK(rv.rank() == 3, "phi_aggregate: rep must be [N,d,hw]");
    PP_CHECK(rv.dim(2) == targets.fh * targets.fw, "phi_aggregate: grid mismatch");
    for (auto [q, gi] : assignment.pairs) {
        const InstanceTarget& it = targets.instances[static_cast<size_t>(gi)];
        ad::Var field = ad::index_first(rep, q);
        std::vector<ad::Var> per_part(static_cast<size_t>(targets.C));
        for (int c = 0; c < targets.C; ++c) {
            if (!it.presence[static_cast<size_t>(c)]) continue;  // absent at full res
            real mass = 0;
            for (int x = 0; x < targets.fh * targets.fw; ++x) mass += it.masks_bin.at(c, x);
            if (mass <= 0) {
                ++out.skipped;  // present part vanished at feature resolution
                continue;
            }
            Tensor w({targets.fh * targets.fw});
            for (int x = 0; x < targets.fh * targets.fw; ++x) w[x] = it.masks_bin.at(c, x);
            per_part[static_cast<size_t>(c)] = ad::pool_weighted(field, g.constant(std::move(w)));
        }
        out.vecs.push_back(std::move(per_part));
    }
    return out;
}

std::optional<ad::Var> mean_cosine(ad::Graph& g, const PhiVectors& a, const PhiVectors& b) {
    PP_CHECK(a.vecs.size() == b.vecs.size(), "mean_cosine: pair count mismatch");
    std::vector<ad::Var> sims;
    for (size_t p = 0; p < a.vecs.size(); ++p) {
        PP_CHECK(a.vecs[p].size() == b.vecs[p].size(), "mean_cosine: part count mismatch");
        for (size_t c = 0; c < a.vecs[p].size(); ++c)
            if (a.vecs[p][c].valid() && b.vecs[p][c].valid())
                sims.push_back(ad::cosine(a.vecs[p][c], b.vecs[p][c]));
    }
    if (sims.empty()) return std::nullopt;
    return ad::scale(ad::add_n(sims), real(1) / static_cast<real>(sims.size()));
}

ad::Var loss_part(ad::Graph& g, ad::Var mask_logits, const GtTargets& targets,
                  const match::Assignment& assignment, long* warn_no_matches) {
    if (assignment.pairs.empty()) {
        if (warn_no_matches) ++(*warn_no_matches);
        return g.constant_scalar(0);
    }
    std::vector<ad::Var> terms;
    for (auto [q, gi] : assignment.pairs) {
        const InstanceTarget& it = targets.instances[static_cast<size_t>(gi)];
        terms.push_back(ad::ce_pixels_mean(ad::index_first(mask_logits, q), it.label_map));
    }
    return ad::scale(ad::add_n(terms), real(1) / static_cast<real>(terms.size()));
}

ad::Var loss_inv(ad::Graph& g, const PhiVectors& content, const PhiVectors& context,
                 const std::vector<std::pair<PhiVectors, PhiVectors>>& views) {
    std::vector<ad::Var> c_terms, t_terms;
    for (const auto& [vc, vt] : views) {
        if (auto tc = mean_cosine(g, content, vc))
            c_terms.push_back(ad::abs_of(ad::add_scalar(ad::scale(*tc, -1), 1)));
        if (auto tt = mean_cosine(g, context, vt))
            t_terms.push_back(ad::abs_of(ad::add_scalar(ad::scale(*tt, -1), 1)));
    }
    std::vector<ad::Var> sums;
    if (!c_terms.empty())
        sums.push_back(ad::scale(ad::add_n(c_terms), real(1) / static_cast<real>(c_terms.size())));
    if (!t_terms.empty())
        sums.push_back(ad::scale(ad::add_n(t_terms), real(1) / static_cast<real>(t_terms.size())));
    if (sums.empty()) return g.constant_scalar(0);
    return ad::add_n(sums);
}

ad::Var loss_det(ad::Graph& g, ad::Var cls_logits, ad::Var boxes,
                 std::optional<ad::Var> part_logits, const GtTargets& targets,
                 const match::Assignment& assignment, const LossWeights& w) {
    const Tensor& lv = g.value(cls_logits);
    int n = lv.dim(0);
    // person (0) / no-person (1) labels; unmatched queries carry a small weight
    std::vector<int> labels(static_cast<size_t>(n), 1);
    for (auto [q, gi] : assignment.pairs) labels[static_cast<size_t>(q)] = 0;
    ad::Var cls_term = ad::ce_rows_mean(cls_logits, labels, {real(1), w.no_person});
    std::vector<ad::Var> parts{ad::scale(cls_term, w.det_cls)};

    if (!assignment.pairs.empty()) {
        std::vector<ad::Var> box_terms;
        std::vector<ad::Var> presence_terms;
        for (auto [q, gi] : assignment.pairs) {
            const InstanceTarget& it = targets.instances[static_cast<size_t>(gi)];
            box_terms.push_back(ad::smooth_l1_sum(ad::row(boxes, q), it.box));
            if (part_logits) {
                Tensor pres({targets.C});
                for (int c = 0; c < targets.C; ++c)
                    pres[c] = it.presence[static_cast<size_t>(c)] ? 1 : 0;
                presence_terms.push_back(
                    ad::bce_logits_mean(ad::row(*part_logits, q), pres));
            }
        }
        real inv = real(1) / static_cast<real>(box_terms.size());
        parts.push_back(ad::scale(ad::add_n(box_terms), w.det_box * inv));
        if (!presence_terms.empty())
            parts.push_back(ad::scale(ad::add_n(presence_terms), w.det_presence * inv));
    }
    return ad::add_n(parts);
}

TotalLoss total_loss(ad::Graph& g, const model::Parser& parser,
                     const model::ForwardOutputs& orig,
                     const std::vector<model::ForwardOutputs>& intervened,
                     const GtTargets& targets, const match::Assignment& assignment,
                     const LossToggles& toggles, const LossWeights& weights) {
    (void)parser;
    TotalLoss out;
    out.breakdown.E = static_cast<int>(intervened.size());

    ad::Var det = loss_det(g, orig.cls_logits, orig.boxes,
                           toggles.use_cfs ? std::optional<ad::Var>(orig.part_logits)
                                           : std::nullopt,
                           targets, assignment, weights);

    // l_part: CE on whichever mask heads the arm produces
    std::vector<ad::Var> part_terms;
    if (!toggles.use_cfs) {
        part_terms.push_back(
            loss_part(g, orig.logits_fused, targets, assignment, &out.breakdown.warn_no_matches));
    } else {
        if (toggles.branch != Branch::context)
            part_terms.push_back(loss_part(g, orig.logits_content, targets, assignment,
                                           &out.breakdown.warn_no_matches));
        if (toggles.branch != Branch::content)
            part_terms.push_back(loss_part(g, orig.logits_context, targets, assignment,
                                           &out.breakdown.warn_no_matches));
    }
    ad::Var part = ad::scale(ad::add_n(part_terms), weights.part);

    // the pooled vectors feed both the diversity and invariance terms
    PhiVectors pc, pt;
    bool need_phi = toggles.use_div || (toggles.use_inv && !intervened.empty());
    if (need_phi) {
        PP_CHECK(toggles.use_cfs, "total_loss: representation terms require the factor heads");
        pc = phi_aggregate(g, orig.rep_content, targets, assignment);
        pt = phi_aggregate(g, orig.rep_context, targets, assignment);
        out.breakdown.phi_skipped += pc.skipped + pt.skipped;
    }

    // diversity: cosine between the content and context pooled vectors
    ad::Var div = part;
    if (toggles.use_div) {
        PP_CHECK(toggles.branch == Branch::both,
                 "total_loss: diversity term requires both factor branches");
        if (auto sim = mean_cosine(g, pc, pt))
            div = ad::add(ad::scale(*sim, weights.div_sim), part);
    }

    // invariance over the intervened views; they enter the objective only here
    ad::Var inv = g.constant_scalar(0);
    if (toggles.use_inv && !intervened.empty()) {
        std::vector<std::pair<PhiVectors, PhiVectors>> views;
        for (const auto& view : intervened) {
            PhiVectors vc = phi_aggregate(g, view.rep_content, targets, assignment);
            PhiVectors vt = phi_aggregate(g, view.rep_context, targets, assignment);
            out.breakdown.phi_skipped += vc.skipped + vt.skipped;
            views.emplace_back(std::move(vc), std::move(vt));
        }
        inv = ad::scale(loss_inv(g, pc, pt, views), weights.inv);
    }

    out.total = ad::add(ad::add(det, div), inv);
    out.breakdown.l_det = g.value(det)[0];
    out.breakdown.l_part = g.value(part)[0];
    out.breakdown.l_div = g.value(div)[0];
    out.breakdown.l_inv = g.value(inv)[0];
    out.breakdown.total = g.value(out.total)[0];
    PP_CHECK(std::isfinite(out.breakdown.total),
             "total_loss: non-finite objective (det=" + std::to_string(out.breakdown.l_det) +
                 " div=" + std::to_string(out.breakdown.l_div) +
                 " inv=" + std::to_string(out.breakdown.l_inv) + ")");
    return out;
}

}  // namespace partparse::losses
