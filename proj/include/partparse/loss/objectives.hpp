#pragma once

#include <optional>
#include <vector>

#include "partparse/autodiff.hpp"
#include "partparse/match/assign.hpp"
#include "partparse/model/net.hpp"
#include "partparse/synth/scene.hpp"

namespace partparse::losses {

// Ground truth reduced to the feature grid. Coverage is the exact area
// fraction of each full-resolution mask inside each cell; binary masks
// threshold coverage at 0.5 (the rule used by the Phi pooling terms); the
// label map assigns each cell to the part with the largest coverage provided
// it beats the uncovered remainder, so thin parts survive downsampling.
struct InstanceTarget {
    Tensor coverage;           // [C, hw]
    Tensor masks_bin;          // [C, hw], entries 0/1
    std::vector<int> label_map;  // hw values in 0..C (0 = background)
    Tensor silhouette;         // [hw] = clamp(sum_c coverage, 0, 1)
    std::vector<bool> presence;  // full-resolution part presence
    Tensor box;                // [4] normalized cx cy w h
};

struct GtTargets {
    int fh = 0, fw = 0, C = 0;
    std::vector<InstanceTarget> instances;
};

GtTargets build_targets(const synth::LabeledScene& scene, int fh, int fw);

// Convenience for the matcher.
std::vector<Tensor> silhouettes_of(const GtTargets& t);
std::vector<Tensor> boxes_of(const GtTargets& t);

struct LossToggles {
    bool use_cfs = true;
    bool use_div = true;
    bool use_inv = true;
    model::Branch branch = model::Branch::both;
};

struct LossWeights {
    real det_cls = 1;
    real det_presence = 1;
    real det_box = 1;
    real part = 1;
    real div_sim = 1;
    real inv = 1;
    real no_person = 0.1;  // class weight for unmatched queries in the person CE
};

struct LossBreakdown {
    real l_part = 0;
    real l_div = 0;   // similarity term + l_part when enabled, else l_part
    real l_inv = 0;
    real l_det = 0;
    real total = 0;
    int E = 0;                 // intervened views used
    long phi_skipped = 0;      // present parts that vanished at feature resolution
    long warn_no_matches = 0;  // batches evaluated without any matched instance
};

// Phi aggregation: masked average of a spatial representation under the
// ground-truth binary masks, for matched instances. Entries are invalid for
// absent parts and for parts whose downsampled mask is empty (those are
// counted in skipped).
struct PhiVectors {
    // [pair][part] -> Var of shape [d]; .valid() marks usable entries
    std::vector<std::vector<ad::Var>> vecs;
    long skipped = 0;
};

PhiVectors phi_aggregate(ad::Graph& g, ad::Var rep, const GtTargets& targets,
                         const match::Assignment& assignment);

// Mean cosine similarity over pairs/parts where both sides are valid.
// Returns nothing when no common entries exist.
std::optional<ad::Var> mean_cosine(ad::Graph& g, const PhiVectors& a, const PhiVectors& b);

ad::Var loss_part(ad::Graph& g, ad::Var mask_logits, const GtTargets& targets,
                  const match::Assignment& assignment, long* warn_no_matches = nullptr);

// Invariance objective: mean over views of |1 - T(content, view content)| plus
// the same over the context branch. Empty view list gives a constant zero.
ad::Var loss_inv(ad::Graph& g, const PhiVectors& content, const PhiVectors& context,
                 const std::vector<std::pair<PhiVectors, PhiVectors>>& views);

ad::Var loss_det(ad::Graph& g, ad::Var cls_logits, ad::Var boxes,
                 std::optional<ad::Var> part_logits, const GtTargets& targets,
                 const match::Assignment& assignment, const LossWeights& w);

struct TotalLoss {
    ad::Var total;
    LossBreakdown breakdown;
};

// Assembles the full objective for one scene: detection terms on the original
// view, segmentation CE on the enabled mask heads, the representation
// similarity term, and the invariance term over the intervened views (which
// enter only here). Non-finite losses abort with diagnostics.
TotalLoss total_loss(ad::Graph& g, const model::Parser& parser,
                     const model::ForwardOutputs& orig,
                     const std::vector<model::ForwardOutputs>& intervened,
                     const GtTargets& targets, const match::Assignment& assignment,
                     const LossToggles& toggles, const LossWeights& weights);

}  // namespace partparse::losses
