#pragma once

#include <utility>
#include <vector>

#include "partparse/synth/scene.hpp"
#include "partparse/tensor.hpp"

namespace partparse::match {

struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (query_index, gt_index), query-ascending
    std::vector<int> unmatched_queries;
};

struct CostWeights {
    real w_cls = 2;   // on (1 - person probability)... applied as -w_cls * p(person)
    real w_box = 5;   // L1 box distance
    real w_mask = 2;  // 1 - soft mask IoU
};

// Globally optimal one-to-one assignment for a [num_queries x num_gt] cost
// matrix. Exact subset DP (num_gt <= ~16); among equal-cost optima the pair
// list sorted by query index is lexicographically smallest, so ties resolve
// toward the lowest (query_index, gt_index).
Assignment solve_assignment(const Tensor& cost);

// Builds the DETR-style matching cost from detection outputs and ground truth
// reduced to the feature grid:
//   cost = -w_cls * p(person) + w_box * L1(box, gt_box) + w_mask * (1 - softIoU)
// where softIoU compares the predicted foreground silhouette (1 - background
// probability) with the ground-truth coverage silhouette.
Assignment match(const Tensor& cls_logits, const Tensor& boxes, const Tensor& fused_probs,
                 const std::vector<Tensor>& gt_silhouettes, const std::vector<Tensor>& gt_boxes,
                 const CostWeights& weights = {});

}  // namespace partparse::match
