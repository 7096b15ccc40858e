#include "partparse/match/assign.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace partparse::match {

Assignment solve_assignment(const Tensor& cost) {
    PP_CHECK(cost.rank() == 2, "solve_assignment: cost must be [queries, gts]");
    int n = cost.dim(0), m = cost.dim(1);
    PP_CHECK(m <= n,
             "solve_assignment: more ground-truth instances than queries; increase the "
             "query count N");
    PP_CHECK(m <= 16, "solve_assignment: subset DP supports at most 16 ground truths");
    Assignment out;
    if (m == 0) {
        for (int q = 0; q < n; ++q) out.unmatched_queries.push_back(q);
        return out;
    }

    const real inf = std::numeric_limits<real>::infinity();
    int full = (1 << m) - 1;
    // dp[q][mask]: min cost of assigning the gts in mask to queries q..n-1
    std::vector<std::vector<real>> dp(static_cast<size_t>(n + 1),
                                      std::vector<real>(static_cast<size_t>(full + 1), inf));
    dp[static_cast<size_t>(n)][0] = 0;
    for (int q = n - 1; q >= 0; --q) {
        for (int mask = 0; mask <= full; ++mask) {
            real best = dp[static_cast<size_t>(q + 1)][static_cast<size_t>(mask)];
            for (int g = 0; g < m; ++g) {
                if (!(mask & (1 << g))) continue;
                real c = cost.at(q, g) +
                         dp[static_cast<size_t>(q + 1)][static_cast<size_t>(mask ^ (1 << g))];
                best = std::min(best, c);
            }
            dp[static_cast<size_t>(q)][static_cast<size_t>(mask)] = best;
        }
    }
    PP_CHECK(std::isfinite(dp[0][static_cast<size_t>(full)]),
             "solve_assignment: infeasible cost matrix");

    // Reconstruct greedily: assigning at the earliest query (and the lowest gt)
    // whenever that preserves optimality yields the lexicographically smallest
    // optimal pair list. Candidate sums reuse the exact dp expressions, so the
    // float comparisons are exact.
    int mask = full;
    for (int q = 0; q < n && mask != 0; ++q) {
        real here = dp[static_cast<size_t>(q)][static_cast<size_t>(mask)];
        for (int g = 0; g < m; ++g) {
            if (!(mask & (1 << g))) continue;
            real c = cost.at(q, g) +
                     dp[static_cast<size_t>(q + 1)][static_cast<size_t>(mask ^ (1 << g))];
            if (c == here) {
                out.pairs.emplace_back(q, g);
                mask ^= (1 << g);
                break;
            }
        }
    }
    std::vector<bool> used(static_cast<size_t>(n), false);
    for (auto [q, g] : out.pairs) used[static_cast<size_t>(q)] = true;
    for (int q = 0; q < n; ++q)
        if (!used[static_cast<size_t>(q)]) out.unmatched_queries.push_back(q);
    return out;
}

namespace {

real soft_iou(const real* s, const real* g, long n) {
    real num = 0, den = 0;
    for (long i = 0; i < n; ++i) {
        num += std::min(s[i], g[i]);
        den += std::max(s[i], g[i]);
    }
    if (den <= 0) return 1;
    return num / den;
}

}  // namespace

Assignment match(const Tensor& cls_logits, const Tensor& boxes, const Tensor& fused_probs,
                 const std::vector<Tensor>& gt_silhouettes, const std::vector<Tensor>& gt_boxes,
                 const CostWeights& weights) {
    PP_CHECK(cls_logits.rank() == 2 && cls_logits.dim(1) == 2, "match: cls_logits must be [N,2]");
    PP_CHECK(boxes.rank() == 2 && boxes.dim(1) == 4, "match: boxes must be [N,4]");
    PP_CHECK(fused_probs.rank() == 3, "match: fused_probs must be [N,K,hw]");
    PP_CHECK(gt_silhouettes.size() == gt_boxes.size(), "match: gt size mismatch");
    int n = cls_logits.dim(0);
    int m = static_cast<int>(gt_silhouettes.size());
    int hw = fused_probs.dim(2);

    Tensor cost({n, std::max(m, 1)});
    std::vector<real> sil(static_cast<size_t>(hw));
    for (int q = 0; q < n; ++q) {
        // softmax over the two logits; column 0 is person
        real a = cls_logits.at(q, 0), b = cls_logits.at(q, 1);
        real mx = std::max(a, b);
        real pa = std::exp(a - mx);
        real p_person = pa / (pa + std::exp(b - mx));
        for (int x = 0; x < hw; ++x) {
            real bg = fused_probs.at(q, 0, x);
            sil[static_cast<size_t>(x)] = real(1) - bg;
        }
        for (int g = 0; g < m; ++g) {
            const Tensor& gs = gt_silhouettes[static_cast<size_t>(g)];
            PP_CHECK(gs.numel() == hw, "match: silhouette size mismatch");
            real l1 = 0;
            for (int k = 0; k < 4; ++k)
                l1 += std::abs(boxes.at(q, k) - gt_boxes[static_cast<size_t>(g)][k]);
            real iou = soft_iou(sil.data(), gs.data(), hw);
            cost.at(q, g) =
                -weights.w_cls * p_person + weights.w_box * l1 + weights.w_mask * (1 - iou);
        }
    }
    if (m == 0) cost = Tensor({n, 0});
    return solve_assignment(cost);
}

}  // namespace partparse::match
