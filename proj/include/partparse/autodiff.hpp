#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "partparse/tensor.hpp"

namespace partparse::ad {

class Graph;

// Lightweight handle into a Graph's tape.
struct Var {
    Graph* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
};

// Eager tape: each op computes its value immediately and records a backward
// closure. Node order is a topological order by construction, so backward()
// is a single reverse sweep.
class Graph {
public:
    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var constant_scalar(real v) { return leaf(Tensor::scalar(v), false); }

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

    // Zero tensor if the node never received gradient.
    const Tensor& grad(Var v);

    void backward(Var root);
    void clear();
    size_t size() const { return nodes_.size(); }

    // --- op plumbing ---
    Var make(Tensor value, bool needs_grad, std::function<void(Graph&)> back);
    Tensor& grad_buf(int id);
    bool grad_ready(int id) const { return nodes_[static_cast<size_t>(id)].grad_alloc; }
    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Graph&)> back;  // empty for leaves/consts
        bool needs_grad = false;
        bool grad_alloc = false;
    };
    // deque keeps node references stable while the tape grows
    std::deque<Node> nodes_;
    Tensor zero_like_;  // scratch returned by grad() when untouched
};

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, real s);
Var add_scalar(Var a, real s);
Var add_n(const std::vector<Var>& xs);
Var relu(Var a);
Var sigmoid(Var a);
Var clamp(Var a, real lo, real hi);
Var abs_of(Var a);

// ---- shape ----
Var reshape(Var a, std::vector<int> shape);
Var transpose(Var a);                    // [m,n] -> [n,m]
Var slice_cols(Var a, int c0, int c1);   // [m,n] -> [m,c1-c0]
Var concat_cols(const std::vector<Var>& xs);
Var row(Var a, int r);                   // [m,n] -> [n]
Var index_first(Var a, int i);           // [N,...] -> [...]
Var stack_rows(const std::vector<Var>& xs);  // k vectors [n] -> [k,n]

// ---- linear algebra ----
Var matmul(Var a, Var b);                 // [m,k]x[k,n] -> [m,n]
Var add_rowwise(Var a, Var v);            // [m,n] + [n] broadcast over rows
Var linear(Var x, Var w, Var b);          // x[m,k] * w[k,n] + b[n]
Var dot(Var u, Var v);                    // [n]·[n] -> scalar

// ---- reductions ----
Var sum_all(Var a);
Var mean_all(Var a);
Var mean_rows(Var a);                     // [m,n] -> [n], mean over rows

// ---- normalizers ----
Var softmax_rows(Var a);                  // softmax over last dim of [m,n]
Var log_softmax_rows(Var a);
Var layer_norm_rows(Var a, Var gain, Var bias, real eps = 1e-5);

// ---- conv ----
Var conv2d(Var x, Var w, Var b, int stride, int pad);  // x[C,H,W], w[K,C,kh,kw], b[K]

// ---- batched instance ops (first axis = instance) ----
// out[i] = kernels[i] (dxd) * field + bias[i], field shape [d,hw]
Var inst_conv(Var kernels, Var bias, Var field, int d);
// out[i] = kernels[i] (dxd) * fields[i] + bias[i], fields shape [N,d,hw]
Var inst_conv_per(Var kernels, Var bias, Var fields, int d);
// out[n,k,:] = W[k,:] * fields[n] + b[k], W [K,d], fields [N,d,hw]
Var conv1x1_batch(Var w, Var b, Var fields);
// softmax over channel axis of [N,K,hw]
Var softmax_channels(Var fields);
// out[n,c,:] = s[n,c] * rows[c,:], rows [C,hw], s [N,C]
Var rows_scale_outer(Var rows, Var s);

// ---- pooling / similarity ----
// Weighted spatial mean: sum_x field[:,x]*w[x] / sum_x w[x]; zero vector when
// the weight mass is ~0. field [d,hw], w [hw] -> [d]. Sequential summation
// (matches explicit-loop oracles bit for bit).
Var pool_weighted(Var field, Var w, real eps = 1e-12);
// cosine similarity with zero-vector guard -> 0
Var cosine(Var u, Var v, real eps = 1e-12);

// ---- losses ----
// mean over rows of CE(softmax(logits[r]), labels[r]); class_weights optional
// (weighted mean: sum w*ce / sum w)
Var ce_rows_mean(Var logits, const std::vector<int>& labels,
                 const std::vector<real>& class_weights = {});
// per-pixel CE for one instance: logits [K,hw], labels[hw] in 0..K-1
Var ce_pixels_mean(Var logits, const std::vector<int>& labels);
// elementwise binary CE with logits, mean over all entries
Var bce_logits_mean(Var logits, const Tensor& targets);
// smooth-L1 summed over entries: 0.5x^2 (|x|<1) else |x|-0.5
Var smooth_l1_sum(Var pred, const Tensor& target);

}  // namespace partparse::ad
