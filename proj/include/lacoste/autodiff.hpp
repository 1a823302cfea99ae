#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "lacoste/tensor.hpp"

namespace lacoste::ad {

struct Node;
using Var = std::shared_ptr<Node>;

// One node of a dynamically built computation graph. Graphs are per-call and
// thread-confined; gradients never live on the node itself (backward() returns
// them in a map), so shared parameter leaves can be read concurrently.
struct Node {
    Tensor val;
    bool needs_grad = false;
    std::vector<Var> inputs;
    // Accumulates into grad_in[i] (zero-initialized, nullptr when input i does
    // not need a gradient).
    std::function<void(const Tensor& grad_out, const std::vector<Var>& inputs,
                       const std::vector<Tensor*>& grad_in)>
        backward;
    const char* op = "leaf";
};

Var leaf(Tensor value, bool needs_grad = false);
inline Var constant(Tensor value) { return leaf(std::move(value), false); }

// While alive on this thread, newly built nodes drop their backward closures
// (pure inference: no graph retention).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

using GradMap = std::unordered_map<Node*, Tensor>;

// Reverse-mode sweep from a scalar root. Returns gradients for every node that
// needs one; look up parameter leaves by Node*.
GradMap backward(const Var& root);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var affine(const Var& x, double k, double c);  // k*x + c
Var neg(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);
Var exp(const Var& x);

// ---- reductions ----
Var sum(const Var& x);   // -> scalar {1}
Var mean(const Var& x);  // -> scalar {1}
Var add_all(const std::vector<Var>& xs);
Var scale_sum(const std::vector<Var>& xs, const std::vector<double>& ks);

// ---- shape ----
Var reshape(const Var& x, std::vector<int64_t> shape);
Var transpose(const Var& x);                       // [n,m] -> [m,n]
Var slice_rows(const Var& x, int64_t begin, int64_t count);
Var index_rows(const Var& x, std::vector<int64_t> idx);
Var concat_rows(const std::vector<Var>& xs);
Var col_slice(const Var& x, int64_t begin, int64_t count);
Var concat_cols(const std::vector<Var>& xs);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);            // [n,k]x[k,m]
Var linear(const Var& x, const Var& w, const Var& b);  // x:[n,di] w:[do,di] b:[do] or null
Var add_rowvec(const Var& x, const Var& v);        // broadcast [d] over rows of [n,d]
Var add_scalar_var(const Var& x, const Var& s);    // broadcast scalar {1} over x

// ---- normalization / probability ----
Var normalize_rows(const Var& x);  // rows scaled to unit Euclidean norm
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var softmax_rows(const Var& x);
// Key-masked row softmax: keep[j]==0 excludes column j; fully masked rows
// produce an all-zero row (context vector becomes zero downstream).
Var masked_softmax_rows(const Var& x, const std::vector<uint8_t>& keep);

// ---- losses ----
// Weighted cross entropy over rows of logits [n,C]: sum_i w_i * NLL(row_i, t_i).
Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets,
                       const std::vector<double>& weights);
Var bce_with_logits(const Var& logits, const Tensor& targets, bool mean_reduce);
// 1 - 2*sum(q*y)/(sum(q)+sum(y)) with q = sigmoid(logits); no smoothing term.
Var dice_loss_with_logits(const Var& logits, const Tensor& targets);

// ---- image ops (CHW layout) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w);

// ---- masking ----
// Zeroes entries where keep==0 (per-pixel mask broadcast over channels when
// x is [C,H,W] and keep has H*W entries; elementwise when sizes match).
Var apply_mask(const Var& x, const std::vector<uint8_t>& keep);
// x:[C,H,W] * w:[H,W] broadcast over channels.
Var mul_spatial(const Var& x, const Var& w);
// Per-pixel cosine similarity field between a and b: [C,H,W]x[C,H,W] -> [H,W].
// Zero (with zero gradient) where valid_b==0 or either norm < eps.
Var cosine_weight(const Var& a, const Var& b, const std::vector<uint8_t>& valid_b,
                  double eps = 1e-8);

// Horizontal-disparity gather plan shared by the value-level geometry warp and
// the differentiable warp (single source of semantic truth).
struct WarpPlan {
    int64_t h = 0, w = 0;
    std::vector<int64_t> idx0, idx1;   // flat source indices (per output pixel)
    std::vector<double> w0, w1;        // bilinear weights
    std::vector<uint8_t> valid;        // sample usable
};
Var warp_with_plan(const Var& x, const WarpPlan& plan);  // x:[C,H,W]

}  // namespace lacoste::ad
