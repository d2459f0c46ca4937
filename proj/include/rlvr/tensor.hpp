#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rlvr {

// Reverse-mode autodiff over dense row-major tensors (rank 1 or 2).
// Values are doubles in memory; checkpoints store 32-bit floats.
//
// Ops build a DAG of shared_ptr nodes. An op records parents and a grad_fn
// only when some input requires grad, so inference paths carry no graph.
// backward(loss) propagates through the DAG with per-node scratch buffers and
// accumulates into the .grad of requires-grad leaves; repeated calls without
// zero_grad() keep accumulating.

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

class Tensor {
public:
    std::vector<int> shape;    // {n} or {rows, cols}
    std::vector<double> v;     // values, row-major
    std::vector<double> grad;  // same size as v when requires_grad
    bool requires_grad = false;

    std::vector<TensorPtr> parents;
    // grad_fn(node, dout, pgrads): scatter dout into pgrads[i] (nullptr when
    // that parent does not need grad). pgrads[i] is pre-sized and zero-based
    // per backward pass.
    std::function<void(const Tensor&, const std::vector<double>&, const std::vector<std::vector<double>*>&)> grad_fn;

    int64_t size() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.size() == 2 ? shape[1] : shape[0]; }
    bool is_scalar() const { return size() == 1; }
    double item() const;
    bool is_leaf() const { return requires_grad && !grad_fn; }
    void zero_grad();

    static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    static TensorPtr scalar(double x, bool requires_grad = false);
    static TensorPtr randn(std::vector<int> shape, class Rng& rng, double stdev, bool requires_grad = false);
};

// --- primitives -------------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& a);
// add: same shape, or b a length-cols vector broadcast over rows, or b scalar.
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
// mul: elementwise same shape, or b scalar.
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr exp_op(const TensorPtr& a);
TensorPtr log_op(const TensorPtr& a);
TensorPtr relu(const TensorPtr& a);
TensorPtr softmax_rows(const TensorPtr& a);
// Masked softmax over allowed entries per row (allow is row-major 0/1, same
// shape); disallowed outputs are exactly 0. A row must allow something.
TensorPtr softmax_rows_masked(const TensorPtr& a, std::vector<uint8_t> allow);
TensorPtr log_softmax_rows(const TensorPtr& a);
// y_ij = a_ij / sqrt(mean_j a_ij^2 + eps) * gain_j
TensorPtr rms_norm_rows(const TensorPtr& a, const TensorPtr& gain, double eps = 1e-5);
// y_i = a_i / sqrt(sum_j a_ij^2 + eps)
TensorPtr l2_normalize_rows(const TensorPtr& a, double eps = 1e-12);
// Gather rows of table by id; backward scatter-adds.
TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids);
// out[i] = a[i, ids[i]]
TensorPtr select_cols(const TensorPtr& a, const std::vector<int>& ids);
// Columns [c0, c1) of a matrix.
TensorPtr slice_cols(const TensorPtr& a, int c0, int c1);
// Rows [r0, r1) of a matrix.
TensorPtr slice_rows(const TensorPtr& a, int r0, int r1);
// -(sum_t mask_t * log softmax(logits_t)[targets_t]) / sum_t mask_t
TensorPtr masked_cross_entropy(const TensorPtr& logits, const std::vector<int>& targets,
                               const std::vector<uint8_t>& mask);
// Keep the k largest entries per row (ties to the lower index), zero the rest;
// gradient flows through kept coordinates only.
TensorPtr topk_rows(const TensorPtr& a, int k);
TensorPtr sum_all(const TensorPtr& a);
TensorPtr mean_all(const TensorPtr& a);
// Per-token PPO clipped surrogate: s_t = min(r_t*adv_t, clip(r_t,1-eps,1+eps)*adv_t)
// with r_t = exp(new_logprob_t - old_logprob_t); old logprobs and advantages
// are constants. Ties at the kink take the unclipped branch.
TensorPtr ppo_token_surrogate(const TensorPtr& new_logprob, const std::vector<double>& old_logprob,
                              const std::vector<double>& advantage, double clip_eps);

void backward(const TensorPtr& loss);

}  // namespace rlvr
