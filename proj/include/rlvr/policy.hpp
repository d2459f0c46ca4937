#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rlvr/checkpoint.hpp"
#include "rlvr/rng.hpp"
#include "rlvr/tensor.hpp"

namespace rlvr {

struct PolicyConfig {
    int vocab = 48;
    int dim = 64;
    int layers = 2;
    int heads = 4;
    int max_seq = 128;
    int tap_layer = 1;  // residual stream exported after this block (1-based)
    bool tied_unembedding = true;
};

// Tiny decoder-only attention LM with per-head projection matrices, RMSNorm
// blocks, a ReLU MLP, learned positions, and a tied unembedding.
struct PolicyParams {
    PolicyConfig cfg;
    TensorPtr tok_embed;  // {V, d}
    TensorPtr pos_embed;  // {max_seq, d}
    struct Layer {
        TensorPtr attn_norm_gain;           // {d}
        std::vector<TensorPtr> wq, wk, wv;  // per head {d, dh}
        std::vector<TensorPtr> wo;          // per head {dh, d}
        TensorPtr mlp_norm_gain;            // {d}
        TensorPtr w1;                       // {d, 4d}
        TensorPtr w2;                       // {4d, d}
    };
    std::vector<Layer> layers;
    TensorPtr final_norm_gain;  // {d}

    std::vector<TensorPtr> parameters() const;
    std::vector<std::pair<std::string, TensorPtr>> named_parameters() const;
    void set_requires_grad(bool on);
    void zero_grad();
    PolicyParams clone() const;  // deep copy (used for the frozen reference)

    Checkpoint to_checkpoint() const;
    static PolicyParams from_checkpoint(const Checkpoint& ck);
};

struct RolloutSample {
    std::vector<int> prompt;
    std::vector<int> response;          // includes the end token when emitted
    std::vector<double> logprobs;       // per response token, temperature-1 log-softmax
    double reward = 0.0;
    double temperature = 1.0;
    uint64_t rng_stream = 0;
};

// Deterministic initialization; identical (config, seed) gives bit-identical
// parameters.
PolicyParams init_policy(const PolicyConfig& cfg, uint64_t seed);

// Full forward pass returning logits {T, V}; when taps is non-null it receives
// the residual stream after every block ([layer][t*d + j]).
struct ForwardResult {
    TensorPtr logits;                         // {T, V}
    std::vector<TensorPtr> residual_taps;     // per layer, {T, d}
};
ForwardResult forward_logits(const PolicyParams& params, const std::vector<int>& tokens);

// Graph-free forward used for sampling and evaluation. Scratch buffers live in
// the workspace so repeated calls do not allocate.
class InferenceWorkspace {
public:
    // Logits for every position; returns pointer to row-major {T, V} buffer.
    const std::vector<double>& forward(const PolicyParams& params, const std::vector<int>& tokens);
    // Residual stream after the given block (1-based), {T, d}; call after forward.
    const std::vector<double>& tap(int layer) const;

private:
    std::vector<double> x_, scratch_norm_, q_, k_, v_, att_, head_out_, mlp_;
    std::vector<std::vector<double>> taps_;
    std::vector<double> logits_;
    friend class Sampler;
};

// y ~ pi_theta(.|x). Temperature 0 decodes greedily with ties broken by the
// lowest token id. Recorded per-token log-probabilities are the temperature-1
// log-softmax of the final logits at the chosen token.
RolloutSample sample_rollout(const PolicyParams& params, const std::vector<int>& prompt,
                             double temperature, int max_new, Rng& rng,
                             InferenceWorkspace* ws = nullptr);

// log pi(response | prompt): sum over response positions of the log-softmax at
// the realized token.
double sequence_logprob(const PolicyParams& params, const std::vector<int>& prompt,
                        const std::vector<int>& response, InferenceWorkspace* ws = nullptr);
// Per-token variant (same quantity before summation).
std::vector<double> sequence_logprobs_per_token(const PolicyParams& params,
                                                const std::vector<int>& prompt,
                                                const std::vector<int>& response,
                                                InferenceWorkspace* ws = nullptr);

// Project a width-d direction through the final RMSNorm and the unembedding;
// returns the top_n token ids by projected logit, descending, ties by id.
std::vector<int> logit_lens(const PolicyParams& params, const std::vector<double>& direction, int top_n);

}  // namespace rlvr
