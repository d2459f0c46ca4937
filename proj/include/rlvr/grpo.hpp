#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "rlvr/difficulty.hpp"
#include "rlvr/optimizer.hpp"
#include "rlvr/policy.hpp"
#include "rlvr/task.hpp"
#include "rlvr/tensor.hpp"

namespace rlvr {

struct GrpoConfig {
    int group = 8;            // G
    double clip_eps = 0.2;    // PPO clip
    double kl_beta = 0.001;   // KL penalty coefficient
    double lr = 3e-4;
    int steps = 58;
    int batch = 32;           // tasks per outer step
    int minibatch = 16;       // tasks per optimizer update
    double temperature = 1.0; // rollout sampling temperature
    int max_new = 32;
    int eval_every = 2;       // pass@1 cadence in steps
};

struct AdvantageResult {
    bool zero_variance = false;
    std::vector<double> advantages;  // empty when zero_variance
};

// Group-relative advantages (R^i - mean)/std with the population std
// (divide by G). All-equal rewards are flagged zero-variance and excluded
// from the reward-driven term.
AdvantageResult group_advantages(const std::vector<double>& rewards);

struct RolloutGroup {
    uint64_t task_id = 0;
    size_t task_index = 0;  // position in the batch
    std::vector<RolloutSample> rollouts;
    std::vector<double> rewards;         // verifier rewards
    std::vector<double> shaped_rewards;  // after any proxy substitution
    AdvantageResult adv;                 // computed from shaped_rewards
    std::vector<double> ref_logprob_sum; // per rollout, under the frozen reference
};

// Per-group GRPO objective (to be maximized):
//   (1/G) sum_i (sum_t m w s)/(sum_t m)  -  kl_beta * kl_term
// where s is the clipped PPO surrogate per token. The KL penalty is applied
// once per group, outside the token average. token_weights, when given,
// multiply the per-token surrogate magnitude.
TensorPtr grpo_loss(const std::vector<TensorPtr>& new_logprobs,
                    const std::vector<std::vector<double>>& old_logprobs,
                    const std::vector<double>& advantages, double clip_eps, double kl_beta,
                    const TensorPtr& kl_term, const std::vector<std::vector<uint8_t>>& masks,
                    const std::vector<std::vector<double>>* token_weights = nullptr);

// Sequence-level Monte Carlo KL estimate over a group of rollouts sampled
// from `policy`: mean_i [log pi(y_i) - log pi_ref(y_i)], response tokens only.
// May be slightly negative from sampling noise.
double kl_estimate(const PolicyParams& policy, const PolicyParams& ref,
                   const std::vector<RolloutSample>& rollouts);

// Differentiable per-token log-probs of a response under the current graph.
TensorPtr response_logprobs_graph(const PolicyParams& params, const std::vector<int>& prompt,
                                  const std::vector<int>& response);

struct StepMetrics {
    int step = 0;
    double reward_mean = 0.0;
    double kl = 0.0;        // clamped at 0 in this report (not in the loss)
    double resp_len = 0.0;
    double acc_easy = -1.0, acc_medium = -1.0, acc_hard = -1.0, acc_all = -1.0;
    double rfgo_mean_abs = -1.0, rfgo_clamped_frac = -1.0, rfgo_proxy_frac = -1.0;
};

// Per-regime pass@1 callback: {easy, medium, hard, all}.
using Evaluator = std::function<std::array<double, 4>(const PolicyParams&)>;

class GrpoTrainer {
public:
    GrpoTrainer(PolicyParams policy, GrpoConfig cfg, uint64_t seed);
    virtual ~GrpoTrainer() = default;

    // One outer step: G rollouts per task, advantages, one optimizer update
    // per minibatch. Zero-variance groups contribute only the KL term.
    StepMetrics train_step(const std::vector<TaskInstance>& batch, int step_index);

    // Gradient-decomposition probe (no parameter update): samples one batch,
    // then compares the full objective's gradient against a KL-penalty-only
    // build on identical rollouts. Returns the max-abs elementwise gap; for a
    // batch of only zero-variance groups the reward term is exactly absent.
    double kl_domination_gap(const std::vector<TaskInstance>& batch, int step_index);

    void set_evaluator(Evaluator ev) { evaluator_ = std::move(ev); }

    const PolicyParams& policy() const { return policy_; }
    PolicyParams& policy() { return policy_; }
    const PolicyParams& reference() const { return ref_; }
    const GrpoConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }

protected:
    // RFGO hooks. shape_group may replace shaped_rewards (before advantages);
    // token_weights returns per-token multipliers for one rollout (empty means
    // all ones) given the freshly evaluated new log-probs.
    virtual void shape_group(RolloutGroup& group);
    virtual std::vector<double> token_weights(const RolloutGroup& group, size_t rollout_index,
                                              const std::vector<double>& new_logprobs);
    // Diagnostics hook invoked after each step.
    virtual void fill_diagnostics(StepMetrics& m);

    std::vector<RolloutGroup> sample_groups(const std::vector<TaskInstance>& batch, int step_index);
    // Accumulates d(-objective)/d(params) for groups [start, end) into the
    // current parameter grads; kl_only bypasses the surrogate for every group.
    void accumulate_gradients(const std::vector<RolloutGroup>& groups, size_t start, size_t end,
                              bool kl_only);

    PolicyParams policy_;
    PolicyParams ref_;
    GrpoConfig cfg_;
    AdamState opt_;
    uint64_t seed_ = 0;
    Evaluator evaluator_;
    std::array<double, 4> last_acc_{-1.0, -1.0, -1.0, -1.0};
};

// Repeated train_step on a single task, tracking reward, KL, response length
// and pass@1 each step.
std::vector<StepMetrics> one_sample_run(PolicyParams policy, const TaskInstance& task, int steps,
                                        const GrpoConfig& cfg, uint64_t seed,
                                        const Evaluator& evaluator = nullptr);

}  // namespace rlvr
