#include "rlvr/grpo.hpp"

#include <cmath>
#include <stdexcept>

#include "rlvr/parallel.hpp"

namespace rlvr {

AdvantageResult group_advantages(const std::vector<double>& rewards) {
    const size_t g = rewards.size();
    if (g < 2) throw std::invalid_argument("group_advantages: group size must be >= 2");
    AdvantageResult out;
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(g);  // population std
    bool all_equal = true;
    for (double r : rewards) all_equal = all_equal && r == rewards[0];
    if (all_equal) {
        out.zero_variance = true;
        return out;
    }
    const double sd = std::sqrt(var);
    out.advantages.resize(g);
    for (size_t i = 0; i < g; ++i) out.advantages[i] = (rewards[i] - mean) / sd;
    return out;
}

TensorPtr grpo_loss(const std::vector<TensorPtr>& new_logprobs,
                    const std::vector<std::vector<double>>& old_logprobs,
                    const std::vector<double>& advantages, double clip_eps, double kl_beta,
                    const TensorPtr& kl_term, const std::vector<std::vector<uint8_t>>& masks,
                    const std::vector<std::vector<double>>* token_weights) {
    const size_t g = new_logprobs.size();
    if (g == 0) throw std::invalid_argument("grpo_loss: empty group");
    if (old_logprobs.size() != g || advantages.size() != g || masks.size() != g)
        throw std::invalid_argument("grpo_loss: mismatched group sizes");
    if (token_weights && token_weights->size() != g)
        throw std::invalid_argument("grpo_loss: mismatched weight count");

    TensorPtr acc;
    for (size_t i = 0; i < g; ++i) {
        const int len = new_logprobs[i]->shape[0];
        if (static_cast<int>(old_logprobs[i].size()) != len || static_cast<int>(masks[i].size()) != len)
            throw std::invalid_argument("grpo_loss: mismatched token lengths");
        const std::vector<double> adv(len, advantages[i]);  // terminal reward broadcast
        TensorPtr s = ppo_token_surrogate(new_logprobs[i], old_logprobs[i], adv, clip_eps);
        if (token_weights && !(*token_weights)[i].empty()) {
            if (static_cast<int>((*token_weights)[i].size()) != len)
                throw std::invalid_argument("grpo_loss: mismatched weight lengths");
            s = mul(s, Tensor::from({len}, (*token_weights)[i]));
        }
        double msum = 0.0;
        std::vector<double> maskd(len);
        for (int t = 0; t < len; ++t) {
            maskd[t] = masks[i][t] ? 1.0 : 0.0;
            msum += maskd[t];
        }
        if (msum == 0.0) throw std::invalid_argument("grpo_loss: empty token mask");
        TensorPtr token_mean = scale(sum_all(mul(s, Tensor::from({len}, maskd))), 1.0 / msum);
        acc = acc ? add(acc, token_mean) : token_mean;
    }
    TensorPtr surrogate = scale(acc, 1.0 / static_cast<double>(g));
    return sub(surrogate, scale(kl_term, kl_beta));
}

double kl_estimate(const PolicyParams& policy, const PolicyParams& ref,
                   const std::vector<RolloutSample>& rollouts) {
    if (rollouts.empty()) throw std::invalid_argument("kl_estimate: no rollouts");
    InferenceWorkspace ws;
    double total = 0.0;
    for (const auto& r : rollouts) {
        if (r.response.empty()) continue;
        const double lp = sequence_logprob(policy, r.prompt, r.response, &ws);
        const double lr = sequence_logprob(ref, r.prompt, r.response, &ws);
        total += lp - lr;
    }
    return total / static_cast<double>(rollouts.size());
}

TensorPtr response_logprobs_graph(const PolicyParams& params, const std::vector<int>& prompt,
                                  const std::vector<int>& response) {
    if (prompt.empty() || response.empty())
        throw std::invalid_argument("response_logprobs_graph: empty prompt or response");
    std::vector<int> tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    ForwardResult fw = forward_logits(params, tokens);
    const int p = static_cast<int>(prompt.size());
    const int t = static_cast<int>(tokens.size());
    TensorPtr rows = slice_rows(fw.logits, p - 1, t - 1);
    return select_cols(log_softmax_rows(rows), response);
}

GrpoTrainer::GrpoTrainer(PolicyParams policy, GrpoConfig cfg, uint64_t seed)
    : policy_(std::move(policy)), ref_(policy_.clone()), cfg_(cfg), opt_(AdamConfig{cfg.lr}), seed_(seed) {
    if (cfg_.group < 2) throw std::invalid_argument("grpo: group size must be >= 2");
    if (cfg_.clip_eps <= 0.0) throw std::invalid_argument("grpo: clip epsilon must be positive");
    if (cfg_.kl_beta < 0.0) throw std::invalid_argument("grpo: KL coefficient must be non-negative");
    if (cfg_.minibatch < 1 || cfg_.batch < 1) throw std::invalid_argument("grpo: bad batch sizes");
}

void GrpoTrainer::shape_group(RolloutGroup&) {}

std::vector<double> GrpoTrainer::token_weights(const RolloutGroup&, size_t, const std::vector<double>&) {
    return {};
}

void GrpoTrainer::fill_diagnostics(StepMetrics&) {}

std::vector<RolloutGroup> GrpoTrainer::sample_groups(const std::vector<TaskInstance>& batch,
                                                     int step_index) {
    std::vector<RolloutGroup> groups(batch.size());
    const int G = cfg_.group;
    for (const auto& t : batch)
        if (static_cast<int>(t.prompt.size()) + 1 > policy_.cfg.max_seq)
            throw std::invalid_argument("sample_groups: prompt leaves no room to generate");
    // Containers sized up front; rollouts then fill their own slots in parallel.
    for (size_t ti = 0; ti < batch.size(); ++ti) {
        groups[ti].task_id = batch[ti].id;
        groups[ti].task_index = ti;
        groups[ti].rollouts.resize(G);
        groups[ti].rewards.resize(G);
        groups[ti].ref_logprob_sum.resize(G);
    }
    parallel_for(batch.size() * static_cast<size_t>(G), [&](size_t start, size_t end) {
        InferenceWorkspace ws;
        for (size_t idx = start; idx < end; ++idx) {
            const size_t ti = idx / G;
            const int i = static_cast<int>(idx % G);
            const TaskInstance& task = batch[ti];
            Rng rng(mix64(seed_, 0x67727075ull, mix64(static_cast<uint64_t>(step_index), task.id),
                          static_cast<uint64_t>(i)));
            RolloutSample s =
                sample_rollout(policy_, task.prompt, cfg_.temperature, cfg_.max_new, rng, &ws);
            s.reward = verify(s.response, task).reward;
            groups[ti].rewards[i] = s.reward;
            groups[ti].ref_logprob_sum[i] =
                s.response.empty() ? 0.0 : sequence_logprob(ref_, s.prompt, s.response, &ws);
            groups[ti].rollouts[i] = std::move(s);
        }
    });
    for (auto& g : groups) {
        g.shaped_rewards = g.rewards;
        shape_group(g);
        g.adv = group_advantages(g.shaped_rewards);
    }
    return groups;
}

StepMetrics GrpoTrainer::train_step(const std::vector<TaskInstance>& batch, int step_index) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    std::vector<RolloutGroup> groups = sample_groups(batch, step_index);

    StepMetrics m;
    m.step = step_index;
    double reward_sum = 0.0, len_sum = 0.0, kl_sum = 0.0;
    int n_rollouts = 0;
    for (const auto& g : groups) {
        double group_kl = 0.0;
        for (size_t i = 0; i < g.rollouts.size(); ++i) {
            reward_sum += g.rewards[i];
            len_sum += static_cast<double>(g.rollouts[i].response.size());
            double lp = 0.0;
            for (double x : g.rollouts[i].logprobs) lp += x;
            group_kl += lp - g.ref_logprob_sum[i];
            ++n_rollouts;
        }
        kl_sum += group_kl / static_cast<double>(g.rollouts.size());
    }
    m.reward_mean = reward_sum / n_rollouts;
    m.resp_len = len_sum / n_rollouts;
    m.kl = std::max(0.0, kl_sum / static_cast<double>(groups.size()));

    // One optimizer update per minibatch of groups; per-group backward keeps
    // peak graph memory bounded, leaf grads accumulate across calls.
    policy_.set_requires_grad(true);
    const auto params = policy_.parameters();
    for (size_t mb_start = 0; mb_start < groups.size(); mb_start += cfg_.minibatch) {
        const size_t mb_end = std::min(groups.size(), mb_start + static_cast<size_t>(cfg_.minibatch));
        policy_.zero_grad();
        accumulate_gradients(groups, mb_start, mb_end, false);
        opt_.step(params);
    }
    policy_.zero_grad();
    policy_.set_requires_grad(false);

    if (evaluator_ && (cfg_.eval_every <= 1 || step_index % cfg_.eval_every == 0)) {
        last_acc_ = evaluator_(policy_);
    }
    m.acc_easy = last_acc_[0];
    m.acc_medium = last_acc_[1];
    m.acc_hard = last_acc_[2];
    m.acc_all = last_acc_[3];
    fill_diagnostics(m);
    return m;
}

void GrpoTrainer::accumulate_gradients(const std::vector<RolloutGroup>& groups, size_t start,
                                       size_t end, bool kl_only) {
    const double inv_b = 1.0 / static_cast<double>(end - start);
    for (size_t gi = start; gi < end; ++gi) {
        const RolloutGroup& g = groups[gi];
        const size_t G = g.rollouts.size();
        std::vector<TensorPtr> new_lps(G);
        std::vector<std::vector<double>> old_lps(G);
        std::vector<std::vector<uint8_t>> masks(G);
        std::vector<std::vector<double>> weights(G);
        bool any_weight = false;
        TensorPtr kl_acc;
        for (size_t i = 0; i < G; ++i) {
            const RolloutSample& r = g.rollouts[i];
            new_lps[i] = response_logprobs_graph(policy_, r.prompt, r.response);
            old_lps[i] = r.logprobs;
            masks[i].assign(r.response.size(), 1);
            if (!kl_only) {
                weights[i] = token_weights(g, i, new_lps[i]->v);
                any_weight = any_weight || !weights[i].empty();
            }
            TensorPtr dkl = add(sum_all(new_lps[i]), Tensor::scalar(-g.ref_logprob_sum[i]));
            kl_acc = kl_acc ? add(kl_acc, dkl) : dkl;
        }
        TensorPtr kl_term = scale(kl_acc, 1.0 / static_cast<double>(G));
        TensorPtr objective;
        if (kl_only || g.adv.zero_variance) {
            // No informative relative-advantage signal: the group contributes
            // only the KL penalty.
            objective = scale(kl_term, -cfg_.kl_beta);
        } else {
            objective = grpo_loss(new_lps, old_lps, g.adv.advantages, cfg_.clip_eps, cfg_.kl_beta,
                                  kl_term, masks, any_weight ? &weights : nullptr);
        }
        // Maximize the objective: minimize its negation over the minibatch.
        backward(scale(objective, -inv_b));
    }
}

double GrpoTrainer::kl_domination_gap(const std::vector<TaskInstance>& batch, int step_index) {
    std::vector<RolloutGroup> groups = sample_groups(batch, step_index);
    policy_.set_requires_grad(true);
    policy_.zero_grad();
    accumulate_gradients(groups, 0, groups.size(), false);
    std::vector<std::vector<double>> full;
    for (const auto& p : policy_.parameters()) full.push_back(p->grad);
    policy_.zero_grad();
    accumulate_gradients(groups, 0, groups.size(), true);
    double gap = 0.0;
    const auto params = policy_.parameters();
    for (size_t pi = 0; pi < params.size(); ++pi)
        for (size_t i = 0; i < full[pi].size(); ++i)
            gap = std::max(gap, std::abs(full[pi][i] - params[pi]->grad[i]));
    policy_.zero_grad();
    policy_.set_requires_grad(false);
    return gap;
}

std::vector<StepMetrics> one_sample_run(PolicyParams policy, const TaskInstance& task, int steps,
                                        const GrpoConfig& cfg, uint64_t seed, const Evaluator& evaluator) {
    if (steps < 1) throw std::invalid_argument("one_sample_run: steps must be >= 1");
    GrpoConfig one = cfg;
    one.batch = 1;
    one.minibatch = 1;
    one.eval_every = 1;
    GrpoTrainer trainer(std::move(policy), one, seed);
    if (evaluator) trainer.set_evaluator(evaluator);
    std::vector<StepMetrics> series;
    series.reserve(steps);
    const std::vector<TaskInstance> batch{task};
    for (int s = 1; s <= steps; ++s) series.push_back(trainer.train_step(batch, s));
    return series;
}

}  // namespace rlvr
