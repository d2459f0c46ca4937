#pragma once

#include <cstdint>
#include <vector>

#include "rlvr/grpo.hpp"
#include "rlvr/tsae.hpp"

namespace rlvr {

struct RfgoConfig {
    double half_life = 8.0;       // tokens; discount solves gamma^half_life = 1/2
    double beta_w = 1.0;          // weight temperature
    double clip_w = 0.2;          // epsilon_w, weights lie in [1-eps, 1+eps]
    double safety_ratio = 4.0;    // clamp threshold on the importance ratio
    double top_frac = 0.05;       // F_reason = top fraction of positive ReasonScores
    bool use_weights = true;
    bool use_proxy = true;

    double gamma() const;  // 2^(-1/half_life)
};

// Span starts at each step-marker or answer-marker token; tokens before the
// first marker form a leading span. Spans are disjoint and cover the response.
std::vector<std::pair<int, int>> split_spans(const std::vector<int>& response);

// L1 distance between span-mean codes restricted to the reasoning features.
// Codes are per-token sparse codes covering the whole response.
double span_divergence(const std::vector<SparseCode>& policy_codes,
                       const std::vector<SparseCode>& reference_codes,
                       std::pair<int, int> span, const std::vector<int>& reason_features);

// Mean-centers span divergences, then assigns every token in span k the
// discounted suffix sum RFGO_t = sum_{r>=k} gamma^{r-k} D~_r.
struct RfgoSignal {
    std::vector<std::pair<int, int>> spans;
    std::vector<double> span_divergences;         // D_k
    std::vector<double> centered;                 // D~_k, sums to 0
    std::vector<double> per_token;                // RFGO_t per response token
};
RfgoSignal rfgo_signal(const std::vector<double>& span_divs,
                       const std::vector<std::pair<int, int>>& spans, int response_len, double gamma);

// w_t = clip(exp(beta_w RFGO_t), 1-eps_w, 1+eps_w), then narrowed to
// [1-eps_w, 1] where the importance ratio exceeds the safety threshold with a
// negative advantage. Weights scale the surrogate magnitude, never its sign.
struct InfluenceWeights {
    std::vector<double> w;
    std::vector<uint8_t> clamped;  // safety clamp reduced this token's weight
};
InfluenceWeights influence_weights(const std::vector<double>& rfgo_t,
                                   const std::vector<double>& ratios,
                                   const std::vector<double>& advantages, const RfgoConfig& cfg);

// R^RFGO: masked token-mean of omega-weighted reasoning-feature activation.
double proxy_reward(const std::vector<SparseCode>& codes, const std::vector<uint8_t>& mask,
                    const std::vector<double>& omega, const std::vector<int>& reason_features);

// Substitutes proxies exactly when the verifier rewards are zero-variance
// (all-zero or all-one); informative rewards pass through untouched.
std::vector<double> apply_group_rewards(const std::vector<double>& verifier_rewards,
                                        const std::vector<double>& proxy_rewards);

// F_reason and omega from frozen-probe ReasonScores: positive scores within
// the top fraction, weights proportional to max(score, 0) and summing to 1;
// uniform over the top set when no score is positive.
struct ReasonFeatureSet {
    std::vector<int> features;
    std::vector<double> omega;
};
ReasonFeatureSet feature_weights_from_scores(const std::vector<double>& scores, double top_frac);

// GRPO trainer with RFGO token weighting and zero-variance proxy rewards.
// Reference codes come from teacher-forcing each sampled response through the
// frozen reference policy and encoding with the same frozen probe.
class RfgoTrainer : public GrpoTrainer {
public:
    RfgoTrainer(PolicyParams policy, GrpoConfig grpo_cfg, RfgoConfig rfgo_cfg, TsaeParams probe,
                ReasonFeatureSet reason, uint64_t seed);

protected:
    void shape_group(RolloutGroup& group) override;
    std::vector<double> token_weights(const RolloutGroup& group, size_t rollout_index,
                                      const std::vector<double>& new_logprobs) override;
    void fill_diagnostics(StepMetrics& m) override;

private:
    std::vector<SparseCode> codes_for(const PolicyParams& model, const std::vector<int>& prompt,
                                      const std::vector<int>& response) const;

    RfgoConfig rfgo_;
    TsaeParams probe_;
    ReasonFeatureSet reason_;
    // Step-local diagnostics.
    double diag_abs_sum_ = 0.0;
    size_t diag_token_count_ = 0;
    size_t diag_clamped_ = 0;
    size_t diag_groups_ = 0;
    size_t diag_proxy_groups_ = 0;
};

}  // namespace rlvr
