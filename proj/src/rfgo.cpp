#include "rlvr/rfgo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rlvr/vocab.hpp"

namespace rlvr {

double RfgoConfig::gamma() const {
    if (half_life <= 0.0) throw std::invalid_argument("rfgo: half-life must be positive");
    return std::exp2(-1.0 / half_life);
}

std::vector<std::pair<int, int>> split_spans(const std::vector<int>& response) {
    if (response.empty()) throw std::invalid_argument("split_spans: empty response");
    std::vector<std::pair<int, int>> spans;
    int start = 0;
    for (int t = 0; t < static_cast<int>(response.size()); ++t) {
        const bool marker = response[t] == vocab::STEP || response[t] == vocab::ANS;
        if (marker && t > start) {
            spans.emplace_back(start, t);
            start = t;
        }
    }
    spans.emplace_back(start, static_cast<int>(response.size()));
    return spans;
}

double span_divergence(const std::vector<SparseCode>& policy_codes,
                       const std::vector<SparseCode>& reference_codes,
                       std::pair<int, int> span, const std::vector<int>& reason_features) {
    const auto [begin, end] = span;
    if (begin < 0 || end <= begin || end > static_cast<int>(policy_codes.size()) ||
        end > static_cast<int>(reference_codes.size()))
        throw std::invalid_argument("span_divergence: span out of code range");
    if (!policy_codes.empty() && !reference_codes.empty() &&
        policy_codes[0].split_h != reference_codes[0].split_h)
        throw std::invalid_argument("span_divergence: probe mismatch between code sets");
    const double inv_len = 1.0 / static_cast<double>(end - begin);
    double l1 = 0.0;
    for (int f : reason_features) {
        double mp = 0.0, mr = 0.0;
        for (int t = begin; t < end; ++t) {
            mp += policy_codes[t].value_of(f);
            mr += reference_codes[t].value_of(f);
        }
        l1 += std::abs((mp - mr) * inv_len);
    }
    return l1;
}

RfgoSignal rfgo_signal(const std::vector<double>& span_divs,
                       const std::vector<std::pair<int, int>>& spans, int response_len, double gamma) {
    if (span_divs.empty() || span_divs.size() != spans.size())
        throw std::invalid_argument("rfgo_signal: need one divergence per span");
    RfgoSignal out;
    out.spans = spans;
    out.span_divergences = span_divs;

    double mean = 0.0;
    for (double d : span_divs) mean += d;
    mean /= static_cast<double>(span_divs.size());
    out.centered.resize(span_divs.size());
    for (size_t k = 0; k < span_divs.size(); ++k) out.centered[k] = span_divs[k] - mean;

    // Discounted suffix sums over spans.
    std::vector<double> suffix(span_divs.size());
    double acc = 0.0;
    for (size_t k = span_divs.size(); k-- > 0;) {
        acc = out.centered[k] + gamma * acc;
        suffix[k] = acc;
    }
    out.per_token.assign(response_len, 0.0);
    for (size_t k = 0; k < spans.size(); ++k)
        for (int t = spans[k].first; t < spans[k].second && t < response_len; ++t)
            out.per_token[t] = suffix[k];
    return out;
}

InfluenceWeights influence_weights(const std::vector<double>& rfgo_t,
                                   const std::vector<double>& ratios,
                                   const std::vector<double>& advantages, const RfgoConfig& cfg) {
    const size_t n = rfgo_t.size();
    if (ratios.size() != n || advantages.size() != n)
        throw std::invalid_argument("influence_weights: mismatched lengths");
    if (cfg.clip_w <= 0.0) throw std::invalid_argument("influence_weights: clip radius must be positive");
    const double lo = 1.0 - cfg.clip_w, hi = 1.0 + cfg.clip_w;
    InfluenceWeights out;
    out.w.resize(n);
    out.clamped.assign(n, 0);
    for (size_t t = 0; t < n; ++t) {
        double w = std::clamp(std::exp(cfg.beta_w * rfgo_t[t]), lo, hi);
        if (ratios[t] > cfg.safety_ratio && advantages[t] < 0.0 && w > 1.0) {
            w = 1.0;
            out.clamped[t] = 1;
        }
        out.w[t] = w;
    }
    return out;
}

double proxy_reward(const std::vector<SparseCode>& codes, const std::vector<uint8_t>& mask,
                    const std::vector<double>& omega, const std::vector<int>& reason_features) {
    if (codes.size() != mask.size()) throw std::invalid_argument("proxy_reward: mask length mismatch");
    if (omega.size() != reason_features.size())
        throw std::invalid_argument("proxy_reward: one weight per reasoning feature required");
    double msum = 0.0, total = 0.0;
    for (size_t t = 0; t < codes.size(); ++t) {
        if (!mask[t]) continue;
        msum += 1.0;
        for (size_t j = 0; j < reason_features.size(); ++j)
            total += omega[j] * codes[t].value_of(reason_features[j]);
    }
    if (msum == 0.0) throw std::invalid_argument("proxy_reward: all-zero mask");
    return total / msum;
}

std::vector<double> apply_group_rewards(const std::vector<double>& verifier_rewards,
                                        const std::vector<double>& proxy_rewards) {
    if (verifier_rewards.size() != proxy_rewards.size())
        throw std::invalid_argument("apply_group_rewards: group size mismatch");
    if (!zero_variance(verifier_rewards)) return verifier_rewards;
    return proxy_rewards;
}

ReasonFeatureSet feature_weights_from_scores(const std::vector<double>& scores, double top_frac) {
    if (scores.empty()) throw std::invalid_argument("feature_weights_from_scores: empty scores");
    if (top_frac <= 0.0 || top_frac > 1.0)
        throw std::invalid_argument("feature_weights_from_scores: top fraction out of range");
    const int m = static_cast<int>(scores.size());
    const int top_k = std::max(1, static_cast<int>(std::ceil(top_frac * m)));
    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&scores](int a, int b) { return scores[a] > scores[b]; });

    ReasonFeatureSet out;
    for (int i = 0; i < top_k; ++i)
        if (scores[order[i]] > 0.0) out.features.push_back(order[i]);
    if (out.features.empty()) {
        // No positive score anywhere: fall back to uniform over the top set.
        out.features.assign(order.begin(), order.begin() + top_k);
        out.omega.assign(out.features.size(), 1.0 / static_cast<double>(out.features.size()));
        std::sort(out.features.begin(), out.features.end());
        return out;
    }
    std::sort(out.features.begin(), out.features.end());
    double total = 0.0;
    for (int f : out.features) total += std::max(scores[f], 0.0);
    for (int f : out.features) out.omega.push_back(std::max(scores[f], 0.0) / total);
    return out;
}

RfgoTrainer::RfgoTrainer(PolicyParams policy, GrpoConfig grpo_cfg, RfgoConfig rfgo_cfg,
                         TsaeParams probe, ReasonFeatureSet reason, uint64_t seed)
    : GrpoTrainer(std::move(policy), grpo_cfg, seed),
      rfgo_(rfgo_cfg),
      probe_(std::move(probe)),
      reason_(std::move(reason)) {
    if (probe_.cfg.dim != policy_.cfg.dim)
        throw std::invalid_argument("rfgo: probe width does not match the policy tap");
    if (reason_.features.empty()) throw std::invalid_argument("rfgo: empty reasoning feature set");
    double s = 0.0;
    for (double w : reason_.omega) s += w;
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("rfgo: feature weights must sum to 1");
}

std::vector<SparseCode> RfgoTrainer::codes_for(const PolicyParams& model, const std::vector<int>& prompt,
                                               const std::vector<int>& response) const {
    std::vector<int> tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    InferenceWorkspace ws;
    ws.forward(model, tokens);
    const std::vector<double>& tap = ws.tap(model.cfg.tap_layer);
    const int d = model.cfg.dim;
    std::vector<SparseCode> codes;
    codes.reserve(response.size());
    std::vector<double> vec(d);
    for (size_t t = prompt.size(); t < tokens.size(); ++t) {
        std::copy_n(&tap[t * static_cast<size_t>(d)], d, vec.begin());
        codes.push_back(encode(probe_, vec, static_cast<int>(t - prompt.size())));
    }
    return codes;
}

void RfgoTrainer::shape_group(RolloutGroup& group) {
    ++diag_groups_;
    if (!rfgo_.use_proxy) return;
    if (!zero_variance(group.rewards)) return;
    ++diag_proxy_groups_;
    std::vector<double> proxies(group.rollouts.size());
    for (size_t i = 0; i < group.rollouts.size(); ++i) {
        const auto& r = group.rollouts[i];
        const auto codes = codes_for(policy_, r.prompt, r.response);
        proxies[i] = proxy_reward(codes, std::vector<uint8_t>(codes.size(), 1), reason_.omega,
                                  reason_.features);
    }
    group.shaped_rewards = apply_group_rewards(group.rewards, proxies);
}

std::vector<double> RfgoTrainer::token_weights(const RolloutGroup& group, size_t rollout_index,
                                               const std::vector<double>& new_logprobs) {
    if (!rfgo_.use_weights || group.adv.zero_variance) return {};
    const RolloutSample& r = group.rollouts[rollout_index];
    const auto spans = split_spans(r.response);
    const auto policy_codes = codes_for(policy_, r.prompt, r.response);
    const auto ref_codes = codes_for(ref_, r.prompt, r.response);
    std::vector<double> divs(spans.size());
    for (size_t k = 0; k < spans.size(); ++k)
        divs[k] = span_divergence(policy_codes, ref_codes, spans[k], reason_.features);
    const RfgoSignal sig =
        rfgo_signal(divs, spans, static_cast<int>(r.response.size()), rfgo_.gamma());

    std::vector<double> ratios(r.response.size());
    for (size_t t = 0; t < ratios.size(); ++t) ratios[t] = std::exp(new_logprobs[t] - r.logprobs[t]);
    const std::vector<double> adv(r.response.size(), group.adv.advantages[rollout_index]);
    const InfluenceWeights iw = influence_weights(sig.per_token, ratios, adv, rfgo_);

    for (double s : sig.per_token) diag_abs_sum_ += std::abs(s);
    diag_token_count_ += sig.per_token.size();
    for (uint8_t c : iw.clamped) diag_clamped_ += c;
    return iw.w;
}

void RfgoTrainer::fill_diagnostics(StepMetrics& m) {
    m.rfgo_mean_abs = diag_token_count_ ? diag_abs_sum_ / static_cast<double>(diag_token_count_) : 0.0;
    m.rfgo_clamped_frac =
        diag_token_count_ ? static_cast<double>(diag_clamped_) / static_cast<double>(diag_token_count_) : 0.0;
    m.rfgo_proxy_frac =
        diag_groups_ ? static_cast<double>(diag_proxy_groups_) / static_cast<double>(diag_groups_) : 0.0;
    diag_abs_sum_ = 0.0;
    diag_token_count_ = 0;
    diag_clamped_ = 0;
    diag_groups_ = 0;
    diag_proxy_groups_ = 0;
}

}  // namespace rlvr
