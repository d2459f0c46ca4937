#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rlvr/dump.hpp"
#include "rlvr/policy.hpp"
#include "rlvr/tsae.hpp"

namespace rlvr {

// Per-feature statistics feeding the ReasonScore: mean activation on
// reasoning tokens (mu_pos) and non-reasoning tokens (mu_neg), plus the
// normalized entropy of each feature's mass across the reasoning-token groups.
struct ReasonScoreInputs {
    std::vector<double> mu_pos;
    std::vector<double> mu_neg;
    std::vector<double> entropy;  // in [0, 1]
    double alpha = 1.0;
};

// score_i = mu_pos_i / sum(mu_pos) * entropy_i^alpha - mu_neg_i / sum(mu_neg),
// with a ratio defined as 0 when its denominator vanishes. Scores lie in [-1, 1].
std::vector<double> reason_score(const ReasonScoreInputs& in);

// H = -sum p_r log2 p_r / log2 R over per-group masses; all-zero mass gives 0.
double normalized_entropy(const std::vector<double>& group_masses, int num_groups);

struct SpearmanResult {
    double r = 0.0;
    bool degenerate = false;  // a constant series has no defined rank correlation
};

// Rank correlation with average ranks for ties.
SpearmanResult spearman(const std::vector<double>& a, const std::vector<double>& b);

// Encodes a dump with the frozen probe and accumulates ReasonScore statistics
// over the synthetic reasoning-token groups.
ReasonScoreInputs activation_stats(const TsaeParams& probe, const ActivationDump& dump, double alpha);

// Per-regime ReasonScore series over checkpoints, on a shared feature basis.
struct TrajectorySet {
    std::string probe_hash;
    std::string regime;               // full | easy | medium | hard
    std::vector<int> checkpoints;     // training step per column
    std::vector<std::vector<double>> scores;  // [checkpoint][feature]

    int num_features() const { return checkpoints.empty() ? 0 : static_cast<int>(scores[0].size()); }
    std::vector<double> feature_series(int feature) const;
    // Mean over the first / last min(5, floor(T/2)) checkpoints.
    double early_mean(int feature) const;
    double late_mean(int feature) const;
};

struct EmergingThresholds {
    double spearman_on = 0.55;   // required on the target regime
    double spearman_off = 0.30;  // ceiling on the other regimes
    double gain_ratio = 2.0;     // other regimes must gain at most gain/ratio
    double top_gain_frac = 0.005;
};

// Features whose ReasonScore rises strongly under the target regime only:
// Spearman(score, step) > spearman_on and a top-frac late-vs-early gain on the
// target, with Spearman < spearman_off and at least gain_ratio-times smaller
// gain on every other regime. Probe hashes must match across regimes.
std::vector<int> detect_emerging(const std::map<std::string, TrajectorySet>& by_regime,
                                 const std::string& target, const EmergingThresholds& th = {});

enum class FeatureShift { Reinforced, Suppressed, Stable };
// Gain above +delta -> reinforced, below -delta -> suppressed, else stable.
std::vector<FeatureShift> classify_reinforced_suppressed(const TrajectorySet& set, double delta);

struct FeatureSemantics {
    std::vector<int> top_tokens;  // via the logit lens on the decoder direction
    struct Context {
        uint64_t task_id = 0;
        int position = 0;
        double activation = 0.0;
    };
    std::vector<Context> top_contexts;  // highest-activating dump positions
};

FeatureSemantics feature_semantics(const TsaeParams& probe, const PolicyParams& policy, int feature,
                                   int top_n, const ActivationDump* reference_dump = nullptr);

// Line-delimited trajectory store: probe hash, regime, checkpoint, feature, score.
void save_trajectories(const std::string& path, const TrajectorySet& set);
TrajectorySet load_trajectories(const std::string& path);

}  // namespace rlvr
