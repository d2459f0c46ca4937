#include "rlvr/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "rlvr/vocab.hpp"

namespace rlvr {

std::vector<double> reason_score(const ReasonScoreInputs& in) {
    const size_t m = in.mu_pos.size();
    if (in.mu_neg.size() != m || in.entropy.size() != m)
        throw std::invalid_argument("reason_score: input sizes disagree");
    if (in.alpha < 0.0) throw std::invalid_argument("reason_score: alpha must be non-negative");
    double pos_sum = 0.0, neg_sum = 0.0;
    for (size_t i = 0; i < m; ++i) {
        if (in.mu_pos[i] < 0.0 || in.mu_neg[i] < 0.0)
            throw std::invalid_argument("reason_score: negative activation mean");
        if (in.entropy[i] < -1e-12 || in.entropy[i] > 1.0 + 1e-12)
            throw std::invalid_argument("reason_score: entropy outside [0,1]");
        pos_sum += in.mu_pos[i];
        neg_sum += in.mu_neg[i];
    }
    std::vector<double> out(m);
    for (size_t i = 0; i < m; ++i) {
        const double share_pos = pos_sum > 0.0 ? in.mu_pos[i] / pos_sum : 0.0;
        const double share_neg = neg_sum > 0.0 ? in.mu_neg[i] / neg_sum : 0.0;
        const double h = std::clamp(in.entropy[i], 0.0, 1.0);
        out[i] = share_pos * std::pow(h, in.alpha) - share_neg;
    }
    return out;
}

double normalized_entropy(const std::vector<double>& group_masses, int num_groups) {
    if (num_groups < 2) throw std::invalid_argument("normalized_entropy: need at least 2 groups");
    if (static_cast<int>(group_masses.size()) != num_groups)
        throw std::invalid_argument("normalized_entropy: mass count must equal group count");
    double total = 0.0;
    for (double mass : group_masses) {
        if (mass < 0.0) throw std::invalid_argument("normalized_entropy: negative mass");
        total += mass;
    }
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (double mass : group_masses) {
        if (mass <= 0.0) continue;
        const double p = mass / total;
        h -= p * std::log2(p);
    }
    return h / std::log2(static_cast<double>(num_groups));
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
    const size_t n = x.size();
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&x](int a, int b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

SpearmanResult spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 3)
        throw std::invalid_argument("spearman: need equal lengths >= 3");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va <= 0.0 || vb <= 0.0) return {0.0, true};
    return {num / std::sqrt(va * vb), false};
}

ReasonScoreInputs activation_stats(const TsaeParams& probe, const ActivationDump& dump, double alpha) {
    if (dump.dim != probe.cfg.dim)
        throw std::invalid_argument("activation_stats: dump width does not match probe");
    const int m = probe.cfg.features;
    const int R = static_cast<int>(vocab::reasoning_groups().size());
    std::vector<double> pos_sum(m, 0.0), neg_sum(m, 0.0);
    std::vector<std::vector<double>> group_mass(m, std::vector<double>(R, 0.0));
    size_t pos_count = 0, neg_count = 0;

    std::vector<double> vec(dump.dim);
    // Chunked encoding: iteration structure only, results are independent.
    for (size_t chunk = 0; chunk < dump.num_chunks(); ++chunk) {
        const auto [start, end] = dump.chunk_range(chunk);
        for (size_t t = start; t < end; ++t) {
            std::copy_n(dump.vector_at(t), dump.dim, vec.begin());
            const SparseCode code = encode(probe, vec);
            const int group = vocab::reasoning_group_of(dump.tokens[t]);
            if (group >= 0)
                ++pos_count;
            else
                ++neg_count;
            for (size_t i = 0; i < code.idx.size(); ++i) {
                const int f = code.idx[i];
                const double v = code.val[i];
                if (group >= 0) {
                    pos_sum[f] += v;
                    group_mass[f][group] += v;
                } else {
                    neg_sum[f] += v;
                }
            }
        }
    }

    ReasonScoreInputs out;
    out.alpha = alpha;
    out.mu_pos.resize(m);
    out.mu_neg.resize(m);
    out.entropy.resize(m);
    for (int f = 0; f < m; ++f) {
        out.mu_pos[f] = pos_count > 0 ? pos_sum[f] / static_cast<double>(pos_count) : 0.0;
        out.mu_neg[f] = neg_count > 0 ? neg_sum[f] / static_cast<double>(neg_count) : 0.0;
        out.entropy[f] = normalized_entropy(group_mass[f], R);
    }
    return out;
}

std::vector<double> TrajectorySet::feature_series(int feature) const {
    std::vector<double> s(checkpoints.size());
    for (size_t c = 0; c < checkpoints.size(); ++c) s[c] = scores[c][feature];
    return s;
}

namespace {
int window_size(size_t n) {
    const int w = std::min<size_t>(5, n / 2);
    return std::max(1, w);
}
}  // namespace

double TrajectorySet::early_mean(int feature) const {
    const int w = window_size(checkpoints.size());
    double s = 0.0;
    for (int c = 0; c < w; ++c) s += scores[c][feature];
    return s / w;
}

double TrajectorySet::late_mean(int feature) const {
    const int w = window_size(checkpoints.size());
    double s = 0.0;
    for (size_t c = checkpoints.size() - w; c < checkpoints.size(); ++c) s += scores[c][feature];
    return s / w;
}

std::vector<int> detect_emerging(const std::map<std::string, TrajectorySet>& by_regime,
                                 const std::string& target, const EmergingThresholds& th) {
    const auto it = by_regime.find(target);
    if (it == by_regime.end()) throw std::invalid_argument("detect_emerging: unknown target regime");
    const TrajectorySet& tgt = it->second;
    for (const auto& [name, set] : by_regime) {
        if (set.probe_hash != tgt.probe_hash)
            throw std::invalid_argument("detect_emerging: probe hash mismatch between regimes");
        if (set.num_features() != tgt.num_features())
            throw std::invalid_argument("detect_emerging: feature basis mismatch");
    }
    const int m = tgt.num_features();
    std::vector<double> steps(tgt.checkpoints.begin(), tgt.checkpoints.end());

    // Gain threshold: top ceil(top_gain_frac * m) gains on the target regime,
    // ties resolved toward the lower feature index.
    std::vector<double> gains(m);
    for (int f = 0; f < m; ++f) gains[f] = tgt.late_mean(f) - tgt.early_mean(f);
    const int top_k = std::max(1, static_cast<int>(std::ceil(th.top_gain_frac * m)));
    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&gains](int a, int b) { return gains[a] > gains[b]; });
    std::vector<uint8_t> in_top(m, 0);
    for (int i = 0; i < top_k; ++i) in_top[order[i]] = 1;

    std::vector<int> out;
    for (int f = 0; f < m; ++f) {
        if (!in_top[f] || gains[f] <= 0.0) continue;
        const auto rs = spearman(tgt.feature_series(f), steps);
        if (rs.degenerate || rs.r <= th.spearman_on) continue;
        bool unique = true;
        for (const auto& [name, set] : by_regime) {
            if (name == target) continue;
            const auto other = spearman(set.feature_series(f), steps);
            const double other_gain = set.late_mean(f) - set.early_mean(f);
            if (!other.degenerate && other.r >= th.spearman_off) unique = false;
            if (other_gain > gains[f] / th.gain_ratio) unique = false;
        }
        if (unique) out.push_back(f);
    }
    return out;
}

std::vector<FeatureShift> classify_reinforced_suppressed(const TrajectorySet& set, double delta) {
    if (delta < 0.0) throw std::invalid_argument("classify: delta must be non-negative");
    std::vector<FeatureShift> out(set.num_features());
    for (int f = 0; f < set.num_features(); ++f) {
        const double gain = set.late_mean(f) - set.early_mean(f);
        out[f] = gain > delta   ? FeatureShift::Reinforced
                 : gain < -delta ? FeatureShift::Suppressed
                                 : FeatureShift::Stable;
    }
    return out;
}

FeatureSemantics feature_semantics(const TsaeParams& probe, const PolicyParams& policy, int feature,
                                   int top_n, const ActivationDump* reference_dump) {
    FeatureSemantics out;
    out.top_tokens = logit_lens(policy, probe.decoder_column(feature), top_n);
    if (reference_dump) {
        std::vector<FeatureSemantics::Context> all;
        std::vector<double> vec(reference_dump->dim);
        for (const auto& seq : reference_dump->sequences) {
            for (uint32_t t = 0; t < seq.length; ++t) {
                const size_t idx = seq.offset + t;
                std::copy_n(reference_dump->vector_at(idx), reference_dump->dim, vec.begin());
                const double v = encode(probe, vec).value_of(feature);
                if (v > 0.0)
                    all.push_back({seq.task_id, static_cast<int>(t), v});
            }
        }
        std::stable_sort(all.begin(), all.end(),
                         [](const auto& a, const auto& b) { return a.activation > b.activation; });
        if (static_cast<int>(all.size()) > top_n) all.resize(top_n);
        out.top_contexts = std::move(all);
    }
    return out;
}

void save_trajectories(const std::string& path, const TrajectorySet& set) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("save_trajectories: cannot open '" + path + "'");
    f.precision(17);
    for (size_t c = 0; c < set.checkpoints.size(); ++c)
        for (int feat = 0; feat < set.num_features(); ++feat)
            f << set.probe_hash << '\t' << set.regime << '\t' << set.checkpoints[c] << '\t' << feat
              << '\t' << set.scores[c][feat] << '\n';
}

TrajectorySet load_trajectories(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_trajectories: cannot open '" + path + "'");
    TrajectorySet set;
    std::string line;
    std::map<int, std::map<int, double>> table;  // checkpoint -> feature -> score
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string hash, regime;
        int ck, feat;
        double score;
        ss >> hash >> regime >> ck >> feat >> score;
        if (!ss) throw std::runtime_error("load_trajectories: malformed line");
        set.probe_hash = hash;
        set.regime = regime;
        table[ck][feat] = score;
    }
    for (auto& [ck, feats] : table) {
        set.checkpoints.push_back(ck);
        std::vector<double> row(feats.size());
        for (auto& [feat, score] : feats) row[feat] = score;
        set.scores.push_back(std::move(row));
    }
    return set;
}

}  // namespace rlvr
