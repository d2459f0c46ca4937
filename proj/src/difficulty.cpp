#include "rlvr/difficulty.hpp"

#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "rlvr/parallel.hpp"

namespace rlvr {

namespace {

// C(n,k) for n <= 64 fits in 64 bits; the running product is widened so
// intermediates cannot overflow.
unsigned long long binom(int n, int k) {
    if (k < 0 || k > n) return 0;
    if (k > n - k) k = n - k;
    unsigned __int128 r = 1;
    for (int i = 1; i <= k; ++i) {
        r = r * static_cast<unsigned>(n - k + i);
        r /= static_cast<unsigned>(i);  // exact: C(n-k+i, i) is integral
    }
    return static_cast<unsigned long long>(r);
}

}  // namespace

Rational pass_at_k(int n, int c, int k) {
    if (n < 1 || n > 64) throw std::invalid_argument("pass_at_k: n must be in [1, 64]");
    if (c < 0 || c > n) throw std::invalid_argument("pass_at_k: c must satisfy 0 <= c <= n");
    if (k < 1 || k > n) throw std::invalid_argument("pass_at_k: k must satisfy 1 <= k <= n");
    const unsigned long long total = binom(n, k);
    const unsigned long long none = binom(n - c, k);  // 0 when k > n-c
    unsigned long long num = total - none;
    unsigned long long den = total;
    const unsigned long long g = std::gcd(num, den);
    if (g > 0) {
        num /= g;
        den /= g;
    }
    return Rational{static_cast<long long>(num), static_cast<long long>(den)};
}

int DifficultyRecord::correct_in_first(int k) const {
    if (k > static_cast<int>(rewards.size()))
        throw std::invalid_argument("difficulty record: fewer than k recorded rollouts");
    int s = 0;
    for (int i = 0; i < k; ++i) s += rewards[i] ? 1 : 0;
    return s;
}

std::vector<DifficultyRecord> rollout_success_table(const PolicyParams& policy,
                                                    const std::vector<TaskInstance>& tasks, int n,
                                                    double temperature, int max_new, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("rollout_success_table: n must be >= 1");
    std::vector<DifficultyRecord> out(tasks.size());
    parallel_for(tasks.size(), [&](size_t start, size_t end) {
        InferenceWorkspace ws;
        for (size_t ti = start; ti < end; ++ti) {
            const TaskInstance& task = tasks[ti];
            DifficultyRecord rec;
            rec.task_id = task.id;
            rec.n = n;
            rec.rewards.resize(n);
            for (int i = 0; i < n; ++i) {
                Rng rng(mix64(seed, task.id, 0x726f6c6cull, static_cast<uint64_t>(i)));
                const RolloutSample s = sample_rollout(policy, task.prompt, temperature, max_new, rng, &ws);
                rec.rewards[i] = static_cast<uint8_t>(verify(s.response, task).reward);
            }
            rec.c = rec.correct_in_first(n);
            out[ti] = std::move(rec);
        }
    });
    return out;
}

std::string regime_name(Regime r) {
    switch (r) {
        case Regime::Easy: return "easy";
        case Regime::Medium: return "medium";
        case Regime::Hard: return "hard";
    }
    return "medium";
}

RegimePartition partition(const std::vector<DifficultyRecord>& records, int k) {
    if (k < 1) throw std::invalid_argument("partition: k must be >= 1");
    RegimePartition p;
    for (const auto& r : records) {
        const int c = r.correct_in_first(k);
        if (c == k)
            p.easy.push_back(r.task_id);
        else if (c == 0)
            p.hard.push_back(r.task_id);
        else
            p.medium.push_back(r.task_id);
    }
    return p;
}

std::vector<CurriculumSubset> curriculum_subsets(const std::vector<DifficultyRecord>& records,
                                                 const std::vector<int>& ks) {
    std::vector<CurriculumSubset> out;
    for (int k : ks) {
        CurriculumSubset med{k, CurriculumSubset::Side::Medium, {}};
        CurriculumSubset hard{k, CurriculumSubset::Side::Hard, {}};
        for (const auto& r : records) {
            if (r.correct_in_first(k) >= 1)
                med.ids.push_back(r.task_id);
            else
                hard.ids.push_back(r.task_id);
        }
        out.push_back(std::move(med));
        out.push_back(std::move(hard));
    }
    return out;
}

bool zero_variance(const std::vector<double>& rewards) {
    if (rewards.empty()) throw std::invalid_argument("zero_variance: empty group");
    for (double r : rewards)
        if (r != rewards[0]) return false;
    return true;
}

void save_difficulty_table(const std::string& path, const std::vector<DifficultyRecord>& records) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("save_difficulty_table: cannot open '" + path + "'");
    for (const auto& r : records) {
        std::string bits(r.rewards.size(), '0');
        for (size_t i = 0; i < r.rewards.size(); ++i)
            if (r.rewards[i]) bits[i] = '1';
        f << r.task_id << '\t' << r.n << '\t' << bits << '\t' << r.c << '\n';
    }
}

std::vector<DifficultyRecord> load_difficulty_table(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_difficulty_table: cannot open '" + path + "'");
    std::vector<DifficultyRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        DifficultyRecord r;
        std::string bits;
        ss >> r.task_id >> r.n >> bits >> r.c;
        if (!ss) throw std::runtime_error("load_difficulty_table: malformed line");
        r.rewards.resize(bits.size());
        for (size_t i = 0; i < bits.size(); ++i) r.rewards[i] = bits[i] == '1';
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace rlvr
