#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rlvr/policy.hpp"
#include "rlvr/task.hpp"

namespace rlvr {

// Reduced fraction with positive denominator.
struct Rational {
    long long num = 0;
    long long den = 1;
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    bool operator==(const Rational&) const = default;
};

// Unbiased pass@k estimator, 1 - C(n-c,k)/C(n,k), in exact rational
// arithmetic (supported for n <= 64, where the binomials fit in 64 bits).
Rational pass_at_k(int n, int c, int k);

struct DifficultyRecord {
    uint64_t task_id = 0;
    int n = 0;                     // rollouts drawn
    std::vector<uint8_t> rewards;  // per-rollout binary rewards, in draw order
    int c = 0;                     // correct count

    int correct_in_first(int k) const;
};

// n rollouts per task under the given policy, verified; deterministic given
// seed (per-task, per-rollout rng substreams).
std::vector<DifficultyRecord> rollout_success_table(const PolicyParams& policy,
                                                    const std::vector<TaskInstance>& tasks, int n,
                                                    double temperature, int max_new, uint64_t seed);

enum class Regime { Easy, Medium, Hard };
std::string regime_name(Regime r);

struct RegimePartition {
    std::vector<uint64_t> easy, medium, hard;  // disjoint, exhaustive
};

// Three-way split from the first k recorded rollouts: easy iff all succeed,
// hard iff all fail, medium otherwise.
RegimePartition partition(const std::vector<DifficultyRecord>& records, int k);

struct CurriculumSubset {
    int k = 0;
    enum class Side { Medium, Hard } side = Side::Medium;
    std::vector<uint64_t> ids;
};

// Two-way curriculum sets: medium@k collects tasks solved at least once in the
// first k rollouts (so it subsumes easy cases), hard@k the never-solved ones.
std::vector<CurriculumSubset> curriculum_subsets(const std::vector<DifficultyRecord>& records,
                                                 const std::vector<int>& ks = {2, 4, 8});

// True iff all rewards in the group are equal.
bool zero_variance(const std::vector<double>& rewards);

// Tab-separated records: task id, n, per-rollout rewards bitstring, c.
void save_difficulty_table(const std::string& path, const std::vector<DifficultyRecord>& records);
std::vector<DifficultyRecord> load_difficulty_table(const std::string& path);

}  // namespace rlvr
