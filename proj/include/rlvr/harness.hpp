#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rlvr/analytics.hpp"
#include "rlvr/difficulty.hpp"
#include "rlvr/dump.hpp"
#include "rlvr/grpo.hpp"
#include "rlvr/policy.hpp"
#include "rlvr/rfgo.hpp"
#include "rlvr/task.hpp"
#include "rlvr/tsae.hpp"

namespace rlvr {

// Task id namespaces keep train/test/rewrite corpora structurally disjoint.
enum class IdSpace : uint64_t { Train = 1, Test = 2, Rewrite = 3, Warmup = 4, Probe = 5 };
inline uint64_t make_id(IdSpace ns, uint64_t index) { return (static_cast<uint64_t>(ns) << 32) | index; }

struct TaskGenConfig {
    int modulus = 97;
    int operand_range = 10;
    int chain_min = 1;
    int chain_max = 4;
    int train_count = 2000;
    int test_count = 600;
    int test_per_regime = 200;
};

struct WarmupConfig {
    int steps = 600;
    int batch = 16;
    double lr = 1e-3;
    int corpus = 1200;
    double rewrite_frac = 0.15;  // share of inverse-form examples
    int chain_max = 3;           // warmup never sees the longest chains
};

struct AnalyticsConfig {
    double alpha = 1.0;
    double delta = 0.05;
    EmergingThresholds emerging;
    int eval_tasks = 256;       // fixed corpus for ReasonScore statistics
    int checkpoint_every = 2;   // trajectory cadence in steps
};

struct ExperimentConfig {
    uint64_t seed = 1;
    std::string out_dir = "runs/exp";
    PolicyConfig model;
    TaskGenConfig tasks;
    WarmupConfig warmup;
    GrpoConfig grpo;
    TsaeConfig tsae;
    RfgoConfig rfgo;
    AnalyticsConfig analytics;
    std::string subset = "full";   // full | easy@k | medium@k | hard@k | aughard@k | easy+medium@k
    int one_sample_count = 10;     // tasks per regime in the one-sample recipe
    int one_sample_steps = 200;

    static ExperimentConfig from_json_file(const std::string& path);
    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
    // Resolved config with per-field provenance (paper value | scaled | invented).
    std::string resolved_json_text() const;
};

// --- corpora and the base policy ---------------------------------------------

std::vector<TaskInstance> generate_corpus(const TaskGenConfig& cfg, int count, IdSpace ns,
                                          uint64_t seed);

// Diagnostic task whose stored answer lies outside the emittable answer
// domain, so every verification fails.
TaskInstance make_unsolvable_task(const TaskKnobs& knobs, uint64_t id, Rng& rng);

// Supervised warmup on canonical solutions (masked cross-entropy over response
// tokens). This stands in for the pretrained base model: after warmup the
// policy solves short chains reliably and long chains rarely, giving the
// difficulty regimes their spread.
void warmup_policy(PolicyParams& policy, const std::vector<TaskInstance>& corpus,
                   const WarmupConfig& cfg, uint64_t seed);

// init + deterministic warmup corpus + warmup.
PolicyParams make_base_policy(const ExperimentConfig& cfg);

// --- evaluation ----------------------------------------------------------------

struct TestCorpus {
    std::vector<TaskInstance> tasks;
    std::vector<Regime> regimes;  // aligned with tasks
};

// Pre-partition a candidate pool with the base policy into test_per_regime
// tasks per regime (pool drawn from the Test id namespace).
TestCorpus build_test_corpus(const PolicyParams& base, const TaskGenConfig& cfg, uint64_t seed,
                             int rollouts_per_task, double temperature, int max_new);

struct EvalResult {
    double acc_easy = 0.0, acc_medium = 0.0, acc_hard = 0.0, acc_all = 0.0;
};

// Greedy decoding + verifier scoring per regime. Rejects when a test id also
// appears in the training id set.
EvalResult eval_pass1(const PolicyParams& policy, const TestCorpus& corpus,
                      const std::vector<uint64_t>& train_ids, int max_new);

Evaluator make_evaluator(const TestCorpus& corpus, std::vector<uint64_t> train_ids, int max_new);

// Test corpus persistence: tasks as jsonl plus an id -> regime map.
void save_test_corpus(const std::string& tasks_path, const std::string& regimes_path,
                      const TestCorpus& corpus);
TestCorpus load_test_corpus(const std::string& tasks_path, const std::string& regimes_path);

// --- activation dumps ------------------------------------------------------------

// Teacher-forced forward over each task's stored rollout; residual vectors at
// response positions are written sequence by sequence.
ActivationDump dump_activations(const PolicyParams& policy, const std::vector<TaskInstance>& tasks,
                                const std::vector<std::vector<int>>& responses, int tap_layer,
                                int chunk_size, const std::string& checkpoint_id);

// Rollouts for a dump corpus: one sampled response per task (deterministic
// substreams of seed).
std::vector<std::vector<int>> dump_rollouts(const PolicyParams& policy,
                                            const std::vector<TaskInstance>& tasks,
                                            double temperature, int max_new, uint64_t seed);

// --- metrics -----------------------------------------------------------------------

// Line-delimited metrics records with fixed field names; RFGO diagnostics are
// appended when present.
std::string metrics_to_line(const StepMetrics& m);
void save_metrics(const std::string& path, const std::vector<StepMetrics>& series);

// --- recipes ------------------------------------------------------------------------

// Known names: subset-compare, curriculum, one-sample, feature-dynamics,
// aughard, rfgo, zero-variance. Unknown names raise an error listing these.
// Returns the artifact directory.
std::string run_recipe(const std::string& name, const ExperimentConfig& cfg);

std::vector<std::string> recipe_names();

// Subset selection shared by the train CLI and recipes.
std::vector<TaskInstance> select_subset(const std::string& selector,
                                        const std::vector<TaskInstance>& train_tasks,
                                        const std::vector<DifficultyRecord>& table);

}  // namespace rlvr
