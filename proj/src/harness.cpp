#include "rlvr/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "rlvr/parallel.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace rlvr {

// --- config ------------------------------------------------------------------

namespace {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void read_model(const nlohmann::json& j, PolicyConfig& c) {
    read_field(j, "vocab", c.vocab);
    read_field(j, "dim", c.dim);
    read_field(j, "layers", c.layers);
    read_field(j, "heads", c.heads);
    read_field(j, "max_seq", c.max_seq);
    read_field(j, "tap_layer", c.tap_layer);
}

void read_tasks(const nlohmann::json& j, TaskGenConfig& c) {
    read_field(j, "modulus", c.modulus);
    read_field(j, "operand_range", c.operand_range);
    read_field(j, "chain_min", c.chain_min);
    read_field(j, "chain_max", c.chain_max);
    read_field(j, "train_count", c.train_count);
    read_field(j, "test_count", c.test_count);
    read_field(j, "test_per_regime", c.test_per_regime);
}

void read_warmup(const nlohmann::json& j, WarmupConfig& c) {
    read_field(j, "steps", c.steps);
    read_field(j, "batch", c.batch);
    read_field(j, "lr", c.lr);
    read_field(j, "corpus", c.corpus);
    read_field(j, "rewrite_frac", c.rewrite_frac);
    read_field(j, "chain_max", c.chain_max);
}

void read_grpo(const nlohmann::json& j, GrpoConfig& c) {
    read_field(j, "group", c.group);
    read_field(j, "clip_eps", c.clip_eps);
    read_field(j, "kl_beta", c.kl_beta);
    read_field(j, "lr", c.lr);
    read_field(j, "steps", c.steps);
    read_field(j, "batch", c.batch);
    read_field(j, "minibatch", c.minibatch);
    read_field(j, "temperature", c.temperature);
    read_field(j, "max_new", c.max_new);
    read_field(j, "eval_every", c.eval_every);
}

void read_tsae(const nlohmann::json& j, TsaeConfig& c) {
    read_field(j, "dim", c.dim);
    read_field(j, "features", c.features);
    read_field(j, "high", c.high);
    read_field(j, "topk", c.topk);
    read_field(j, "lambda_contr", c.lambda_contr);
    read_field(j, "lr", c.lr);
    read_field(j, "steps", c.steps);
    read_field(j, "batch_pairs", c.batch_pairs);
    read_field(j, "chunk", c.chunk);
    read_field(j, "holdout_frac", c.holdout_frac);
}

void read_rfgo(const nlohmann::json& j, RfgoConfig& c) {
    read_field(j, "half_life", c.half_life);
    read_field(j, "beta_w", c.beta_w);
    read_field(j, "clip_w", c.clip_w);
    read_field(j, "safety_ratio", c.safety_ratio);
    read_field(j, "top_frac", c.top_frac);
    read_field(j, "use_weights", c.use_weights);
    read_field(j, "use_proxy", c.use_proxy);
}

void read_analytics(const nlohmann::json& j, AnalyticsConfig& c) {
    read_field(j, "alpha", c.alpha);
    read_field(j, "delta", c.delta);
    read_field(j, "spearman_on", c.emerging.spearman_on);
    read_field(j, "spearman_off", c.emerging.spearman_off);
    read_field(j, "gain_ratio", c.emerging.gain_ratio);
    read_field(j, "top_gain_frac", c.emerging.top_gain_frac);
    read_field(j, "eval_tasks", c.eval_tasks);
    read_field(j, "checkpoint_every", c.checkpoint_every);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ExperimentConfig c;
    read_field(j, "seed", c.seed);
    read_field(j, "out_dir", c.out_dir);
    read_field(j, "subset", c.subset);
    read_field(j, "one_sample_count", c.one_sample_count);
    read_field(j, "one_sample_steps", c.one_sample_steps);
    if (j.contains("model")) read_model(j.at("model"), c.model);
    if (j.contains("tasks")) read_tasks(j.at("tasks"), c.tasks);
    if (j.contains("warmup")) read_warmup(j.at("warmup"), c.warmup);
    if (j.contains("grpo")) read_grpo(j.at("grpo"), c.grpo);
    if (j.contains("tsae")) read_tsae(j.at("tsae"), c.tsae);
    if (j.contains("rfgo")) read_rfgo(j.at("rfgo"), c.rfgo);
    if (j.contains("analytics")) read_analytics(j.at("analytics"), c.analytics);
    c.tsae.dim = c.model.dim;  // the probe reads the policy's residual stream
    return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
    ordered_json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["subset"] = subset;
    j["one_sample_count"] = one_sample_count;
    j["one_sample_steps"] = one_sample_steps;
    j["model"] = {{"vocab", model.vocab},   {"dim", model.dim},
                  {"layers", model.layers}, {"heads", model.heads},
                  {"max_seq", model.max_seq}, {"tap_layer", model.tap_layer}};
    j["tasks"] = {{"modulus", tasks.modulus},
                  {"operand_range", tasks.operand_range},
                  {"chain_min", tasks.chain_min},
                  {"chain_max", tasks.chain_max},
                  {"train_count", tasks.train_count},
                  {"test_count", tasks.test_count},
                  {"test_per_regime", tasks.test_per_regime}};
    j["warmup"] = {{"steps", warmup.steps},   {"batch", warmup.batch},
                   {"lr", warmup.lr},         {"corpus", warmup.corpus},
                   {"rewrite_frac", warmup.rewrite_frac}, {"chain_max", warmup.chain_max}};
    j["grpo"] = {{"group", grpo.group},       {"clip_eps", grpo.clip_eps},
                 {"kl_beta", grpo.kl_beta},   {"lr", grpo.lr},
                 {"steps", grpo.steps},       {"batch", grpo.batch},
                 {"minibatch", grpo.minibatch}, {"temperature", grpo.temperature},
                 {"max_new", grpo.max_new},   {"eval_every", grpo.eval_every}};
    j["tsae"] = {{"dim", tsae.dim},
                 {"features", tsae.features},
                 {"high", tsae.high},
                 {"topk", tsae.topk},
                 {"lambda_contr", tsae.lambda_contr},
                 {"lr", tsae.lr},
                 {"steps", tsae.steps},
                 {"batch_pairs", tsae.batch_pairs},
                 {"chunk", tsae.chunk},
                 {"holdout_frac", tsae.holdout_frac}};
    j["rfgo"] = {{"half_life", rfgo.half_life},     {"beta_w", rfgo.beta_w},
                 {"clip_w", rfgo.clip_w},           {"safety_ratio", rfgo.safety_ratio},
                 {"top_frac", rfgo.top_frac},       {"use_weights", rfgo.use_weights},
                 {"use_proxy", rfgo.use_proxy}};
    j["analytics"] = {{"alpha", analytics.alpha},
                      {"delta", analytics.delta},
                      {"spearman_on", analytics.emerging.spearman_on},
                      {"spearman_off", analytics.emerging.spearman_off},
                      {"gain_ratio", analytics.emerging.gain_ratio},
                      {"top_gain_frac", analytics.emerging.top_gain_frac},
                      {"eval_tasks", analytics.eval_tasks},
                      {"checkpoint_every", analytics.checkpoint_every}};
    return j.dump(2);
}

namespace {

// Provenance of every defaulted field: paper value, scaled analog of a paper
// value, or invented plumbing.
const std::map<std::string, std::string>& provenance_table() {
    static const std::map<std::string, std::string> t = {
        {"seed", "invented"},
        {"out_dir", "invented"},
        {"subset", "invented"},
        {"one_sample_count", "paper"},   // 10 problems per regime
        {"one_sample_steps", "scaled"},
        {"model.vocab", "scaled"},
        {"model.dim", "scaled"},
        {"model.layers", "scaled"},
        {"model.heads", "scaled"},
        {"model.max_seq", "scaled"},
        {"model.tap_layer", "scaled"},   // layer-16 analog at mid depth
        {"tasks.modulus", "invented"},
        {"tasks.operand_range", "invented"},
        {"tasks.chain_min", "invented"},
        {"tasks.chain_max", "invented"},
        {"tasks.train_count", "scaled"},   // 7,500 training problems
        {"tasks.test_count", "scaled"},    // 5,000 test problems
        {"tasks.test_per_regime", "invented"},
        {"warmup.steps", "invented"},
        {"warmup.batch", "invented"},
        {"warmup.lr", "invented"},
        {"warmup.corpus", "invented"},
        {"warmup.rewrite_frac", "invented"},
        {"warmup.chain_max", "invented"},
        {"grpo.group", "paper"},          // G = 8
        {"grpo.clip_eps", "invented"},
        {"grpo.kl_beta", "paper"},        // 0.001
        {"grpo.lr", "scaled"},            // 3e-6 at full scale
        {"grpo.steps", "paper"},          // 58-step trajectory span
        {"grpo.batch", "scaled"},         // 128 at full scale
        {"grpo.minibatch", "scaled"},     // 64 at full scale
        {"grpo.temperature", "invented"},
        {"grpo.max_new", "scaled"},       // 3072 at full scale
        {"grpo.eval_every", "invented"},
        {"tsae.dim", "scaled"},
        {"tsae.features", "scaled"},      // 24,576 at full scale
        {"tsae.high", "scaled"},
        {"tsae.topk", "invented"},
        {"tsae.lambda_contr", "invented"},
        {"tsae.lr", "invented"},
        {"tsae.steps", "invented"},
        {"tsae.batch_pairs", "invented"},
        {"tsae.chunk", "scaled"},         // 16,384-token chunks at full scale
        {"tsae.holdout_frac", "invented"},
        {"rfgo.half_life", "scaled"},     // 128 tokens at full scale
        {"rfgo.beta_w", "invented"},
        {"rfgo.clip_w", "paper"},         // eps_w = 0.2
        {"rfgo.safety_ratio", "paper"},   // ratio > 4.0
        {"rfgo.top_frac", "invented"},
        {"rfgo.use_weights", "invented"},
        {"rfgo.use_proxy", "invented"},
        {"analytics.alpha", "invented"},
        {"analytics.delta", "invented"},
        {"analytics.spearman_on", "paper"},
        {"analytics.spearman_off", "paper"},
        {"analytics.gain_ratio", "paper"},
        {"analytics.top_gain_frac", "paper"},
        {"analytics.eval_tasks", "invented"},
        {"analytics.checkpoint_every", "paper"},  // checkpoints every 2 steps
    };
    return t;
}

void flatten(const ordered_json& j, const std::string& prefix, ordered_json& out) {
    for (const auto& [key, value] : j.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (value.is_object()) {
            flatten(value, path, out);
        } else {
            const auto& table = provenance_table();
            const auto it = table.find(path);
            out[path] = {{"value", value}, {"provenance", it == table.end() ? "invented" : it->second}};
        }
    }
}

}  // namespace

std::string ExperimentConfig::resolved_json_text() const {
    const ordered_json plain = ordered_json::parse(to_json_text());
    ordered_json out;
    flatten(plain, "", out);
    return out.dump(2);
}

// --- corpora -----------------------------------------------------------------

std::vector<TaskInstance> generate_corpus(const TaskGenConfig& cfg, int count, IdSpace ns,
                                          uint64_t seed) {
    if (cfg.chain_min < 1 || cfg.chain_max < cfg.chain_min)
        throw std::invalid_argument("generate_corpus: bad chain range");
    std::vector<TaskInstance> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        TaskKnobs knobs;
        knobs.operand_range = cfg.operand_range;
        knobs.modulus = cfg.modulus;
        Rng rng(mix64(seed, static_cast<uint64_t>(ns), static_cast<uint64_t>(i)));
        knobs.chain_length = cfg.chain_min + rng.uniform_index(cfg.chain_max - cfg.chain_min + 1);
        out.push_back(generate_task(knobs, make_id(ns, static_cast<uint64_t>(i)), rng));
    }
    return out;
}

TaskInstance make_unsolvable_task(const TaskKnobs& knobs, uint64_t id, Rng& rng) {
    TaskInstance t = generate_task(knobs, id, rng);
    t.answer = -1;  // outside the emittable answer domain; every verify fails
    return t;
}

// --- warmup -------------------------------------------------------------------

void warmup_policy(PolicyParams& policy, const std::vector<TaskInstance>& corpus,
                   const WarmupConfig& cfg, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("warmup: empty corpus");
    struct Example {
        std::vector<int> tokens;
        std::vector<int> targets;
        std::vector<uint8_t> mask;
    };
    std::vector<Example> examples;
    examples.reserve(corpus.size());
    for (const auto& task : corpus) {
        Example e;
        e.tokens = task.prompt;
        const auto response = canonical_response(task);
        e.tokens.insert(e.tokens.end(), response.begin(), response.end());
        if (static_cast<int>(e.tokens.size()) > policy.cfg.max_seq) continue;
        const size_t t = e.tokens.size();
        e.targets.assign(e.tokens.begin() + 1, e.tokens.end());
        e.mask.assign(t - 1, 0);
        for (size_t i = 0; i + 1 < t; ++i)
            if (i + 1 >= task.prompt.size()) e.mask[i] = 1;  // predict response tokens only
        examples.push_back(std::move(e));
    }
    if (examples.empty()) throw std::invalid_argument("warmup: no example fits the context window");

    Rng rng(mix64(seed, 0x7761726dull));
    AdamState opt(AdamConfig{cfg.lr});
    policy.set_requires_grad(true);
    const auto params = policy.parameters();
    for (int step = 0; step < cfg.steps; ++step) {
        policy.zero_grad();
        const double inv_b = 1.0 / static_cast<double>(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const Example& e = examples[rng.uniform_int(examples.size())];
            ForwardResult fw = forward_logits(policy, e.tokens);
            TensorPtr rows = slice_rows(fw.logits, 0, static_cast<int>(e.tokens.size()) - 1);
            TensorPtr loss = masked_cross_entropy(rows, e.targets, e.mask);
            backward(scale(loss, inv_b));
        }
        opt.step(params);
    }
    policy.zero_grad();
    policy.set_requires_grad(false);
}

PolicyParams make_base_policy(const ExperimentConfig& cfg) {
    PolicyParams policy = init_policy(cfg.model, cfg.seed);
    TaskGenConfig warm_tasks = cfg.tasks;
    warm_tasks.chain_max = std::min(cfg.tasks.chain_max, cfg.warmup.chain_max);
    std::vector<TaskInstance> corpus =
        generate_corpus(warm_tasks, cfg.warmup.corpus, IdSpace::Warmup, cfg.seed);
    // A slice of inverse-form (backward-rewritten) examples teaches the answer
    // format for rewrites without solving them for the policy.
    if (cfg.warmup.rewrite_frac > 0.0) {
        const size_t want = static_cast<size_t>(cfg.warmup.rewrite_frac * corpus.size());
        std::vector<TaskInstance> rewrites;
        for (size_t i = 0; i < corpus.size() && rewrites.size() < want; ++i) {
            if (corpus[i].knobs.chain_length > 2) continue;
            auto r = rewrite_backward(corpus[i], make_id(IdSpace::Rewrite, i * 64));
            for (auto& t : r) {
                if (rewrites.size() >= want) break;
                rewrites.push_back(std::move(t));
            }
        }
        corpus.insert(corpus.end(), rewrites.begin(), rewrites.end());
    }
    warmup_policy(policy, corpus, cfg.warmup, cfg.seed);
    return policy;
}

// --- evaluation -----------------------------------------------------------------

TestCorpus build_test_corpus(const PolicyParams& base, const TaskGenConfig& cfg, uint64_t seed,
                             int rollouts_per_task, double temperature, int max_new) {
    const int per = cfg.test_per_regime;
    TestCorpus out;
    std::vector<int> have(3, 0);
    int pool_index = 0;
    const int max_pool = std::max(cfg.test_count * 8, per * 24);
    while ((have[0] < per || have[1] < per || have[2] < per) && pool_index < max_pool) {
        const int chunk = std::min(256, max_pool - pool_index);
        TaskGenConfig gen = cfg;
        std::vector<TaskInstance> pool;
        for (int i = 0; i < chunk; ++i) {
            TaskKnobs knobs;
            knobs.operand_range = cfg.operand_range;
            knobs.modulus = cfg.modulus;
            Rng rng(mix64(seed, static_cast<uint64_t>(IdSpace::Test),
                          static_cast<uint64_t>(pool_index + i)));
            knobs.chain_length = cfg.chain_min + rng.uniform_index(cfg.chain_max - cfg.chain_min + 1);
            pool.push_back(
                generate_task(knobs, make_id(IdSpace::Test, static_cast<uint64_t>(pool_index + i)), rng));
        }
        pool_index += chunk;
        const auto table =
            rollout_success_table(base, pool, rollouts_per_task, temperature, max_new, mix64(seed, 0x74626cull));
        const auto split = partition(table, rollouts_per_task);
        auto take = [&](const std::vector<uint64_t>& ids, Regime regime, int bucket) {
            for (uint64_t id : ids) {
                if (have[bucket] >= per) return;
                for (const auto& t : pool)
                    if (t.id == id) {
                        out.tasks.push_back(t);
                        out.regimes.push_back(regime);
                        ++have[bucket];
                        break;
                    }
            }
        };
        take(split.easy, Regime::Easy, 0);
        take(split.medium, Regime::Medium, 1);
        take(split.hard, Regime::Hard, 2);
    }
    return out;
}

EvalResult eval_pass1(const PolicyParams& policy, const TestCorpus& corpus,
                      const std::vector<uint64_t>& train_ids, int max_new) {
    if (corpus.tasks.empty()) throw std::invalid_argument("eval_pass1: empty corpus");
    for (const auto& t : corpus.tasks)
        for (uint64_t id : train_ids)
            if (t.id == id)
                throw std::invalid_argument("eval_pass1: test task overlaps the training set");
    std::vector<uint8_t> correct(corpus.tasks.size(), 0);
    parallel_for(corpus.tasks.size(), [&](size_t start, size_t end) {
        InferenceWorkspace ws;
        Rng rng(0);  // greedy decoding draws nothing
        for (size_t i = start; i < end; ++i) {
            const RolloutSample s =
                sample_rollout(policy, corpus.tasks[i].prompt, 0.0, max_new, rng, &ws);
            correct[i] = static_cast<uint8_t>(verify(s.response, corpus.tasks[i]).reward);
        }
    });
    double hits[3] = {0, 0, 0}, totals[3] = {0, 0, 0};
    for (size_t i = 0; i < corpus.tasks.size(); ++i) {
        const int r = static_cast<int>(corpus.regimes[i]);
        hits[r] += correct[i];
        totals[r] += 1.0;
    }
    EvalResult out;
    out.acc_easy = totals[0] > 0 ? hits[0] / totals[0] : 0.0;
    out.acc_medium = totals[1] > 0 ? hits[1] / totals[1] : 0.0;
    out.acc_hard = totals[2] > 0 ? hits[2] / totals[2] : 0.0;
    const double all = totals[0] + totals[1] + totals[2];
    out.acc_all = all > 0 ? (hits[0] + hits[1] + hits[2]) / all : 0.0;
    return out;
}

Evaluator make_evaluator(const TestCorpus& corpus, std::vector<uint64_t> train_ids, int max_new) {
    return [corpus, train_ids = std::move(train_ids), max_new](const PolicyParams& p) {
        const EvalResult r = eval_pass1(p, corpus, train_ids, max_new);
        return std::array<double, 4>{r.acc_easy, r.acc_medium, r.acc_hard, r.acc_all};
    };
}

void save_test_corpus(const std::string& tasks_path, const std::string& regimes_path,
                      const TestCorpus& corpus) {
    save_tasks(tasks_path, corpus.tasks);
    std::ofstream f(regimes_path, std::ios::trunc);
    if (!f) throw std::runtime_error("save_test_corpus: cannot open '" + regimes_path + "'");
    for (size_t i = 0; i < corpus.tasks.size(); ++i)
        f << corpus.tasks[i].id << '\t' << regime_name(corpus.regimes[i]) << '\n';
}

TestCorpus load_test_corpus(const std::string& tasks_path, const std::string& regimes_path) {
    TestCorpus out;
    out.tasks = load_tasks(tasks_path);
    std::map<uint64_t, Regime> by_id;
    std::ifstream f(regimes_path);
    if (!f) throw std::runtime_error("load_test_corpus: cannot open '" + regimes_path + "'");
    uint64_t id;
    std::string name;
    while (f >> id >> name)
        by_id[id] = name == "easy" ? Regime::Easy : name == "hard" ? Regime::Hard : Regime::Medium;
    for (const auto& t : out.tasks) {
        const auto it = by_id.find(t.id);
        if (it == by_id.end())
            throw std::runtime_error("load_test_corpus: regimes file missing task " + std::to_string(t.id));
        out.regimes.push_back(it->second);
    }
    return out;
}

// --- dumps ------------------------------------------------------------------------

ActivationDump dump_activations(const PolicyParams& policy, const std::vector<TaskInstance>& tasks,
                                const std::vector<std::vector<int>>& responses, int tap_layer,
                                int chunk_size, const std::string& checkpoint_id) {
    if (tasks.size() != responses.size())
        throw std::invalid_argument("dump_activations: one response per task required");
    ActivationDump dump;
    dump.tap_layer = tap_layer;
    dump.checkpoint_id = checkpoint_id;
    dump.dim = policy.cfg.dim;
    dump.chunk_size = chunk_size;

    struct SeqOut {
        std::vector<int> toks;
        std::vector<double> vecs;
    };
    std::vector<SeqOut> per_task(tasks.size());
    parallel_for(tasks.size(), [&](size_t start, size_t end) {
        InferenceWorkspace ws;
        for (size_t i = start; i < end; ++i) {
            if (responses[i].empty()) continue;
            std::vector<int> tokens = tasks[i].prompt;
            tokens.insert(tokens.end(), responses[i].begin(), responses[i].end());
            ws.forward(policy, tokens);
            const auto& tap = ws.tap(tap_layer);
            const int d = policy.cfg.dim;
            SeqOut& so = per_task[i];
            so.toks = responses[i];
            so.vecs.resize(responses[i].size() * static_cast<size_t>(d));
            for (size_t t = 0; t < responses[i].size(); ++t)
                std::copy_n(&tap[(tasks[i].prompt.size() + t) * static_cast<size_t>(d)], d,
                            &so.vecs[t * static_cast<size_t>(d)]);
        }
    });
    for (size_t i = 0; i < tasks.size(); ++i)
        if (!per_task[i].toks.empty()) dump.append_sequence(tasks[i].id, per_task[i].toks, per_task[i].vecs);
    return dump;
}

std::vector<std::vector<int>> dump_rollouts(const PolicyParams& policy,
                                            const std::vector<TaskInstance>& tasks,
                                            double temperature, int max_new, uint64_t seed) {
    std::vector<std::vector<int>> out(tasks.size());
    parallel_for(tasks.size(), [&](size_t start, size_t end) {
        InferenceWorkspace ws;
        for (size_t i = start; i < end; ++i) {
            Rng rng(mix64(seed, 0x64756d70ull, tasks[i].id));
            out[i] = sample_rollout(policy, tasks[i].prompt, temperature, max_new, rng, &ws).response;
        }
    });
    return out;
}

// --- metrics -----------------------------------------------------------------------

std::string metrics_to_line(const StepMetrics& m) {
    ordered_json j;
    j["step"] = m.step;
    j["reward_mean"] = m.reward_mean;
    j["kl"] = m.kl;
    j["resp_len"] = m.resp_len;
    j["acc_easy"] = m.acc_easy;
    j["acc_medium"] = m.acc_medium;
    j["acc_hard"] = m.acc_hard;
    j["acc_all"] = m.acc_all;
    if (m.rfgo_mean_abs >= 0.0) {
        j["rfgo_mean_abs"] = m.rfgo_mean_abs;
        j["rfgo_clamped_frac"] = m.rfgo_clamped_frac;
        j["rfgo_proxy_frac"] = m.rfgo_proxy_frac;
    }
    return j.dump();
}

void save_metrics(const std::string& path, const std::vector<StepMetrics>& series) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("save_metrics: cannot open '" + path + "'");
    for (const auto& m : series) f << metrics_to_line(m) << '\n';
}

// --- subsets -----------------------------------------------------------------------

namespace {

std::vector<TaskInstance> tasks_by_id(const std::vector<TaskInstance>& all,
                                      const std::vector<uint64_t>& ids) {
    std::map<uint64_t, const TaskInstance*> index;
    for (const auto& t : all) index[t.id] = &t;
    std::vector<TaskInstance> out;
    out.reserve(ids.size());
    for (uint64_t id : ids) {
        const auto it = index.find(id);
        if (it == index.end()) throw std::invalid_argument("subset: unknown task id");
        out.push_back(*it->second);
    }
    return out;
}

}  // namespace

std::vector<TaskInstance> select_subset(const std::string& selector,
                                        const std::vector<TaskInstance>& train_tasks,
                                        const std::vector<DifficultyRecord>& table) {
    if (selector == "full") return train_tasks;
    const auto at = selector.find('@');
    if (at == std::string::npos)
        throw std::invalid_argument("subset selector '" + selector +
                                    "' is not full|easy@k|medium@k|hard@k|aughard@k|easy+medium@k");
    const std::string kind = selector.substr(0, at);
    const int k = std::stoi(selector.substr(at + 1));
    const RegimePartition split = partition(table, k);
    if (kind == "easy") return tasks_by_id(train_tasks, split.easy);
    if (kind == "medium") return tasks_by_id(train_tasks, split.medium);
    if (kind == "hard") return tasks_by_id(train_tasks, split.hard);
    if (kind == "easy+medium") {
        std::vector<uint64_t> ids = split.easy;
        ids.insert(ids.end(), split.medium.begin(), split.medium.end());
        return tasks_by_id(train_tasks, ids);
    }
    if (kind == "aughard") {
        const auto hard = tasks_by_id(train_tasks, split.hard);
        std::vector<TaskInstance> out;
        for (size_t i = 0; i < hard.size(); ++i) {
            auto r = rewrite_backward(hard[i], make_id(IdSpace::Rewrite, i * 64));
            out.insert(out.end(), r.begin(), r.end());
        }
        return out;
    }
    throw std::invalid_argument("unknown subset kind '" + kind + "'");
}

// --- recipes -------------------------------------------------------------------------

namespace {

struct RecipeContext {
    ExperimentConfig cfg;
    fs::path dir;
    std::vector<TaskInstance> train;
    std::vector<uint64_t> train_ids;
    PolicyParams base;
    TestCorpus test;
    std::vector<DifficultyRecord> table;
};

std::vector<TaskInstance> step_batch(const std::vector<TaskInstance>& subset, int batch,
                                     uint64_t seed, int step) {
    std::vector<TaskInstance> out;
    Rng rng(mix64(seed, 0x6261746368ull, static_cast<uint64_t>(step)));
    if (static_cast<int>(subset.size()) <= batch) {
        out = subset;
        return out;
    }
    // Partial Fisher-Yates: a uniform batch without replacement.
    std::vector<size_t> idx(subset.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < batch; ++i) {
        const size_t j = i + rng.uniform_int(idx.size() - i);
        std::swap(idx[i], idx[j]);
        out.push_back(subset[idx[i]]);
    }
    return out;
}

RecipeContext prepare_context(const std::string& name, const ExperimentConfig& cfg,
                              bool need_test = true, bool need_table = true) {
    RecipeContext ctx;
    ctx.cfg = cfg;
    ctx.dir = fs::path(cfg.out_dir) / name;
    fs::create_directories(ctx.dir);
    {
        std::ofstream f(ctx.dir / "resolved_config.json", std::ios::trunc);
        f << cfg.resolved_json_text() << '\n';
    }
    ctx.train = generate_corpus(cfg.tasks, cfg.tasks.train_count, IdSpace::Train, cfg.seed);
    save_tasks((ctx.dir / "tasks_train.jsonl").string(), ctx.train);
    for (const auto& t : ctx.train) ctx.train_ids.push_back(t.id);
    ctx.base = make_base_policy(cfg);
    ctx.base.to_checkpoint().save((ctx.dir / "base.ckpt").string());
    if (need_test) {
        ctx.test = build_test_corpus(ctx.base, cfg.tasks, cfg.seed, cfg.grpo.group,
                                     cfg.grpo.temperature, cfg.grpo.max_new);
        save_test_corpus((ctx.dir / "tasks_test.jsonl").string(),
                         (ctx.dir / "test_regimes.tsv").string(), ctx.test);
    }
    if (need_table) {
        ctx.table = rollout_success_table(ctx.base, ctx.train, cfg.grpo.group, cfg.grpo.temperature,
                                          cfg.grpo.max_new, mix64(cfg.seed, 0x747261696eull));
        save_difficulty_table((ctx.dir / "table.tsv").string(), ctx.table);
    }
    return ctx;
}

struct RunOutcome {
    EvalResult final_eval;
    std::string metrics_path;
};

RunOutcome train_run(RecipeContext& ctx, const std::string& run_name,
                     const std::vector<TaskInstance>& subset, GrpoTrainer& trainer,
                     bool save_checkpoints) {
    const fs::path run_dir = ctx.dir / "runs" / run_name;
    fs::create_directories(run_dir);
    trainer.set_evaluator(make_evaluator(ctx.test, ctx.train_ids, ctx.cfg.grpo.max_new));
    std::vector<StepMetrics> series;
    for (int step = 1; step <= ctx.cfg.grpo.steps; ++step) {
        const auto batch = step_batch(subset, ctx.cfg.grpo.batch, trainer.seed(), step);
        series.push_back(trainer.train_step(batch, step));
        if (save_checkpoints && step % ctx.cfg.analytics.checkpoint_every == 0) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "step_%03d.ckpt", step);
            trainer.policy().to_checkpoint().save((run_dir / buf).string());
        }
    }
    const std::string metrics_path = (run_dir / "metrics.jsonl").string();
    save_metrics(metrics_path, series);
    trainer.policy().to_checkpoint().save((run_dir / "final.ckpt").string());
    RunOutcome out;
    out.final_eval = eval_pass1(trainer.policy(), ctx.test, ctx.train_ids, ctx.cfg.grpo.max_new);
    out.metrics_path = metrics_path;
    return out;
}

void write_summary(const fs::path& path, const std::vector<std::array<std::string, 6>>& rows) {
    std::ofstream f(path, std::ios::trunc);
    f << "subset\tn_tasks\tacc_easy\tacc_medium\tacc_hard\tacc_all\n";
    for (const auto& r : rows)
        f << r[0] << '\t' << r[1] << '\t' << r[2] << '\t' << r[3] << '\t' << r[4] << '\t' << r[5] << '\n';
}

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return buf;
}

std::string recipe_subset_compare(const ExperimentConfig& cfg) {
    RecipeContext ctx = prepare_context("subset-compare", cfg);
    const int k = cfg.grpo.group;
    std::vector<std::string> selectors = {"full", "easy@" + std::to_string(k),
                                          "medium@" + std::to_string(k), "hard@" + std::to_string(k),
                                          "easy+medium@" + std::to_string(k)};
    std::vector<std::array<std::string, 6>> rows;
    for (const auto& sel : selectors) {
        const auto subset = select_subset(sel, ctx.train, ctx.table);
        if (subset.empty()) {
            rows.push_back({sel, "0", "-", "-", "-", "-"});
            continue;
        }
        GrpoTrainer trainer(ctx.base.clone(), cfg.grpo, mix64(cfg.seed, fnv1a64(
            reinterpret_cast<const uint8_t*>(sel.data()), sel.size())));
        const RunOutcome out = train_run(ctx, sel, subset, trainer, false);
        rows.push_back({sel, std::to_string(subset.size()), fmt(out.final_eval.acc_easy),
                        fmt(out.final_eval.acc_medium), fmt(out.final_eval.acc_hard),
                        fmt(out.final_eval.acc_all)});
    }
    write_summary(ctx.dir / "summary.tsv", rows);
    return ctx.dir.string();
}

std::string recipe_curriculum(const ExperimentConfig& cfg) {
    RecipeContext ctx = prepare_context("curriculum", cfg);
    const auto subsets = curriculum_subsets(ctx.table, {2, 4, 8});
    std::vector<std::array<std::string, 6>> rows;
    for (const auto& cs : subsets) {
        const std::string name =
            (cs.side == CurriculumSubset::Side::Medium ? "medium@" : "hard@") + std::to_string(cs.k);
        if (cs.ids.empty()) {
            rows.push_back({name, "0", "-", "-", "-", "-"});
            continue;
        }
        const auto subset = tasks_by_id(ctx.train, cs.ids);
        GrpoTrainer trainer(ctx.base.clone(), cfg.grpo, mix64(cfg.seed, fnv1a64(
            reinterpret_cast<const uint8_t*>(name.data()), name.size())));
        const RunOutcome out = train_run(ctx, name, subset, trainer, false);
        rows.push_back({name, std::to_string(subset.size()), fmt(out.final_eval.acc_easy),
                        fmt(out.final_eval.acc_medium), fmt(out.final_eval.acc_hard),
                        fmt(out.final_eval.acc_all)});
    }
    write_summary(ctx.dir / "summary.tsv", rows);
    return ctx.dir.string();
}

std::string recipe_one_sample(const ExperimentConfig& cfg) {
    RecipeContext ctx = prepare_context("one-sample", cfg);
    const RegimePartition split = partition(ctx.table, cfg.grpo.group);
    const fs::path dir = ctx.dir / "series";
    fs::create_directories(dir);
    const Evaluator ev = make_evaluator(ctx.test, ctx.train_ids, cfg.grpo.max_new);
    auto run_side = [&](const std::vector<uint64_t>& ids, const std::string& regime) {
        const int n = std::min<int>(cfg.one_sample_count, static_cast<int>(ids.size()));
        for (int i = 0; i < n; ++i) {
            const auto tasks = tasks_by_id(ctx.train, {ids[i]});
            const auto series = one_sample_run(ctx.base.clone(), tasks[0], cfg.one_sample_steps,
                                               cfg.grpo, mix64(cfg.seed, ids[i]), ev);
            save_metrics((dir / (regime + "_" + std::to_string(ids[i]) + ".jsonl")).string(), series);
        }
    };
    run_side(split.easy, "easy");
    run_side(split.medium, "medium");
    run_side(split.hard, "hard");
    return ctx.dir.string();
}

// Shared by feature-dynamics and rfgo: full-data run with checkpoints, probe
// training on the final checkpoint, and ReasonScores from its dump.
struct ProbePipeline {
    TsaeParams probe;
    std::vector<double> scores;
    std::vector<TaskInstance> probe_corpus;
    PolicyParams full_final;
    fs::path full_run_dir;
};

ProbePipeline build_probe(RecipeContext& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    ProbePipeline out;
    GrpoTrainer trainer(ctx.base.clone(), cfg.grpo, mix64(cfg.seed, 0x66756c6cull));
    train_run(ctx, "full", ctx.train, trainer, true);
    out.full_final = trainer.policy().clone();
    out.full_run_dir = ctx.dir / "runs" / "full";

    out.probe_corpus = generate_corpus(cfg.tasks, cfg.analytics.eval_tasks, IdSpace::Probe, cfg.seed);
    const auto responses = dump_rollouts(out.full_final, out.probe_corpus, cfg.grpo.temperature,
                                         cfg.grpo.max_new, mix64(cfg.seed, 0x70726f6265ull));
    const ActivationDump dump =
        dump_activations(out.full_final, out.probe_corpus, responses, cfg.model.tap_layer,
                         cfg.tsae.chunk, "full-final");
    dump.save((ctx.dir / "probe_dump.bin").string());
    TsaeTrainReport rep;
    out.probe = train_tsae(dump, cfg.tsae, mix64(cfg.seed, 0x70726f62ull), &rep);
    out.probe.to_checkpoint().save((ctx.dir / "probe.ckpt").string());
    {
        ordered_json j;
        j["initial_holdout_mse"] = rep.initial_holdout_mse;
        j["final_holdout_mse"] = rep.final_holdout_mse;
        j["contrastive_used"] = rep.contrastive_used;
        j["warning"] = rep.warning;
        j["content_hash"] = out.probe.content_hash;
        std::ofstream f(ctx.dir / "probe_report.json", std::ios::trunc);
        f << j.dump(2) << '\n';
    }
    out.scores = reason_score(activation_stats(out.probe, dump, cfg.analytics.alpha));
    return out;
}

TrajectorySet trajectories_for_run(const RecipeContext& ctx, const ProbePipeline& pp,
                                   const fs::path& run_dir, const std::string& regime) {
    const ExperimentConfig& cfg = ctx.cfg;
    TrajectorySet set;
    set.probe_hash = pp.probe.content_hash;
    set.regime = regime;
    for (int step = cfg.analytics.checkpoint_every; step <= cfg.grpo.steps;
         step += cfg.analytics.checkpoint_every) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "step_%03d.ckpt", step);
        const fs::path ck = run_dir / buf;
        if (!fs::exists(ck)) continue;
        const PolicyParams policy = PolicyParams::from_checkpoint(Checkpoint::load(ck.string()));
        const auto responses = dump_rollouts(policy, pp.probe_corpus, cfg.grpo.temperature,
                                             cfg.grpo.max_new, mix64(cfg.seed, 0x747261ull,
                                                                     static_cast<uint64_t>(step)));
        const ActivationDump dump = dump_activations(policy, pp.probe_corpus, responses,
                                                     cfg.model.tap_layer, cfg.tsae.chunk, buf);
        set.checkpoints.push_back(step);
        set.scores.push_back(reason_score(activation_stats(pp.probe, dump, cfg.analytics.alpha)));
    }
    return set;
}

std::string recipe_feature_dynamics(const ExperimentConfig& cfg) {
    RecipeContext ctx = prepare_context("feature-dynamics", cfg);
    ProbePipeline pp = build_probe(ctx);

    const int k = cfg.grpo.group;
    std::map<std::string, TrajectorySet> by_regime;
    by_regime["full"] = trajectories_for_run(ctx, pp, pp.full_run_dir, "full");
    for (const std::string regime : {"easy", "medium", "hard"}) {
        const std::string sel = regime + "@" + std::to_string(k);
        const auto subset = select_subset(sel, ctx.train, ctx.table);
        if (subset.empty()) continue;
        GrpoTrainer trainer(ctx.base.clone(), cfg.grpo, mix64(cfg.seed, fnv1a64(
            reinterpret_cast<const uint8_t*>(sel.data()), sel.size())));
        train_run(ctx, sel, subset, trainer, true);
        by_regime[regime] = trajectories_for_run(ctx, pp, ctx.dir / "runs" / sel, regime);
    }
    for (const auto& [regime, set] : by_regime)
        save_trajectories((ctx.dir / ("trajectories_" + regime + ".tsv")).string(), set);

    ordered_json report;
    for (const auto& [regime, set] : by_regime) {
        const auto emerging = detect_emerging(by_regime, regime, cfg.analytics.emerging);
        report["emerging"][regime] = emerging;
        const auto shifts = classify_reinforced_suppressed(set, cfg.analytics.delta);
        int reinforced = 0, suppressed = 0, stable = 0;
        for (const auto s : shifts) {
            if (s == FeatureShift::Reinforced) ++reinforced;
            if (s == FeatureShift::Suppressed) ++suppressed;
            if (s == FeatureShift::Stable) ++stable;
        }
        report["cohorts"][regime] = {{"reinforced", reinforced},
                                     {"suppressed", suppressed},
                                     {"stable", stable}};
        // Plot-ready table: step vs cohort-mean score of the emerging features.
        std::ofstream f(ctx.dir / ("plot_emerging_" + regime + ".tsv"), std::ios::trunc);
        f << "step\tmean_score\n";
        for (size_t c = 0; c < set.checkpoints.size(); ++c) {
            double s = 0.0;
            for (int feat : emerging) s += set.scores[c][feat];
            f << set.checkpoints[c] << '\t'
              << (emerging.empty() ? 0.0 : s / static_cast<double>(emerging.size())) << '\n';
        }
        // Logit-lens semantics of the emerging cohort.
        for (int feat : emerging) {
            const auto sem = feature_semantics(pp.probe, pp.full_final, feat, 5);
            ordered_json toks = ordered_json::array();
            for (int t : sem.top_tokens) toks.push_back(vocab::token_name(t));
            report["semantics"][regime][std::to_string(feat)] = toks;
        }
    }
    std::ofstream f(ctx.dir / "feature_report.json", std::ios::trunc);
    f << report.dump(2) << '\n';
    return ctx.dir.string();
}

std::string recipe_aughard(const ExperimentConfig& cfg) {
    RecipeContext ctx = prepare_context("aughard", cfg);
    const int k = cfg.grpo.group;
    std::vector<std::array<std::string, 6>> rows;
    for (const std::string sel :
         {std::string("full"), "hard@" + std::to_string(k), "aughard@" + std::to_string(k)}) {
        const auto subset = select_subset(sel, ctx.train, ctx.table);
        if (subset.empty()) {
            rows.push_back({sel, "0", "-", "-", "-", "-"});
            continue;
        }
        if (sel.rfind("aughard", 0) == 0)
            save_tasks((ctx.dir / "tasks_aughard.jsonl").string(), subset);
        GrpoTrainer trainer(ctx.base.clone(), cfg.grpo, mix64(cfg.seed, fnv1a64(
            reinterpret_cast<const uint8_t*>(sel.data()), sel.size())));
        const RunOutcome out = train_run(ctx, sel, subset, trainer, false);
        rows.push_back({sel, std::to_string(subset.size()), fmt(out.final_eval.acc_easy),
                        fmt(out.final_eval.acc_medium), fmt(out.final_eval.acc_hard),
                        fmt(out.final_eval.acc_all)});
    }
    write_summary(ctx.dir / "summary.tsv", rows);
    return ctx.dir.string();
}

std::string recipe_rfgo(const ExperimentConfig& cfg) {
    RecipeContext ctx = prepare_context("rfgo", cfg);
    ProbePipeline pp = build_probe(ctx);
    const ReasonFeatureSet reason = feature_weights_from_scores(pp.scores, cfg.rfgo.top_frac);
    {
        ordered_json j;
        j["features"] = reason.features;
        j["omega"] = reason.omega;
        std::ofstream f(ctx.dir / "reason_features.json", std::ios::trunc);
        f << j.dump(2) << '\n';
    }
    const int k = cfg.grpo.group;
    const std::string hard_sel = "hard@" + std::to_string(k);
    const auto hard = select_subset(hard_sel, ctx.train, ctx.table);
    std::vector<std::array<std::string, 6>> rows;
    if (!hard.empty()) {
        GrpoTrainer plain(ctx.base.clone(), cfg.grpo, mix64(cfg.seed, 0x68617264ull));
        const RunOutcome base_out = train_run(ctx, hard_sel, hard, plain, false);
        rows.push_back({hard_sel, std::to_string(hard.size()), fmt(base_out.final_eval.acc_easy),
                        fmt(base_out.final_eval.acc_medium), fmt(base_out.final_eval.acc_hard),
                        fmt(base_out.final_eval.acc_all)});
        RfgoTrainer guided(ctx.base.clone(), cfg.grpo, cfg.rfgo, pp.probe, reason,
                           mix64(cfg.seed, 0x7266676full));
        const RunOutcome rf_out = train_run(ctx, "rfgo-" + hard_sel, hard, guided, false);
        rows.push_back({"rfgo-" + hard_sel, std::to_string(hard.size()),
                        fmt(rf_out.final_eval.acc_easy), fmt(rf_out.final_eval.acc_medium),
                        fmt(rf_out.final_eval.acc_hard), fmt(rf_out.final_eval.acc_all)});
    }
    write_summary(ctx.dir / "summary.tsv", rows);
    return ctx.dir.string();
}

std::string recipe_zero_variance(const ExperimentConfig& cfg) {
    RecipeContext ctx = prepare_context("zero-variance", cfg, /*need_test=*/false, /*need_table=*/false);
    // All-same-reward corpus: tasks whose stored answer is unreachable, so
    // every rollout group is all-fail.
    std::vector<TaskInstance> corpus;
    for (int i = 0; i < std::min(cfg.tasks.train_count, 64); ++i) {
        TaskKnobs knobs;
        knobs.modulus = cfg.tasks.modulus;
        knobs.operand_range = cfg.tasks.operand_range;
        Rng rng(mix64(cfg.seed, 0x7a76ull, static_cast<uint64_t>(i)));
        knobs.chain_length =
            cfg.tasks.chain_min + rng.uniform_index(cfg.tasks.chain_max - cfg.tasks.chain_min + 1);
        corpus.push_back(make_unsolvable_task(knobs, make_id(IdSpace::Train, 0x5a560000ull + i), rng));
    }
    GrpoTrainer trainer(ctx.base.clone(), cfg.grpo, mix64(cfg.seed, 0x7a76727ull));
    const double gap = trainer.kl_domination_gap(step_batch(corpus, cfg.grpo.batch, cfg.seed, 0), 0);
    std::vector<StepMetrics> series;
    for (int step = 1; step <= cfg.grpo.steps; ++step)
        series.push_back(trainer.train_step(step_batch(corpus, cfg.grpo.batch, trainer.seed(), step), step));
    save_metrics((ctx.dir / "metrics.jsonl").string(), series);
    ordered_json j;
    j["reward_gradient_gap"] = gap;
    j["reward_term_absent"] = gap <= 1e-9;
    j["final_kl"] = series.empty() ? 0.0 : series.back().kl;
    j["final_reward_mean"] = series.empty() ? 0.0 : series.back().reward_mean;
    std::ofstream f(ctx.dir / "zero_variance_report.json", std::ios::trunc);
    f << j.dump(2) << '\n';
    return ctx.dir.string();
}

}  // namespace

std::vector<std::string> recipe_names() {
    return {"subset-compare", "curriculum", "one-sample", "feature-dynamics",
            "aughard",        "rfgo",       "zero-variance"};
}

std::string run_recipe(const std::string& name, const ExperimentConfig& cfg) {
    if (name == "subset-compare") return recipe_subset_compare(cfg);
    if (name == "curriculum") return recipe_curriculum(cfg);
    if (name == "one-sample") return recipe_one_sample(cfg);
    if (name == "feature-dynamics") return recipe_feature_dynamics(cfg);
    if (name == "aughard") return recipe_aughard(cfg);
    if (name == "rfgo") return recipe_rfgo(cfg);
    if (name == "zero-variance") return recipe_zero_variance(cfg);
    std::string known;
    for (const auto& n : recipe_names()) known += (known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown recipe '" + name + "'; known recipes: " + known);
}

}  // namespace rlvr
