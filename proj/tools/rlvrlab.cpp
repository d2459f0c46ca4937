// Command-line front end for the desk-scale RLVR laboratory: task generation,
// difficulty tables, GRPO / RFGO training, activation dumps, T-SAE probes,
// feature analytics, backward rewriting, evaluation, and end-to-end recipes.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rlvr/harness.hpp"

namespace fs = std::filesystem;
using namespace rlvr;

namespace {

// Config file + dotted-path overrides (--set grpo.steps=10).
ExperimentConfig load_config(const std::string& config_path, const std::vector<std::string>& sets,
                             uint64_t seed_override, const std::string& out_override) {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw std::runtime_error("cannot open config '" + config_path + "'");
        f >> j;
    }
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::runtime_error("--set expects key=value, got '" + kv + "'");
        const std::string path = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        nlohmann::json* node = &j;
        std::stringstream ss(path);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) parts.push_back(part);
        for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(value);
        } catch (...) {
            parsed = value;  // bare strings
        }
        (*node)[parts.back()] = parsed;
    }
    ExperimentConfig cfg = ExperimentConfig::from_json_text(j.dump());
    if (seed_override != UINT64_MAX) cfg.seed = seed_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    // Environment variable points at the output root only.
    if (const char* root = std::getenv("RLVRLAB_OUT"); root && *root && fs::path(cfg.out_dir).is_relative())
        cfg.out_dir = (fs::path(root) / cfg.out_dir).string();
    return cfg;
}

PolicyParams load_policy(const std::string& path) {
    return PolicyParams::from_checkpoint(Checkpoint::load(path));
}

std::vector<double> load_scores(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open scores file '" + path + "'");
    std::map<int, double> by_feature;
    int feat;
    double score;
    while (f >> feat >> score) by_feature[feat] = score;
    std::vector<double> out(by_feature.empty() ? 0 : by_feature.rbegin()->first + 1, 0.0);
    for (const auto& [k, v] : by_feature) out[k] = v;
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rlvrlab: a desk-scale RLVR laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_override;
    std::vector<std::string> sets;
    uint64_t seed_override = UINT64_MAX;
    app.add_option("--config", config_path, "experiment config JSON")->envname("");
    app.add_option("--set", sets, "dotted config override, e.g. --set grpo.steps=10");
    app.add_option("--seed", seed_override, "seed override");
    app.add_option("--out-dir", out_override, "output directory override");

    // gen-tasks
    auto* gen = app.add_subcommand("gen-tasks", "generate a task corpus");
    std::string gen_out = "tasks.jsonl", gen_kind = "train";
    int gen_count = 0;
    gen->add_option("--out", gen_out, "output jsonl path");
    gen->add_option("--count", gen_count, "task count (default from config)");
    gen->add_option("--kind", gen_kind, "id namespace: train|test|probe");

    // rollout-table
    auto* table_cmd = app.add_subcommand("rollout-table", "n verified rollouts per task");
    std::string tbl_ckpt, tbl_tasks, tbl_out = "table.tsv";
    int tbl_n = 8;
    table_cmd->add_option("--ckpt", tbl_ckpt, "policy checkpoint")->required();
    table_cmd->add_option("--tasks", tbl_tasks, "task corpus jsonl")->required();
    table_cmd->add_option("--n", tbl_n, "rollouts per task");
    table_cmd->add_option("--out", tbl_out, "output tsv");

    // partition
    auto* part_cmd = app.add_subcommand("partition", "difficulty regimes from a rollout table");
    std::string part_table;
    int part_k = 8;
    part_cmd->add_option("--table", part_table, "rollout table tsv")->required();
    part_cmd->add_option("--k", part_k, "rollout budget");

    // warmup
    auto* warm_cmd = app.add_subcommand("warmup", "initialize + supervised warmup (the base policy)");
    std::string warm_out = "base.ckpt";
    warm_cmd->add_option("--out", warm_out, "output checkpoint");

    // train
    auto* train_cmd = app.add_subcommand("train", "GRPO training on a subset");
    std::string tr_ckpt, tr_tasks, tr_table, tr_run = "run", tr_test, tr_regimes;
    train_cmd->add_option("--ckpt", tr_ckpt, "base policy checkpoint")->required();
    train_cmd->add_option("--tasks", tr_tasks, "train corpus jsonl")->required();
    train_cmd->add_option("--table", tr_table, "difficulty table (needed for non-full subsets)");
    train_cmd->add_option("--run-dir", tr_run, "run output directory");
    train_cmd->add_option("--test-tasks", tr_test, "held-out corpus for pass@1");
    train_cmd->add_option("--test-regimes", tr_regimes, "regime map for the held-out corpus");

    // train-rfgo
    auto* rfgo_cmd = app.add_subcommand("train-rfgo", "RFGO training on a subset");
    std::string rf_ckpt, rf_tasks, rf_table, rf_run = "run-rfgo", rf_probe, rf_scores, rf_test, rf_regimes;
    rfgo_cmd->add_option("--ckpt", rf_ckpt, "base policy checkpoint")->required();
    rfgo_cmd->add_option("--tasks", rf_tasks, "train corpus jsonl")->required();
    rfgo_cmd->add_option("--table", rf_table, "difficulty table");
    rfgo_cmd->add_option("--probe", rf_probe, "frozen T-SAE probe checkpoint")->required();
    rfgo_cmd->add_option("--scores", rf_scores, "ReasonScore tsv (feature, score)")->required();
    rfgo_cmd->add_option("--run-dir", rf_run, "run output directory");
    rfgo_cmd->add_option("--test-tasks", rf_test, "held-out corpus for pass@1");
    rfgo_cmd->add_option("--test-regimes", rf_regimes, "regime map for the held-out corpus");

    // one-sample
    auto* one_cmd = app.add_subcommand("one-sample", "one-sample amplification on a single task");
    std::string one_ckpt, one_tasks, one_out = "one_sample.jsonl";
    uint64_t one_id = 0;
    int one_steps = 0;
    one_cmd->add_option("--ckpt", one_ckpt, "base policy checkpoint")->required();
    one_cmd->add_option("--tasks", one_tasks, "corpus containing the task")->required();
    one_cmd->add_option("--task-id", one_id, "task id")->required();
    one_cmd->add_option("--steps", one_steps, "steps (default one_sample_steps)");
    one_cmd->add_option("--out", one_out, "metrics series output");

    // dump-acts
    auto* dump_cmd = app.add_subcommand("dump-acts", "residual activation dump over sampled rollouts");
    std::string dp_ckpt, dp_tasks, dp_out = "dump.bin";
    dump_cmd->add_option("--ckpt", dp_ckpt, "policy checkpoint")->required();
    dump_cmd->add_option("--tasks", dp_tasks, "corpus jsonl")->required();
    dump_cmd->add_option("--out", dp_out, "dump output path");

    // tsae-train
    auto* tsae_cmd = app.add_subcommand("tsae-train", "train and freeze the T-SAE probe");
    std::string ts_dump, ts_out = "probe.ckpt";
    tsae_cmd->add_option("--dump", ts_dump, "activation dump")->required();
    tsae_cmd->add_option("--out", ts_out, "probe checkpoint output");

    // analyze
    auto* an = app.add_subcommand("analyze", "feature analytics");
    an->require_subcommand(1);
    auto* an_scores = an->add_subcommand("reason-scores", "per-feature ReasonScores from a dump");
    std::string as_probe, as_dump, as_out = "scores.tsv";
    an_scores->add_option("--probe", as_probe)->required();
    an_scores->add_option("--dump", as_dump)->required();
    an_scores->add_option("--out", as_out);
    auto* an_emerging = an->add_subcommand("emerging", "regime-unique emerging features");
    std::vector<std::string> ae_files;
    std::string ae_target = "hard";
    an_emerging->add_option("--trajectories", ae_files, "trajectory tsv files (one per regime)")->required();
    an_emerging->add_option("--target", ae_target, "target regime");
    auto* an_cohorts = an->add_subcommand("cohorts", "reinforced/suppressed/stable counts");
    std::string ac_file;
    an_cohorts->add_option("--trajectories", ac_file)->required();
    auto* an_sem = an->add_subcommand("semantics", "logit-lens semantics of a feature");
    std::string sm_probe, sm_ckpt, sm_dump;
    int sm_feature = 0, sm_top = 10;
    an_sem->add_option("--probe", sm_probe)->required();
    an_sem->add_option("--ckpt", sm_ckpt)->required();
    an_sem->add_option("--feature", sm_feature)->required();
    an_sem->add_option("--top", sm_top);
    an_sem->add_option("--dump", sm_dump, "reference dump for top contexts");

    // rewrite
    auto* rw_cmd = app.add_subcommand("rewrite", "backward rewriting of original tasks");
    std::string rw_tasks, rw_out = "rewrites.jsonl";
    rw_cmd->add_option("--tasks", rw_tasks)->required();
    rw_cmd->add_option("--out", rw_out);

    // eval
    auto* ev_cmd = app.add_subcommand("eval", "greedy pass@1 on a held-out corpus");
    std::string ev_ckpt, ev_tasks, ev_regimes, ev_train;
    ev_cmd->add_option("--ckpt", ev_ckpt)->required();
    ev_cmd->add_option("--tasks", ev_tasks)->required();
    ev_cmd->add_option("--regimes", ev_regimes)->required();
    ev_cmd->add_option("--train-tasks", ev_train, "training corpus for the disjointness check");

    // recipe
    auto* rc_cmd = app.add_subcommand("recipe", "run a full experiment recipe");
    std::string rc_name;
    rc_cmd->add_option("--name", rc_name, "recipe name")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = load_config(config_path, sets, seed_override, out_override);

        if (*gen) {
            const IdSpace ns = gen_kind == "test"    ? IdSpace::Test
                               : gen_kind == "probe" ? IdSpace::Probe
                                                     : IdSpace::Train;
            const int count = gen_count > 0 ? gen_count
                              : ns == IdSpace::Test ? cfg.tasks.test_count
                                                    : cfg.tasks.train_count;
            save_tasks(gen_out, generate_corpus(cfg.tasks, count, ns, cfg.seed));
            std::cout << "wrote " << count << " tasks to " << gen_out << "\n";
        } else if (*table_cmd) {
            const auto policy = load_policy(tbl_ckpt);
            const auto tasks = load_tasks(tbl_tasks);
            save_difficulty_table(tbl_out, rollout_success_table(policy, tasks, tbl_n,
                                                                 cfg.grpo.temperature, cfg.grpo.max_new,
                                                                 mix64(cfg.seed, 0x747261696eull)));
            std::cout << "wrote table for " << tasks.size() << " tasks to " << tbl_out << "\n";
        } else if (*part_cmd) {
            const auto table = load_difficulty_table(part_table);
            const auto split = partition(table, part_k);
            nlohmann::ordered_json j;
            j["k"] = part_k;
            j["easy"] = split.easy;
            j["medium"] = split.medium;
            j["hard"] = split.hard;
            for (const auto& cs : curriculum_subsets(table, {part_k})) {
                const std::string side = cs.side == CurriculumSubset::Side::Medium ? "medium" : "hard";
                j["curriculum"][side + "@" + std::to_string(cs.k)] = cs.ids;
            }
            std::cout << j.dump(2) << "\n";
        } else if (*warm_cmd) {
            make_base_policy(cfg).to_checkpoint().save(warm_out);
            std::cout << "wrote base policy to " << warm_out << "\n";
        } else if (*train_cmd || *rfgo_cmd) {
            const bool rfgo = static_cast<bool>(*rfgo_cmd);
            const auto policy = load_policy(rfgo ? rf_ckpt : tr_ckpt);
            const auto tasks = load_tasks(rfgo ? rf_tasks : tr_tasks);
            const std::string table_path = rfgo ? rf_table : tr_table;
            std::vector<DifficultyRecord> table;
            if (!table_path.empty()) table = load_difficulty_table(table_path);
            const auto subset = select_subset(cfg.subset, tasks, table);
            if (subset.empty()) throw std::runtime_error("selected subset is empty");
            const std::string run_dir = rfgo ? rf_run : tr_run;
            fs::create_directories(run_dir);
            {
                std::ofstream f(fs::path(run_dir) / "resolved_config.json", std::ios::trunc);
                f << cfg.resolved_json_text() << '\n';
            }
            std::unique_ptr<GrpoTrainer> trainer;
            if (rfgo) {
                const auto probe = TsaeParams::from_checkpoint(Checkpoint::load(rf_probe));
                const auto reason = feature_weights_from_scores(load_scores(rf_scores), cfg.rfgo.top_frac);
                trainer = std::make_unique<RfgoTrainer>(policy, cfg.grpo, cfg.rfgo, probe, reason,
                                                        cfg.seed);
            } else {
                trainer = std::make_unique<GrpoTrainer>(policy, cfg.grpo, cfg.seed);
            }
            const std::string test_path = rfgo ? rf_test : tr_test;
            const std::string regimes_path = rfgo ? rf_regimes : tr_regimes;
            std::vector<uint64_t> train_ids;
            for (const auto& t : tasks) train_ids.push_back(t.id);
            if (!test_path.empty() && !regimes_path.empty())
                trainer->set_evaluator(make_evaluator(load_test_corpus(test_path, regimes_path),
                                                      train_ids, cfg.grpo.max_new));
            std::vector<StepMetrics> series;
            for (int step = 1; step <= cfg.grpo.steps; ++step) {
                std::vector<TaskInstance> batch;
                Rng rng(mix64(cfg.seed, 0x6261746368ull, static_cast<uint64_t>(step)));
                if (static_cast<int>(subset.size()) <= cfg.grpo.batch) {
                    batch = subset;
                } else {
                    std::vector<size_t> idx(subset.size());
                    std::iota(idx.begin(), idx.end(), 0);
                    for (int i = 0; i < cfg.grpo.batch; ++i) {
                        const size_t j2 = i + rng.uniform_int(idx.size() - i);
                        std::swap(idx[i], idx[j2]);
                        batch.push_back(subset[idx[i]]);
                    }
                }
                series.push_back(trainer->train_step(batch, step));
                if (step % cfg.analytics.checkpoint_every == 0) {
                    char buf[32];
                    std::snprintf(buf, sizeof buf, "step_%03d.ckpt", step);
                    trainer->policy().to_checkpoint().save((fs::path(run_dir) / buf).string());
                }
                std::cout << metrics_to_line(series.back()) << "\n";
            }
            save_metrics((fs::path(run_dir) / "metrics.jsonl").string(), series);
            trainer->policy().to_checkpoint().save((fs::path(run_dir) / "final.ckpt").string());
        } else if (*one_cmd) {
            const auto policy = load_policy(one_ckpt);
            const auto tasks = load_tasks(one_tasks);
            const TaskInstance* task = nullptr;
            for (const auto& t : tasks)
                if (t.id == one_id) task = &t;
            if (!task) throw std::runtime_error("task id not found in corpus");
            const int steps = one_steps > 0 ? one_steps : cfg.one_sample_steps;
            save_metrics(one_out, one_sample_run(policy, *task, steps, cfg.grpo,
                                                 mix64(cfg.seed, one_id), nullptr));
            std::cout << "wrote series to " << one_out << "\n";
        } else if (*dump_cmd) {
            const auto policy = load_policy(dp_ckpt);
            const auto tasks = load_tasks(dp_tasks);
            const auto responses = dump_rollouts(policy, tasks, cfg.grpo.temperature, cfg.grpo.max_new,
                                                 mix64(cfg.seed, 0x64756d70ull));
            dump_activations(policy, tasks, responses, cfg.model.tap_layer, cfg.tsae.chunk, dp_ckpt)
                .save(dp_out);
            std::cout << "wrote dump to " << dp_out << "\n";
        } else if (*tsae_cmd) {
            const auto dump = ActivationDump::load(ts_dump);
            TsaeTrainReport rep;
            TsaeConfig tc = cfg.tsae;
            tc.dim = dump.dim;
            const auto probe = train_tsae(dump, tc, cfg.seed, &rep);
            probe.to_checkpoint().save(ts_out);
            nlohmann::ordered_json j;
            j["initial_holdout_mse"] = rep.initial_holdout_mse;
            j["final_holdout_mse"] = rep.final_holdout_mse;
            j["contrastive_used"] = rep.contrastive_used;
            j["warning"] = rep.warning;
            j["content_hash"] = probe.content_hash;
            std::cout << j.dump(2) << "\n";
        } else if (*an_scores) {
            const auto probe = TsaeParams::from_checkpoint(Checkpoint::load(as_probe));
            const auto dump = ActivationDump::load(as_dump);
            const auto scores = reason_score(activation_stats(probe, dump, cfg.analytics.alpha));
            std::ofstream f(as_out, std::ios::trunc);
            f.precision(17);
            for (size_t i = 0; i < scores.size(); ++i) f << i << '\t' << scores[i] << '\n';
            std::cout << "wrote " << scores.size() << " scores to " << as_out << "\n";
        } else if (*an_emerging) {
            std::map<std::string, TrajectorySet> by_regime;
            for (const auto& file : ae_files) {
                TrajectorySet s = load_trajectories(file);
                by_regime[s.regime] = std::move(s);
            }
            const auto features = detect_emerging(by_regime, ae_target, cfg.analytics.emerging);
            nlohmann::ordered_json j;
            j["target"] = ae_target;
            j["emerging"] = features;
            std::cout << j.dump(2) << "\n";
        } else if (*an_cohorts) {
            const TrajectorySet s = load_trajectories(ac_file);
            const auto shifts = classify_reinforced_suppressed(s, cfg.analytics.delta);
            int reinforced = 0, suppressed = 0, stable = 0;
            for (const auto sh : shifts) {
                if (sh == FeatureShift::Reinforced) ++reinforced;
                if (sh == FeatureShift::Suppressed) ++suppressed;
                if (sh == FeatureShift::Stable) ++stable;
            }
            nlohmann::ordered_json j;
            j["regime"] = s.regime;
            j["reinforced"] = reinforced;
            j["suppressed"] = suppressed;
            j["stable"] = stable;
            std::cout << j.dump(2) << "\n";
        } else if (*an_sem) {
            const auto probe = TsaeParams::from_checkpoint(Checkpoint::load(sm_probe));
            const auto policy = load_policy(sm_ckpt);
            ActivationDump dump;
            const bool have_dump = !sm_dump.empty();
            if (have_dump) dump = ActivationDump::load(sm_dump);
            const auto sem =
                feature_semantics(probe, policy, sm_feature, sm_top, have_dump ? &dump : nullptr);
            nlohmann::ordered_json j;
            j["feature"] = sm_feature;
            nlohmann::ordered_json toks = nlohmann::ordered_json::array();
            for (int t : sem.top_tokens) toks.push_back(vocab::token_name(t));
            j["top_tokens"] = toks;
            for (const auto& c : sem.top_contexts)
                j["top_contexts"].push_back({{"task", c.task_id}, {"pos", c.position}, {"act", c.activation}});
            std::cout << j.dump(2) << "\n";
        } else if (*rw_cmd) {
            const auto tasks = load_tasks(rw_tasks);
            std::vector<TaskInstance> rewrites;
            for (size_t i = 0; i < tasks.size(); ++i) {
                if (tasks[i].origin != TaskOrigin::Original) continue;
                auto r = rewrite_backward(tasks[i], make_id(IdSpace::Rewrite, i * 64));
                rewrites.insert(rewrites.end(), r.begin(), r.end());
            }
            save_tasks(rw_out, rewrites);
            std::cout << "wrote " << rewrites.size() << " rewrites to " << rw_out << "\n";
        } else if (*ev_cmd) {
            const auto policy = load_policy(ev_ckpt);
            const auto corpus = load_test_corpus(ev_tasks, ev_regimes);
            std::vector<uint64_t> train_ids;
            if (!ev_train.empty())
                for (const auto& t : load_tasks(ev_train)) train_ids.push_back(t.id);
            const EvalResult r = eval_pass1(policy, corpus, train_ids, cfg.grpo.max_new);
            nlohmann::ordered_json j;
            j["acc_easy"] = r.acc_easy;
            j["acc_medium"] = r.acc_medium;
            j["acc_hard"] = r.acc_hard;
            j["acc_all"] = r.acc_all;
            std::cout << j.dump(2) << "\n";
        } else if (*rc_cmd) {
            std::cout << "recipe artifacts in " << run_recipe(rc_name, cfg) << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
