#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rlvr/grpo.hpp"
#include "rlvr/harness.hpp"

using namespace rlvr;

namespace {

PolicyConfig toy_config(int vocab = 48, int dim = 16, int layers = 1, int heads = 2) {
    PolicyConfig c;
    c.vocab = vocab;
    c.dim = dim;
    c.layers = layers;
    c.heads = heads;
    c.max_seq = 64;
    c.tap_layer = 1;
    return c;
}

GrpoConfig small_grpo() {
    GrpoConfig c;
    c.group = 4;
    c.batch = 2;
    c.minibatch = 2;
    c.max_new = 10;
    c.lr = 1e-3;
    return c;
}

std::vector<TaskInstance> couple_of_tasks(int chain = 1) {
    std::vector<TaskInstance> out;
    for (uint64_t i = 0; i < 2; ++i) {
        Rng rng(40 + i);
        out.push_back(generate_task(TaskKnobs{chain, 10, 97}, i + 1, rng));
    }
    return out;
}

}  // namespace

TEST_CASE("group_advantages") {
    SUBCASE("G=8 half-and-half rewards give unit advantages") {
        const auto r = group_advantages({1, 1, 1, 1, 0, 0, 0, 0});
        REQUIRE(!r.zero_variance);
        for (int i = 0; i < 4; ++i) CHECK(r.advantages[i] == doctest::Approx(1.0).epsilon(1e-12));
        for (int i = 4; i < 8; ++i) CHECK(r.advantages[i] == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("all-one rewards are zero-variance") {
        const auto r = group_advantages({1, 1, 1, 1});
        CHECK(r.zero_variance);
        CHECK(r.advantages.empty());
    }
    SUBCASE("G=2 rewards (1,0) give (+1,-1)") {
        const auto r = group_advantages({1, 0});
        CHECK(r.advantages[0] == doctest::Approx(1.0));
        CHECK(r.advantages[1] == doctest::Approx(-1.0));
    }
    SUBCASE("G < 2 rejected") {
        CHECK_THROWS_AS(group_advantages({1.0}), std::invalid_argument);
    }
    SUBCASE("exact closed form for all binary reward vectors with G <= 8") {
        for (int g = 2; g <= 8; ++g) {
            for (unsigned bits = 0; bits < (1u << g); ++bits) {
                std::vector<double> rewards(g);
                int ones = 0;
                for (int i = 0; i < g; ++i) {
                    rewards[i] = (bits >> i) & 1u;
                    ones += static_cast<int>(rewards[i]);
                }
                const auto r = group_advantages(rewards);
                if (ones == 0 || ones == g) {
                    CHECK(r.zero_variance);
                    continue;
                }
                REQUIRE(!r.zero_variance);
                const double mean = static_cast<double>(ones) / g;
                const double sd = std::sqrt(mean * (1.0 - mean));  // population std of a binary vector
                double sum = 0.0, sq = 0.0;
                for (int i = 0; i < g; ++i) {
                    const double expect = (rewards[i] - mean) / sd;
                    CHECK(r.advantages[i] == doctest::Approx(expect).epsilon(1e-12));
                    sum += r.advantages[i];
                    sq += r.advantages[i] * r.advantages[i];
                }
                CHECK(std::abs(sum / g) < 1e-9);            // mean 0
                CHECK(std::abs(sq / g - 1.0) < 1e-9);       // population variance 1
            }
        }
    }
    SUBCASE("positive rescaling of rewards leaves advantages unchanged") {
        const std::vector<double> base = {1, 0, 1, 1, 0, 1, 0, 0};
        const auto a = group_advantages(base);
        for (double scale : {2.0, 0.25, 17.0}) {
            std::vector<double> scaled;
            for (double r : base) scaled.push_back(r * scale);
            const auto b = group_advantages(scaled);
            for (size_t i = 0; i < a.advantages.size(); ++i)
                CHECK(b.advantages[i] == doctest::Approx(a.advantages[i]).epsilon(1e-12));
        }
        // Also for non-binary perturbed vectors.
        const std::vector<double> pert = {0.9, 0.1, 0.8, 0.75, 0.2, 0.85, 0.15, 0.05};
        const auto ap = group_advantages(pert);
        std::vector<double> pert3;
        for (double r : pert) pert3.push_back(3.0 * r);
        const auto bp = group_advantages(pert3);
        for (size_t i = 0; i < ap.advantages.size(); ++i)
            CHECK(bp.advantages[i] == doctest::Approx(ap.advantages[i]).epsilon(1e-9));
    }
}

TEST_CASE("grpo_loss analytics") {
    const double eps = 0.2;
    auto lp = [](std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        return Tensor::from({n}, std::move(v));
    };

    SUBCASE("ratio 1 everywhere reduces to the mean advantage, clip inactive") {
        const std::vector<double> old_lp = {-1.0, -2.0, -0.5};
        const std::vector<double> advs = {0.8};
        auto new_lp = lp(old_lp);  // identical -> r == 1
        const auto loss = grpo_loss({new_lp}, {old_lp}, advs, eps, 0.0, Tensor::scalar(0.0),
                                    {std::vector<uint8_t>(3, 1)});
        CHECK(loss->item() == doctest::Approx(0.8).epsilon(1e-12));
    }
    SUBCASE("positive advantage with r = 1 + 2eps selects the clipped branch") {
        const std::vector<double> old_lp = {-1.0};
        const double r = 1.0 + 2.0 * eps;
        auto new_lp = lp({-1.0 + std::log(r)});
        const auto loss = grpo_loss({new_lp}, {old_lp}, {1.5}, eps, 0.0, Tensor::scalar(0.0),
                                    {std::vector<uint8_t>(1, 1)});
        CHECK(loss->item() == doctest::Approx((1.0 + eps) * 1.5).epsilon(1e-12));
    }
    SUBCASE("clipping bound holds token-wise under random ratios") {
        Rng rng(8);
        for (int trial = 0; trial < 200; ++trial) {
            const double old_v = -rng.uniform() * 3.0;
            const double new_v = -rng.uniform() * 3.0;
            const double adv = rng.gaussian();
            auto s = ppo_token_surrogate(lp({new_v}), {old_v}, {adv}, eps);
            const double r = std::exp(new_v - old_v);
            const double bound = std::max(std::abs(r * adv),
                                          std::max(std::abs((1 - eps) * adv), std::abs((1 + eps) * adv)));
            CHECK(std::abs(s->v[0]) <= bound + 1e-12);
            // The min rule: the surrogate never exceeds either branch.
            CHECK(s->v[0] <= r * adv + 1e-12);
            CHECK(s->v[0] <= std::clamp(r, 1 - eps, 1 + eps) * adv + 1e-12);
        }
    }
    SUBCASE("mismatched lengths are rejected") {
        CHECK_THROWS_AS(grpo_loss({lp({-1.0, -1.0})}, {{-1.0}}, {1.0}, eps, 0.0, Tensor::scalar(0.0),
                                  {std::vector<uint8_t>(2, 1)}),
                        std::invalid_argument);
    }
    SUBCASE("KL penalty applied once per group outside the token average") {
        const std::vector<double> old_lp = {-1.0, -1.0};
        auto new_lp = lp(old_lp);
        const auto loss = grpo_loss({new_lp}, {old_lp}, {1.0}, eps, 0.5, Tensor::scalar(0.3),
                                    {std::vector<uint8_t>(2, 1)});
        CHECK(loss->item() == doctest::Approx(1.0 - 0.5 * 0.3).epsilon(1e-12));
    }
}

TEST_CASE("grpo loss gradient matches finite differences on a 2-token toy instance") {
    const PolicyParams policy = init_policy(toy_config(12, 8, 1, 2), 3);
    const std::vector<int> prompt = {1, 3};
    const std::vector<int> response = {5, 2};
    const std::vector<double> old_lp = {-1.1, -2.3};
    const std::vector<double> ref_sum = {-3.0};
    const std::vector<double> advantages = {0.9};

    auto build = [&](const PolicyParams& p) {
        TensorPtr new_lp = response_logprobs_graph(p, prompt, response);
        TensorPtr kl = add(sum_all(new_lp), Tensor::scalar(-ref_sum[0]));
        return grpo_loss({new_lp}, {old_lp}, advantages, 0.2, 0.01, kl,
                         {std::vector<uint8_t>(2, 1)});
    };

    PolicyParams p = policy.clone();
    p.set_requires_grad(true);
    p.zero_grad();
    backward(build(p));
    const auto params = p.parameters();
    const double h = 1e-4;
    int checked = 0;
    for (const auto& t : params) {
        for (size_t i = 0; i < t->v.size(); i += std::max<size_t>(1, t->v.size() / 7)) {
            const double saved = t->v[i];
            t->v[i] = saved + h;
            const double fp = build(p)->item();
            t->v[i] = saved - h;
            const double fm = build(p)->item();
            t->v[i] = saved;
            const double fd = (fp - fm) / (2 * h);
            const double g = t->grad[i];
            CHECK(std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)}) <= 1e-4);
            ++checked;
        }
    }
    CHECK(checked >= 20);
}

TEST_CASE("kl_estimate") {
    const PolicyParams policy = init_policy(toy_config(), 21);
    const std::vector<int> prompt = {vocab::BOS, vocab::digit_token(2), vocab::ASK};

    SUBCASE("identical parameters give exactly 0") {
        Rng rng(5);
        std::vector<RolloutSample> rollouts;
        for (int i = 0; i < 4; ++i) {
            Rng r2 = rng.fork(i);
            rollouts.push_back(sample_rollout(policy, prompt, 1.0, 8, r2));
        }
        CHECK(kl_estimate(policy, policy, rollouts) == 0.0);
    }
    SUBCASE("prompt tokens contribute nothing (response-only masking)") {
        // Two prompts that share no tokens still give zero KL for an identical
        // policy pair, and the estimate only reads response positions.
        PolicyParams other = init_policy(toy_config(), 22);
        Rng rng(6);
        std::vector<RolloutSample> rollouts;
        for (int i = 0; i < 3; ++i) {
            Rng r2 = rng.fork(i);
            rollouts.push_back(sample_rollout(policy, prompt, 1.0, 6, r2));
        }
        const double k1 = kl_estimate(policy, other, rollouts);
        // Extending the prompt record (response unchanged) must not change the
        // estimate's dependence structure: recompute from scratch.
        const double k2 = kl_estimate(policy, other, rollouts);
        CHECK(k1 == doctest::Approx(k2));
    }
    SUBCASE("agrees with exhaustive enumeration on a 1-token response space") {
        const PolicyParams p = init_policy(toy_config(12, 8, 1, 2), 31);
        const PolicyParams q = init_policy(toy_config(12, 8, 1, 2), 32);
        const std::vector<int> pr = {1, 2};
        // Exact KL over the first generated token.
        InferenceWorkspace ws;
        const auto& logits_p = ws.forward(p, pr);
        std::vector<double> lp_p(12);
        {
            const double* row = &logits_p[(pr.size() - 1) * 12];
            double mx = row[0];
            for (int j = 1; j < 12; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < 12; ++j) z += std::exp(row[j] - mx);
            for (int j = 0; j < 12; ++j) lp_p[j] = row[j] - mx - std::log(z);
        }
        InferenceWorkspace ws2;
        const auto& logits_q = ws2.forward(q, pr);
        std::vector<double> lp_q(12);
        {
            const double* row = &logits_q[(pr.size() - 1) * 12];
            double mx = row[0];
            for (int j = 1; j < 12; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < 12; ++j) z += std::exp(row[j] - mx);
            for (int j = 0; j < 12; ++j) lp_q[j] = row[j] - mx - std::log(z);
        }
        double exact = 0.0;
        for (int j = 0; j < 12; ++j) exact += std::exp(lp_p[j]) * (lp_p[j] - lp_q[j]);

        std::vector<RolloutSample> rollouts;
        for (int i = 0; i < 20000; ++i) {
            Rng rng(mix64(777, i));
            rollouts.push_back(sample_rollout(p, pr, 1.0, 1, rng));
        }
        CHECK(std::abs(kl_estimate(p, q, rollouts) - exact) < 0.02);
    }
}

TEST_CASE("train_step mechanics") {
    const PolicyParams policy = init_policy(toy_config(), 41);
    const auto tasks = couple_of_tasks();

    SUBCASE("deterministic seed gives byte-identical metrics across two runs") {
        auto run = [&] {
            GrpoTrainer t(policy.clone(), small_grpo(), 123);
            std::vector<std::string> lines;
            for (int s = 1; s <= 3; ++s) lines.push_back(metrics_to_line(t.train_step(tasks, s)));
            lines.push_back(checkpoint_hash(t.policy().to_checkpoint()));
            return lines;
        };
        CHECK(run() == run());
    }
    SUBCASE("empty batch rejected") {
        GrpoTrainer t(policy.clone(), small_grpo(), 1);
        CHECK_THROWS_AS(t.train_step({}, 1), std::invalid_argument);
    }
    SUBCASE("metrics fields populated") {
        GrpoTrainer t(policy.clone(), small_grpo(), 9);
        const StepMetrics m = t.train_step(tasks, 1);
        CHECK(m.step == 1);
        CHECK(m.reward_mean >= 0.0);
        CHECK(m.reward_mean <= 1.0);
        CHECK(m.resp_len >= 0.0);
        CHECK(m.kl >= 0.0);  // clamped in the report
    }
}

TEST_CASE("zero-variance batches are KL-dominated") {
    const PolicyParams policy = init_policy(toy_config(), 51);
    std::vector<TaskInstance> impossible;
    for (uint64_t i = 0; i < 2; ++i) {
        Rng rng(60 + i);
        impossible.push_back(make_unsolvable_task(TaskKnobs{1, 10, 97}, 100 + i, rng));
    }
    SUBCASE("parameter gradient equals the KL-term gradient within 1e-9") {
        GrpoTrainer t(policy.clone(), small_grpo(), 7);
        CHECK(t.kl_domination_gap(impossible, 1) <= 1e-9);
    }
    SUBCASE("beta = 0 with an all-zero-variance batch leaves parameters unchanged") {
        GrpoConfig cfg = small_grpo();
        cfg.kl_beta = 0.0;
        GrpoTrainer t(policy.clone(), cfg, 7);
        const auto before = checkpoint_hash(t.policy().to_checkpoint());
        t.train_step(impossible, 1);
        CHECK(checkpoint_hash(t.policy().to_checkpoint()) == before);
    }
}

TEST_CASE("one_sample_run") {
    const PolicyParams policy = init_policy(toy_config(), 61);
    Rng rng(70);
    const TaskInstance task = generate_task(TaskKnobs{1, 10, 97}, 5, rng);

    SUBCASE("series length equals steps and metrics are logged every step") {
        const auto series = one_sample_run(policy.clone(), task, 4, small_grpo(), 3,
                                           [](const PolicyParams&) {
                                               return std::array<double, 4>{0.5, 0.25, 0.0, 0.25};
                                           });
        REQUIRE(series.size() == 4);
        for (const auto& m : series) {
            CHECK(m.acc_all == doctest::Approx(0.25));
            CHECK(m.kl >= 0.0);
        }
        CHECK(series.front().step == 1);
        CHECK(series.back().step == 4);
    }
    SUBCASE("unsolvable task keeps reward at zero") {
        Rng rng2(71);
        const TaskInstance bad = make_unsolvable_task(TaskKnobs{1, 10, 97}, 6, rng2);
        const auto series = one_sample_run(policy.clone(), bad, 3, small_grpo(), 3);
        for (const auto& m : series) CHECK(m.reward_mean == 0.0);
    }
    SUBCASE("steps < 1 rejected") {
        CHECK_THROWS_AS(one_sample_run(policy.clone(), task, 0, small_grpo(), 1), std::invalid_argument);
    }
}
