#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rlvr/harness.hpp"
#include "rlvr/rfgo.hpp"
#include "rlvr/vocab.hpp"

using namespace rlvr;
using namespace rlvr::vocab;

namespace {

SparseCode code_of(std::vector<int> idx, std::vector<double> val, int h) {
    SparseCode c;
    c.idx = std::move(idx);
    c.val = std::move(val);
    c.split_h = h;
    return c;
}

PolicyConfig toy_policy_cfg() {
    PolicyConfig c;
    c.vocab = 48;
    c.dim = 16;
    c.layers = 2;
    c.heads = 2;
    c.max_seq = 64;
    c.tap_layer = 1;
    return c;
}

TsaeConfig toy_probe_cfg() {
    TsaeConfig c;
    c.dim = 16;
    c.features = 48;
    c.high = 12;
    c.topk = 6;
    return c;
}

}  // namespace

TEST_CASE("discount from half-life") {
    RfgoConfig cfg;
    cfg.half_life = 128.0;
    CHECK(std::pow(cfg.gamma(), 128.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(cfg.gamma() == doctest::Approx(0.994598).epsilon(1e-5));
    cfg.half_life = 8.0;
    CHECK(std::pow(cfg.gamma(), 8.0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("split_spans") {
    SUBCASE("three step markers plus an answer segment give four spans") {
        // ; 1 5 ; 1 3 ; 1 9 <ans> 1 9 <eos>
        const std::vector<int> resp = {STEP, digit_token(1), digit_token(5), STEP, digit_token(1),
                                       digit_token(3), STEP, digit_token(1), digit_token(9), ANS,
                                       digit_token(1), digit_token(9), EOS};
        const auto spans = split_spans(resp);
        REQUIRE(spans.size() == 4);
        CHECK(spans[0] == std::pair<int, int>{0, 3});
        CHECK(spans[1] == std::pair<int, int>{3, 6});
        CHECK(spans[2] == std::pair<int, int>{6, 9});
        CHECK(spans[3] == std::pair<int, int>{9, 13});
    }
    SUBCASE("no delimiters give one span covering everything") {
        const std::vector<int> resp = {digit_token(1), digit_token(2), EOS};
        const auto spans = split_spans(resp);
        REQUIRE(spans.size() == 1);
        CHECK(spans[0] == std::pair<int, int>{0, 3});
    }
    SUBCASE("leading tokens before the first marker form their own span") {
        const std::vector<int> resp = {digit_token(4), STEP, digit_token(1), ANS, digit_token(7)};
        const auto spans = split_spans(resp);
        REQUIRE(spans.size() == 3);
        CHECK(spans[0] == std::pair<int, int>{0, 1});
        CHECK(spans[1] == std::pair<int, int>{1, 3});
        CHECK(spans[2] == std::pair<int, int>{3, 5});
    }
    SUBCASE("concatenated span lengths equal the response length on 1k random responses") {
        Rng rng(12);
        for (int trial = 0; trial < 1000; ++trial) {
            const int len = 1 + rng.uniform_index(30);
            std::vector<int> resp(len);
            for (int& t : resp) t = rng.uniform_index(48);
            const auto spans = split_spans(resp);
            int covered = 0;
            int prev_end = 0;
            for (const auto& [b, e] : spans) {
                CHECK(b == prev_end);  // disjoint and contiguous
                CHECK(e > b);
                covered += e - b;
                prev_end = e;
            }
            CHECK(covered == len);
        }
    }
    SUBCASE("empty response rejected") {
        CHECK_THROWS_AS(split_spans({}), std::invalid_argument);
    }
}

TEST_CASE("span_divergence") {
    const int h = 12;
    SUBCASE("identical codes give 0") {
        std::vector<SparseCode> a = {code_of({1, 5}, {0.5, 2.0}, h), code_of({3}, {1.0}, h)};
        CHECK(span_divergence(a, a, {0, 2}, {1, 3, 5}) == doctest::Approx(0.0));
    }
    SUBCASE("codes differing by +0.1 on three reasoning features give 0.3") {
        std::vector<SparseCode> pol = {code_of({1, 3, 5}, {0.6, 0.6, 0.6}, h)};
        std::vector<SparseCode> ref = {code_of({1, 3, 5}, {0.5, 0.5, 0.5}, h)};
        CHECK(span_divergence(pol, ref, {0, 1}, {1, 3, 5}) == doctest::Approx(0.3).epsilon(1e-12));
    }
    SUBCASE("matches a brute-force per-coordinate oracle on random codes") {
        Rng rng(5);
        const std::vector<int> reason = {0, 2, 7, 9, 11};
        for (int trial = 0; trial < 50; ++trial) {
            const int len = 2 + rng.uniform_index(6);
            std::vector<SparseCode> pol, ref;
            for (int t = 0; t < len; ++t) {
                SparseCode a, b;
                a.split_h = b.split_h = h;
                for (int f = 0; f < 16; ++f) {
                    if (rng.uniform() < 0.4) {
                        a.idx.push_back(f);
                        a.val.push_back(rng.uniform() * 2);
                    }
                    if (rng.uniform() < 0.4) {
                        b.idx.push_back(f);
                        b.val.push_back(rng.uniform() * 2);
                    }
                }
                pol.push_back(a);
                ref.push_back(b);
            }
            const double got = span_divergence(pol, ref, {0, len}, reason);
            double expect = 0.0;
            for (int f : reason) {
                double mp = 0.0, mr = 0.0;
                for (int t = 0; t < len; ++t) {
                    mp += pol[t].value_of(f);
                    mr += ref[t].value_of(f);
                }
                expect += std::abs(mp / len - mr / len);
            }
            CHECK(got == doctest::Approx(expect).epsilon(1e-9));
        }
    }
    SUBCASE("span out of range rejected") {
        std::vector<SparseCode> a = {code_of({}, {}, h)};
        CHECK_THROWS_AS(span_divergence(a, a, {0, 2}, {1}), std::invalid_argument);
    }
}

TEST_CASE("rfgo_signal") {
    SUBCASE("a single span centers to zero") {
        const auto sig = rfgo_signal({0.7}, {{0, 4}}, 4, 0.5);
        for (double v : sig.per_token) CHECK(v == doctest::Approx(0.0));
        CHECK(sig.centered[0] == doctest::Approx(0.0));
    }
    SUBCASE("two spans with centered (+1, -1) and gamma 0.5") {
        // D = (2, 0) centers to (+1, -1).
        const auto sig = rfgo_signal({2.0, 0.0}, {{0, 2}, {2, 5}}, 5, 0.5);
        CHECK(sig.centered[0] == doctest::Approx(1.0));
        CHECK(sig.centered[1] == doctest::Approx(-1.0));
        CHECK(sig.per_token[0] == doctest::Approx(0.5));   // 1 + 0.5*(-1)
        CHECK(sig.per_token[1] == doctest::Approx(0.5));
        CHECK(sig.per_token[2] == doctest::Approx(-1.0));  // final span
        CHECK(sig.per_token[4] == doctest::Approx(-1.0));
    }
    SUBCASE("centered divergences sum to zero per rollout") {
        Rng rng(3);
        for (int trial = 0; trial < 200; ++trial) {
            const int k = 1 + rng.uniform_index(8);
            std::vector<double> divs(k);
            std::vector<std::pair<int, int>> spans;
            int pos = 0;
            for (int i = 0; i < k; ++i) {
                divs[i] = rng.uniform() * 3;
                const int len = 1 + rng.uniform_index(4);
                spans.emplace_back(pos, pos + len);
                pos += len;
            }
            const auto sig = rfgo_signal(divs, spans, pos, 0.917);
            double sum = 0.0;
            for (double c : sig.centered) sum += c;
            CHECK(std::abs(sum) <= 1e-9);
        }
    }
}

TEST_CASE("influence_weights") {
    RfgoConfig cfg;
    cfg.beta_w = 1.0;
    cfg.clip_w = 0.2;
    cfg.safety_ratio = 4.0;

    SUBCASE("zero signal gives weight exactly 1") {
        const auto w = influence_weights({0.0}, {1.0}, {0.5}, cfg);
        CHECK(w.w[0] == 1.0);
        CHECK(!w.clamped[0]);
    }
    SUBCASE("beta 1, signal 0.5 clips exp(0.5)=1.6487 to 1.2") {
        const auto w = influence_weights({0.5}, {1.0}, {0.5}, cfg);
        CHECK(w.w[0] == doctest::Approx(1.2));
    }
    SUBCASE("safety clamp narrows to 1.0 on high-ratio negative-advantage tokens") {
        const auto w = influence_weights({0.5}, {5.0}, {-1.0}, cfg);
        CHECK(w.w[0] == doctest::Approx(1.0));
        CHECK(w.clamped[0] == 1);
        // Condition not met: ratio below threshold, or positive advantage.
        CHECK(influence_weights({0.5}, {3.9}, {-1.0}, cfg).w[0] == doctest::Approx(1.2));
        CHECK(influence_weights({0.5}, {5.0}, {+1.0}, cfg).w[0] == doctest::Approx(1.2));
        // Below-1 weights pass through the clamp untouched.
        const auto low = influence_weights({-0.5}, {5.0}, {-1.0}, cfg);
        CHECK(low.w[0] == doctest::Approx(0.8));
        CHECK(!low.clamped[0]);
    }
    SUBCASE("weights always lie in [0.8, 1.2] and never go negative") {
        Rng rng(8);
        for (int trial = 0; trial < 2000; ++trial) {
            const double sig = rng.gaussian() * 3;
            const double ratio = std::exp(rng.gaussian());
            const double adv = rng.gaussian();
            const auto w = influence_weights({sig}, {ratio}, {adv}, cfg);
            CHECK(w.w[0] >= 0.8 - 1e-12);
            CHECK(w.w[0] <= 1.2 + 1e-12);
            if (ratio > 4.0 && adv < 0.0) CHECK(w.w[0] <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("proxy_reward") {
    const int h = 12;
    SUBCASE("identical weighted mass per token returns that mass") {
        std::vector<SparseCode> codes(5, code_of({1, 3}, {2.0, 1.0}, h));
        // omega (0.5, 0.5) over features {1, 3}: mass 1.5 per token.
        const double r = proxy_reward(codes, std::vector<uint8_t>(5, 1), {0.5, 0.5}, {1, 3});
        CHECK(r == doctest::Approx(1.5));
    }
    SUBCASE("zero codes give 0") {
        std::vector<SparseCode> codes(4, code_of({}, {}, h));
        CHECK(proxy_reward(codes, std::vector<uint8_t>(4, 1), {1.0}, {2}) == doctest::Approx(0.0));
    }
    SUBCASE("matches a brute-force double sum on random inputs") {
        Rng rng(21);
        for (int trial = 0; trial < 50; ++trial) {
            const int len = 1 + rng.uniform_index(10);
            std::vector<SparseCode> codes;
            std::vector<uint8_t> mask;
            for (int t = 0; t < len; ++t) {
                SparseCode c;
                c.split_h = h;
                for (int f = 0; f < 20; ++f)
                    if (rng.uniform() < 0.3) {
                        c.idx.push_back(f);
                        c.val.push_back(rng.uniform());
                    }
                codes.push_back(c);
                mask.push_back(rng.uniform() < 0.8);
            }
            if (std::none_of(mask.begin(), mask.end(), [](uint8_t m) { return m; })) mask[0] = 1;
            const std::vector<int> reason = {1, 4, 9};
            const std::vector<double> omega = {0.2, 0.5, 0.3};
            const double got = proxy_reward(codes, mask, omega, reason);
            double num = 0.0, den = 0.0;
            for (int t = 0; t < len; ++t) {
                if (!mask[t]) continue;
                den += 1.0;
                for (size_t j = 0; j < reason.size(); ++j) num += omega[j] * codes[t].value_of(reason[j]);
            }
            CHECK(got == doctest::Approx(num / den).epsilon(1e-9));
        }
    }
    SUBCASE("all-zero mask rejected") {
        std::vector<SparseCode> codes(2, code_of({}, {}, h));
        CHECK_THROWS_AS(proxy_reward(codes, {0, 0}, {1.0}, {0}), std::invalid_argument);
    }
}

TEST_CASE("apply_group_rewards") {
    SUBCASE("informative rewards pass through unchanged") {
        const std::vector<double> r = {1, 0, 1};
        CHECK(apply_group_rewards(r, {0.3, 0.1, 0.2}) == r);
    }
    SUBCASE("all-zero groups take the proxies, and advantages rank them") {
        const std::vector<double> proxies = {0.3, 0.1, 0.2};
        const auto shaped = apply_group_rewards({0, 0, 0}, proxies);
        CHECK(shaped == proxies);
        const auto adv = group_advantages(shaped);
        REQUIRE(!adv.zero_variance);
        CHECK(adv.advantages[0] > adv.advantages[2]);
        CHECK(adv.advantages[2] > adv.advantages[1]);
    }
    SUBCASE("all-one groups are zero-variance too and take the proxies") {
        const std::vector<double> proxies = {0.5, 0.25, 0.75};
        CHECK(apply_group_rewards({1, 1, 1}, proxies) == proxies);
    }
}

TEST_CASE("feature_weights_from_scores") {
    SUBCASE("one positive score takes all the weight") {
        std::vector<double> scores(40, -0.2);
        scores[7] = 0.4;
        const auto fs = feature_weights_from_scores(scores, 0.05);
        CHECK(fs.features == std::vector<int>{7});
        CHECK(fs.omega == std::vector<double>{1.0});
    }
    SUBCASE("two features with scores (0.3, 0.1) weight as (0.75, 0.25)") {
        std::vector<double> scores(40, -0.5);
        scores[3] = 0.3;
        scores[11] = 0.1;
        const auto fs = feature_weights_from_scores(scores, 0.05);
        REQUIRE(fs.features == std::vector<int>{3, 11});
        CHECK(fs.omega[0] == doctest::Approx(0.75));
        CHECK(fs.omega[1] == doctest::Approx(0.25));
    }
    SUBCASE("omega sums to 1 across random score vectors") {
        Rng rng(13);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> scores(64);
            for (auto& s : scores) s = rng.gaussian() * 0.2;
            const auto fs = feature_weights_from_scores(scores, 0.05);
            double sum = 0.0;
            for (double w : fs.omega) sum += w;
            CHECK(std::abs(sum - 1.0) <= 1e-9);
            CHECK(fs.features.size() == fs.omega.size());
        }
    }
    SUBCASE("no positive scores fall back to uniform over the top set") {
        std::vector<double> scores(40, -1.0);
        const auto fs = feature_weights_from_scores(scores, 0.1);
        CHECK(fs.features.size() == 4);
        for (double w : fs.omega) CHECK(w == doctest::Approx(0.25));
    }
}

TEST_CASE("RFGO trainer") {
    const PolicyParams policy = init_policy(toy_policy_cfg(), 77);
    const TsaeParams probe = init_tsae(toy_probe_cfg(), 5);
    ReasonFeatureSet reason;
    reason.features = {1, 4, 9, 14};
    reason.omega = {0.25, 0.25, 0.25, 0.25};

    GrpoConfig gcfg;
    gcfg.group = 4;
    gcfg.batch = 2;
    gcfg.minibatch = 2;
    gcfg.max_new = 10;
    gcfg.lr = 1e-3;

    std::vector<TaskInstance> tasks;
    for (uint64_t i = 0; i < 2; ++i) {
        Rng rng(30 + i);
        tasks.push_back(generate_task(TaskKnobs{1, 10, 97}, i + 1, rng));
    }

    SUBCASE("beta_w = 0 with proxy disabled reproduces plain GRPO exactly") {
        RfgoConfig rcfg;
        rcfg.half_life = 8.0;
        rcfg.beta_w = 0.0;
        rcfg.use_proxy = false;
        GrpoTrainer plain(policy.clone(), gcfg, 99);
        RfgoTrainer guided(policy.clone(), gcfg, rcfg, probe, reason, 99);
        for (int s = 1; s <= 2; ++s) {
            plain.train_step(tasks, s);
            guided.train_step(tasks, s);
        }
        const auto a = plain.policy().parameters();
        const auto b = guided.policy().parameters();
        for (size_t pi = 0; pi < a.size(); ++pi)
            for (size_t i = 0; i < a[pi]->v.size(); ++i)
                CHECK(std::abs(a[pi]->v[i] - b[pi]->v[i]) <= 1e-9);
    }
    SUBCASE("proxy substitution fires exactly on zero-variance groups") {
        RfgoConfig rcfg;
        rcfg.half_life = 8.0;
        std::vector<TaskInstance> impossible;
        for (uint64_t i = 0; i < 2; ++i) {
            Rng rng(50 + i);
            impossible.push_back(make_unsolvable_task(TaskKnobs{1, 10, 97}, 200 + i, rng));
        }
        RfgoTrainer guided(policy.clone(), gcfg, rcfg, probe, reason, 7);
        const StepMetrics m = guided.train_step(impossible, 1);
        CHECK(m.rfgo_proxy_frac == doctest::Approx(1.0));
        CHECK(m.reward_mean == 0.0);  // verifier rewards unchanged in metrics
    }
    SUBCASE("diagnostics appear in the metrics record") {
        RfgoConfig rcfg;
        rcfg.half_life = 8.0;
        RfgoTrainer guided(policy.clone(), gcfg, rcfg, probe, reason, 3);
        const StepMetrics m = guided.train_step(tasks, 1);
        CHECK(m.rfgo_mean_abs >= 0.0);
        CHECK(m.rfgo_clamped_frac >= 0.0);
        CHECK(m.rfgo_proxy_frac >= 0.0);
        const std::string line = metrics_to_line(m);
        CHECK(line.find("rfgo_mean_abs") != std::string::npos);
    }
    SUBCASE("probe width must match the policy tap") {
        TsaeConfig bad = toy_probe_cfg();
        bad.dim = 8;
        bad.features = 24;
        bad.high = 6;
        bad.topk = 4;
        CHECK_THROWS_AS(RfgoTrainer(policy.clone(), gcfg, RfgoConfig{}, init_tsae(bad, 1), reason, 1),
                        std::invalid_argument);
    }
}
