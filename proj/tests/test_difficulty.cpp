#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "rlvr/difficulty.hpp"
#include "rlvr/harness.hpp"

using namespace rlvr;

namespace {

// Enumeration oracle: walk every size-k subset of n rollouts (c correct) and
// count subsets containing at least one correct sample.
double pass_at_k_enumeration(int n, int c, int k) {
    std::vector<int> pick(k);
    long long total = 0, hit = 0;
    // Iterative combination enumeration.
    for (int i = 0; i < k; ++i) pick[i] = i;
    while (true) {
        ++total;
        bool any = false;
        for (int i = 0; i < k; ++i) any = any || pick[i] < c;  // first c indices correct
        if (any) ++hit;
        int i = k - 1;
        while (i >= 0 && pick[i] == n - k + i) --i;
        if (i < 0) break;
        ++pick[i];
        for (int j = i + 1; j < k; ++j) pick[j] = pick[j - 1] + 1;
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

DifficultyRecord record(uint64_t id, std::initializer_list<int> rewards) {
    DifficultyRecord r;
    r.task_id = id;
    r.n = static_cast<int>(rewards.size());
    for (int x : rewards) r.rewards.push_back(static_cast<uint8_t>(x));
    r.c = r.correct_in_first(r.n);
    return r;
}

}  // namespace

TEST_CASE("pass_at_k exact values") {
    SUBCASE("all correct gives 1") {
        for (int n = 1; n <= 10; ++n)
            for (int k = 1; k <= n; ++k) {
                const Rational r = pass_at_k(n, n, k);
                CHECK(r.num == r.den);
            }
    }
    SUBCASE("none correct gives 0") {
        for (int n = 1; n <= 10; ++n)
            for (int k = 1; k <= n; ++k) CHECK(pass_at_k(n, 0, k).num == 0);
    }
    SUBCASE("n=4, c=2, k=2 gives 5/6") {
        const Rational r = pass_at_k(4, 2, 2);
        CHECK(r.num == 5);
        CHECK(r.den == 6);
        // Enumeration agrees: one of the six 2-subsets has no correct sample.
        CHECK(pass_at_k_enumeration(4, 2, 2) == doctest::Approx(5.0 / 6.0));
    }
    SUBCASE("matches subset enumeration for n <= 10") {
        for (int n = 1; n <= 10; ++n)
            for (int c = 0; c <= n; ++c)
                for (int k = 1; k <= n; ++k)
                    CHECK(pass_at_k(n, c, k).value() ==
                          doctest::Approx(pass_at_k_enumeration(n, c, k)).epsilon(1e-12));
    }
    SUBCASE("monotone in k and c over the exhaustive n <= 16 grid") {
        for (int n = 1; n <= 16; ++n)
            for (int c = 0; c <= n; ++c)
                for (int k = 1; k <= n; ++k) {
                    const double v = pass_at_k(n, c, k).value();
                    if (k > 1) CHECK(v >= pass_at_k(n, c, k - 1).value());
                    if (c > 0) CHECK(v >= pass_at_k(n, c - 1, k).value());
                    CHECK(v >= 0.0);
                    CHECK(v <= 1.0);
                }
    }
    SUBCASE("largest supported n stays exact") {
        const Rational r = pass_at_k(64, 1, 32);
        CHECK(r.value() == doctest::Approx(0.5));
    }
    SUBCASE("k > n is rejected") {
        CHECK_THROWS_AS(pass_at_k(4, 2, 5), std::invalid_argument);
        CHECK_THROWS_AS(pass_at_k(4, 5, 2), std::invalid_argument);
        CHECK_THROWS_AS(pass_at_k(0, 0, 1), std::invalid_argument);
    }
}

TEST_CASE("partition: three disjoint exhaustive sets") {
    const std::vector<DifficultyRecord> records = {
        record(1, {1, 1, 1, 1}),
        record(2, {0, 0, 0, 0}),
        record(3, {1, 0, 1, 1}),
        record(4, {0, 0, 0, 1}),
    };
    const RegimePartition p = partition(records, 4);
    CHECK(p.easy == std::vector<uint64_t>{1});
    CHECK(p.hard == std::vector<uint64_t>{2});
    CHECK(p.medium == std::vector<uint64_t>{3, 4});

    SUBCASE("uses the first k recorded rollouts") {
        const RegimePartition p2 = partition(records, 3);
        // Task 4 fails its first three rollouts.
        CHECK(std::find(p2.hard.begin(), p2.hard.end(), 4) != p2.hard.end());
    }
    SUBCASE("fewer than k recorded rollouts is rejected") {
        CHECK_THROWS_AS(partition(records, 5), std::invalid_argument);
    }
    SUBCASE("disjoint and exhaustive on random tables") {
        Rng rng(4);
        std::vector<DifficultyRecord> table;
        for (uint64_t id = 0; id < 200; ++id) {
            DifficultyRecord r;
            r.task_id = id;
            r.n = 8;
            for (int i = 0; i < 8; ++i) r.rewards.push_back(rng.uniform() < 0.4);
            r.c = r.correct_in_first(8);
            table.push_back(r);
        }
        const RegimePartition q = partition(table, 8);
        std::set<uint64_t> seen;
        for (const auto& ids : {q.easy, q.medium, q.hard})
            for (uint64_t id : ids) CHECK(seen.insert(id).second);
        CHECK(seen.size() == table.size());
    }
}

TEST_CASE("curriculum subsets: Eq-style nesting") {
    SUBCASE("task solved on rollout 3 only") {
        const std::vector<DifficultyRecord> records = {record(9, {0, 0, 1, 0, 0, 0, 0, 0})};
        const auto subsets = curriculum_subsets(records, {2, 4, 8});
        auto ids_of = [&](int k, CurriculumSubset::Side side) {
            for (const auto& s : subsets)
                if (s.k == k && s.side == side) return s.ids;
            return std::vector<uint64_t>{};
        };
        CHECK(ids_of(2, CurriculumSubset::Side::Medium).empty());
        CHECK(ids_of(4, CurriculumSubset::Side::Medium) == std::vector<uint64_t>{9});
        CHECK(ids_of(8, CurriculumSubset::Side::Medium) == std::vector<uint64_t>{9});
    }
    SUBCASE("never-solved task is in every hard@k") {
        const std::vector<DifficultyRecord> records = {record(7, {0, 0, 0, 0, 0, 0, 0, 0})};
        for (const auto& s : curriculum_subsets(records, {2, 4, 8}))
            if (s.side == CurriculumSubset::Side::Hard) CHECK(s.ids == std::vector<uint64_t>{7});
    }
    SUBCASE("nesting chains verified exhaustively on a random table") {
        Rng rng(6);
        std::vector<DifficultyRecord> table;
        for (uint64_t id = 0; id < 300; ++id) {
            DifficultyRecord r;
            r.task_id = id;
            r.n = 8;
            for (int i = 0; i < 8; ++i) r.rewards.push_back(rng.uniform() < 0.3);
            r.c = r.correct_in_first(8);
            table.push_back(r);
        }
        const auto subsets = curriculum_subsets(table, {2, 4, 8});
        auto as_set = [&](int k, CurriculumSubset::Side side) {
            for (const auto& s : subsets)
                if (s.k == k && s.side == side) return std::set<uint64_t>(s.ids.begin(), s.ids.end());
            return std::set<uint64_t>{};
        };
        const auto m2 = as_set(2, CurriculumSubset::Side::Medium);
        const auto m4 = as_set(4, CurriculumSubset::Side::Medium);
        const auto m8 = as_set(8, CurriculumSubset::Side::Medium);
        const auto h2 = as_set(2, CurriculumSubset::Side::Hard);
        const auto h4 = as_set(4, CurriculumSubset::Side::Hard);
        const auto h8 = as_set(8, CurriculumSubset::Side::Hard);
        CHECK(std::includes(m4.begin(), m4.end(), m2.begin(), m2.end()));
        CHECK(std::includes(m8.begin(), m8.end(), m4.begin(), m4.end()));
        CHECK(std::includes(h2.begin(), h2.end(), h4.begin(), h4.end()));
        CHECK(std::includes(h4.begin(), h4.end(), h8.begin(), h8.end()));

        // Eq-6 medium@k equals the union of three-way easy and medium.
        const RegimePartition tri = partition(table, 8);
        std::set<uint64_t> uni(tri.easy.begin(), tri.easy.end());
        uni.insert(tri.medium.begin(), tri.medium.end());
        CHECK(uni == m8);
    }
}

TEST_CASE("zero_variance") {
    CHECK(zero_variance({0, 0, 0, 0}));
    CHECK(zero_variance({1, 1, 1, 1}));
    CHECK(!zero_variance({1, 0, 1, 1}));
    CHECK(zero_variance({0.5, 0.5}));
    CHECK_THROWS_AS(zero_variance({}), std::invalid_argument);
}

TEST_CASE("difficulty table serialization round-trips") {
    const std::vector<DifficultyRecord> records = {record(1, {1, 0, 1}), record(2, {0, 0, 0})};
    const std::string path = "test_table_roundtrip.tsv";
    save_difficulty_table(path, records);
    const auto back = load_difficulty_table(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].task_id == 1);
    CHECK(back[0].rewards == std::vector<uint8_t>{1, 0, 1});
    CHECK(back[0].c == 2);
    CHECK(back[1].c == 0);
    std::remove(path.c_str());
}

TEST_CASE("rollout_success_table: degenerate policies and the resampling oracle") {
    PolicyConfig pc;
    pc.vocab = 48;
    pc.dim = 16;
    pc.layers = 1;
    pc.heads = 2;
    pc.max_seq = 64;
    const PolicyParams policy = init_policy(pc, 5);

    Rng rng(1);
    std::vector<TaskInstance> tasks;
    tasks.push_back(generate_task(TaskKnobs{1, 10, 97}, 1, rng));
    // An impossible task: the stored answer is outside the emittable range.
    tasks.push_back(make_unsolvable_task(TaskKnobs{1, 10, 97}, 2, rng));

    const auto table = rollout_success_table(policy, tasks, 8, 1.0, 12, 99);
    REQUIRE(table.size() == 2);
    CHECK(table[0].n == 8);
    CHECK(table[1].c == 0);  // impossible task never verifies

    SUBCASE("deterministic given seed") {
        const auto again = rollout_success_table(policy, tasks, 8, 1.0, 12, 99);
        for (size_t i = 0; i < table.size(); ++i) CHECK(table[i].rewards == again[i].rewards);
    }
    SUBCASE("Monte Carlo success@k from the table matches pass_at_k within 0.01") {
        // Resampling oracle over a synthetic record: fix n=10, c=4 and draw
        // 100k uniform k-subsets of the recorded rollouts.
        DifficultyRecord rec = record(0, {1, 0, 0, 1, 0, 1, 0, 0, 1, 0});
        Rng mc(12345);
        for (int k : {1, 2, 4, 8}) {
            int hit = 0;
            const int draws = 100000;
            std::vector<int> idx(rec.n);
            for (int d = 0; d < draws; ++d) {
                for (int i = 0; i < rec.n; ++i) idx[i] = i;
                bool any = false;
                for (int i = 0; i < k; ++i) {
                    const int j = i + static_cast<int>(mc.uniform_int(rec.n - i));
                    std::swap(idx[i], idx[j]);
                    any = any || rec.rewards[idx[i]];
                }
                hit += any;
            }
            const double mc_rate = static_cast<double>(hit) / draws;
            CHECK(std::abs(mc_rate - pass_at_k(rec.n, rec.c, k).value()) < 0.01);
        }
    }
}
