#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "rlvr/task.hpp"

using namespace rlvr;
using namespace rlvr::vocab;

namespace {

// Test-side evaluator, independent of the library's eval_chain: walks the
// prompt tokens directly and folds left-to-right with explicit arithmetic.
long long oracle_eval_prompt(const std::vector<int>& prompt, int modulus,
                             const std::vector<int>& fill_unknowns = {}) {
    size_t i = 0;
    size_t unk = 0;
    if (prompt[i] == BOS) ++i;
    auto read_value = [&](size_t& pos) -> long long {
        if (prompt[pos] == UNK) {
            ++pos;
            return fill_unknowns.at(unk++);
        }
        long long v = 0;
        while (pos < prompt.size() && is_digit(prompt[pos])) {
            v = v * 10 + digit_value(prompt[pos]);
            ++pos;
        }
        return v;
    };
    long long acc = read_value(i) % modulus;
    while (i < prompt.size() && is_operator(prompt[i])) {
        const int op = prompt[i++];
        const long long b = read_value(i) % modulus;
        if (op == PLUS) acc = (acc + b) % modulus;
        if (op == MINUS) acc = ((acc - b) % modulus + modulus) % modulus;
        if (op == TIMES) acc = (acc * b) % modulus;
    }
    return acc;
}

TaskInstance make_task(const std::string& expr, int modulus = 97) {
    // expr like "3+4" or "5*3-2+6", single-digit operands
    TaskInstance t;
    t.knobs.modulus = modulus;
    t.knobs.chain_length = 0;
    t.prompt.push_back(BOS);
    for (char c : expr) {
        if (c >= '0' && c <= '9') {
            t.slots.emplace_back(static_cast<int>(t.prompt.size()), c - '0');
            t.prompt.push_back(digit_token(c - '0'));
        } else if (c == '+') {
            t.prompt.push_back(PLUS);
            t.knobs.chain_length++;
        } else if (c == '-') {
            t.prompt.push_back(MINUS);
            t.knobs.chain_length++;
        } else if (c == '*') {
            t.prompt.push_back(TIMES);
            t.knobs.chain_length++;
        }
    }
    t.prompt.push_back(ASK);
    t.answer = static_cast<int>(oracle_eval_prompt(t.prompt, modulus));
    if (t.knobs.chain_length == 0) t.knobs.chain_length = 1;
    return t;
}

std::vector<int> answer_tokens(int value) {
    std::vector<int> r{ANS};
    const auto digits = encode_number(value);
    r.insert(r.end(), digits.begin(), digits.end());
    r.push_back(EOS);
    return r;
}

}  // namespace

TEST_CASE("generate_task: direct arithmetic and determinism") {
    TaskKnobs knobs{1, 10, 97};
    SUBCASE("chain length 1 answers match the independent evaluator") {
        for (uint64_t s = 0; s < 50; ++s) {
            Rng rng(s);
            const TaskInstance t = generate_task(knobs, s, rng);
            CHECK(t.answer == oracle_eval_prompt(t.prompt, 97));
        }
    }
    SUBCASE("3+4 mod 97 gives 7") {
        const TaskInstance t = make_task("3+4");
        CHECK(t.answer == 7);
    }
    SUBCASE("5*3-2+6 evaluates left-to-right to 19") {
        const TaskInstance t = make_task("5*3-2+6");
        CHECK(t.answer == 19);
        CHECK(oracle_eval_prompt(t.prompt, 97) == 19);
    }
    SUBCASE("same knobs and seed give identical prompts") {
        Rng a(9), b(9);
        TaskKnobs k3{3, 10, 97};
        CHECK(generate_task(k3, 1, a).prompt == generate_task(k3, 1, b).prompt);
    }
    SUBCASE("longer chains agree with the independent evaluator") {
        for (uint64_t s = 0; s < 50; ++s) {
            Rng rng(100 + s);
            TaskKnobs k{4, 10, 97};
            const TaskInstance t = generate_task(k, s, rng);
            CHECK(t.answer == oracle_eval_prompt(t.prompt, 97));
        }
    }
    SUBCASE("knobs outside vocabulary capacity are rejected") {
        Rng rng(0);
        CHECK_THROWS_AS(generate_task(TaskKnobs{0, 10, 97}, 1, rng), std::invalid_argument);
        CHECK_THROWS_AS(generate_task(TaskKnobs{1, 10, 1000}, 1, rng), std::invalid_argument);
        CHECK_THROWS_AS(generate_task(TaskKnobs{13, 10, 97}, 1, rng), std::invalid_argument);
    }
}

TEST_CASE("verify: outcome-only reward channel") {
    const TaskInstance t = make_task("3+4");
    SUBCASE("correct final answer earns reward 1") {
        std::vector<int> resp{STEP, digit_token(7), CHECK, digit_token(7)};
        const auto ans = answer_tokens(7);
        resp.insert(resp.end(), ans.begin(), ans.end());
        const VerifierResult r = verify(resp, t);
        CHECK(r.reward == 1);
        CHECK(*r.extracted == 7);
    }
    SUBCASE("no answer marker") {
        const VerifierResult r = verify({STEP, digit_token(7), EOS}, t);
        CHECK(r.reward == 0);
        CHECK(r.reason == VerifierResult::Failure::NoAnswerMarker);
    }
    SUBCASE("answer-only shortcut still earns reward 1") {
        const VerifierResult r = verify(answer_tokens(7), t);
        CHECK(r.reward == 1);
    }
    SUBCASE("marker with no digits is malformed") {
        const VerifierResult r = verify({ANS, EOS}, t);
        CHECK(r.reward == 0);
        CHECK(r.reason == VerifierResult::Failure::Malformed);
    }
    SUBCASE("wrong value") {
        const VerifierResult r = verify(answer_tokens(8), t);
        CHECK(r.reward == 0);
        CHECK(r.reason == VerifierResult::Failure::WrongValue);
    }
    SUBCASE("the last answer marker wins") {
        std::vector<int> resp = answer_tokens(8);
        const auto good = answer_tokens(7);
        resp.insert(resp.end(), good.begin(), good.end());
        CHECK(verify(resp, t).reward == 1);
    }
    SUBCASE("verifier is a pure function") {
        const auto resp = answer_tokens(7);
        const auto a = verify(resp, t);
        const auto b = verify(resp, t);
        CHECK(a.reward == b.reward);
        CHECK(a.extracted == b.extracted);
    }
}

TEST_CASE("canonical responses verify on their own tasks") {
    for (uint64_t s = 0; s < 100; ++s) {
        Rng rng(500 + s);
        TaskKnobs k{1 + static_cast<int>(s % 4), 10, 97};
        const TaskInstance t = generate_task(k, s, rng);
        CHECK(verify(canonical_response(t), t).reward == 1);
    }
}

TEST_CASE("count_numeric_quantities") {
    CHECK(count_numeric_quantities(make_task("3+4")) == 2);
    CHECK(count_numeric_quantities(make_task("5*3-2+6")) == 4);
    for (uint64_t s = 0; s < 100; ++s) {
        Rng rng(900 + s);
        TaskKnobs k{1 + static_cast<int>(s % 5), 10, 97};
        const TaskInstance t = generate_task(k, s, rng);
        CHECK(count_numeric_quantities(t) == k.chain_length + 1);
        CHECK(static_cast<int>(t.slots.size()) == k.chain_length + 1);
    }
}

TEST_CASE("rewrite_backward") {
    SUBCASE("z+4 = 7 recovers z = 3") {
        const TaskInstance t = make_task("3+4");
        const auto rewrites = rewrite_backward(t, 1000);
        REQUIRE(rewrites.size() == 4);  // both slots uniquely recoverable
        CHECK(rewrites[0].origin == TaskOrigin::SelfVerification);
        CHECK(rewrites[1].origin == TaskOrigin::Fobar);
        CHECK(rewrites[0].answer == 3);
        CHECK(rewrites[1].answer == 3);
        CHECK(rewrites[2].answer == 4);
        CHECK(*rewrites[0].parent_id == t.id);
        // Templates: the Self-Verification variant states the answer as a
        // condition; the FOBAR variant keeps the original question and appends
        // the if-we-know clause.
        bool sv_has_given = false, fb_has_if = false, fb_has_ask = false;
        for (int tok : rewrites[0].prompt) sv_has_given |= tok == GIVEN;
        for (int tok : rewrites[1].prompt) {
            fb_has_if |= tok == IFANS;
            fb_has_ask |= tok == ASK;
        }
        CHECK(sv_has_given);
        CHECK(fb_has_if);
        CHECK(fb_has_ask);
    }
    SUBCASE("every rewrite answer passes the brute-force substitution check") {
        int checked = 0;
        for (uint64_t s = 0; s < 100; ++s) {
            Rng rng(1300 + s);
            TaskKnobs k{1 + static_cast<int>(s % 4), 10, 97};
            const TaskInstance t = generate_task(k, s, rng);
            for (const auto& r : rewrite_backward(t, 2000 + 64 * s)) {
                // Substitute the recovered answer back into the masked prompt
                // and confirm the original answer with the oracle evaluator.
                CHECK(oracle_eval_prompt(r.prompt, 97, {r.answer}) == t.answer);
                ++checked;
            }
        }
        CHECK(checked > 100);
    }
    SUBCASE("rewrite count is at most 2m, with equality when all slots recover uniquely") {
        for (uint64_t s = 0; s < 100; ++s) {
            Rng rng(1700 + s);
            TaskKnobs k{1 + static_cast<int>(s % 4), 10, 97};
            const TaskInstance t = generate_task(k, s, rng);
            const auto rewrites = rewrite_backward(t, 4000 + 64 * s);
            const int m = count_numeric_quantities(t);
            CHECK(static_cast<int>(rewrites.size()) <= 2 * m);

            // Count uniquely recoverable slots with the independent oracle.
            std::vector<int> operands, ops;
            parse_prompt_expression(t.prompt, &operands, &ops);
            int unique_slots = 0;
            for (size_t slot = 0; slot < operands.size(); ++slot) {
                int matches = 0;
                std::vector<int> trial = operands;
                for (int z = 0; z < 10; ++z) {
                    trial[slot] = z;
                    if (eval_chain(trial, ops, 97) == t.answer) ++matches;
                }
                if (matches == 1) ++unique_slots;
            }
            CHECK(static_cast<int>(rewrites.size()) == 2 * unique_slots);
        }
    }
    SUBCASE("multiplication-by-zero patterns drop the ambiguous slot") {
        // 0*z: every z gives 0, so the z slot cannot be recovered.
        const TaskInstance t = make_task("0*5");
        const auto rewrites = rewrite_backward(t, 1);
        CHECK(rewrites.size() < 4);
    }
    SUBCASE("rewrites of rewrites are rejected") {
        const TaskInstance t = make_task("3+4");
        auto rewrites = rewrite_backward(t, 1);
        REQUIRE(!rewrites.empty());
        CHECK_THROWS_AS(rewrite_backward(rewrites[0], 50), std::invalid_argument);
    }
    SUBCASE("rewrite canonical responses verify") {
        const TaskInstance t = make_task("5*3-2+6");
        for (const auto& r : rewrite_backward(t, 1)) CHECK(verify(canonical_response(r), r).reward == 1);
    }
}

TEST_CASE("task serialization round-trips") {
    Rng rng(31);
    const TaskInstance t = generate_task(TaskKnobs{3, 10, 97}, 42, rng);
    const auto rewrites = rewrite_backward(t, 100);
    std::vector<TaskInstance> all{t};
    all.insert(all.end(), rewrites.begin(), rewrites.end());
    const std::string path = "test_tasks_roundtrip.jsonl";
    save_tasks(path, all);
    const auto back = load_tasks(path);
    REQUIRE(back.size() == all.size());
    for (size_t i = 0; i < all.size(); ++i) {
        CHECK(back[i].id == all[i].id);
        CHECK(back[i].parent_id == all[i].parent_id);
        CHECK(back[i].origin == all[i].origin);
        CHECK(back[i].prompt == all[i].prompt);
        CHECK(back[i].answer == all[i].answer);
        CHECK(back[i].slots == all[i].slots);
    }
    std::remove(path.c_str());
}
