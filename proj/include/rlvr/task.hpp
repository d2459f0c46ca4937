#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rlvr/rng.hpp"
#include "rlvr/vocab.hpp"

namespace rlvr {

struct TaskKnobs {
    int chain_length = 1;   // number of operations
    int operand_range = 10; // operands drawn from [0, operand_range)
    int modulus = 97;
};

enum class TaskOrigin { Original, SelfVerification, Fobar };

std::string origin_name(TaskOrigin o);
TaskOrigin origin_from_name(const std::string& s);

// One verifiable problem: a left-to-right arithmetic chain over the fixed
// vocabulary, evaluated modulo knobs.modulus.
struct TaskInstance {
    uint64_t id = 0;
    std::optional<uint64_t> parent_id;
    TaskOrigin origin = TaskOrigin::Original;
    std::vector<int> prompt;                    // token ids, starts with BOS
    int answer = 0;                             // ground truth in the answer domain
    std::vector<std::pair<int, int>> slots;     // (prompt position, operand value)
    TaskKnobs knobs;

    int num_quantities() const { return static_cast<int>(slots.size()); }
};

struct VerifierResult {
    enum class Failure { None, NoAnswerMarker, Malformed, WrongValue };
    int reward = 0;                    // 1 iff extracted answer equals ground truth
    std::optional<int> extracted;
    Failure reason = Failure::None;
};

// Left-to-right evaluation (no precedence) of operands/ops modulo m.
// ops[i] applies between operands[i] and operands[i+1].
int eval_chain(const std::vector<int>& operands, const std::vector<int>& ops, int modulus);

TaskInstance generate_task(const TaskKnobs& knobs, uint64_t id, Rng& rng);

// Outcome-only verification: scan for the final answer marker and compare the
// digits after it. An answer-only response that matches still earns reward 1.
VerifierResult verify(const std::vector<int>& response, const TaskInstance& task);

int count_numeric_quantities(const TaskInstance& task);

// Backward rewriting of an original task: for each operand slot whose value is
// uniquely recoverable from the answer, emit a Self-Verification variant and a
// FOBAR variant (up to 2m in total). Rewrite ids count up from first_id.
std::vector<TaskInstance> rewrite_backward(const TaskInstance& task, uint64_t first_id);

// Reference solution: one step marker per partial result, a verification
// restatement, then the answer. Used for supervised warmup.
std::vector<int> canonical_response(const TaskInstance& task);

// Extract (operands, ops) from a prompt; UNK slots come back as -1.
void parse_prompt_expression(const std::vector<int>& prompt, std::vector<int>* operands,
                             std::vector<int>* ops);

// Line-delimited record: id, parent id, origin tag, prompt token ids, answer, knobs.
std::string task_to_line(const TaskInstance& t);
TaskInstance task_from_line(const std::string& line);
void save_tasks(const std::string& path, const std::vector<TaskInstance>& tasks);
std::vector<TaskInstance> load_tasks(const std::string& path);

}  // namespace rlvr
