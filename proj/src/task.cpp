#include "rlvr/task.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace rlvr {

namespace vocab {

std::vector<int> encode_number(int value) {
    if (value < 0) throw std::invalid_argument("encode_number: negative value");
    std::vector<int> out;
    if (value == 0) return {digit_token(0)};
    while (value > 0) {
        out.insert(out.begin(), digit_token(value % 10));
        value /= 10;
    }
    return out;
}

int parse_number(const std::vector<int>& tokens, size_t pos, size_t* end) {
    long long value = 0;
    size_t i = pos;
    while (i < tokens.size() && is_digit(tokens[i]) && i - pos < 9) {
        value = value * 10 + digit_value(tokens[i]);
        ++i;
    }
    if (end) *end = i;
    if (i == pos) return -1;
    return static_cast<int>(value);
}

std::string token_name(int id) {
    switch (id) {
        case PAD: return "<pad>";
        case BOS: return "<bos>";
        case EOS: return "<eos>";
        case PLUS: return "+";
        case MINUS: return "-";
        case TIMES: return "*";
        case STEP: return ";";
        case CHECK: return "<check>";
        case ANS: return "<ans>";
        case UNK: return "z";
        case GIVEN: return "<given>";
        case IFANS: return "<ifans>";
        case ASK: return "<ask>";
        case ASKZ: return "<askz>";
        default:
            if (is_digit(id)) return std::string(1, static_cast<char>('0' + digit_value(id)));
            return "<r" + std::to_string(id) + ">";
    }
}

std::string detokenize(const std::vector<int>& tokens) {
    std::string s;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ' ';
        s += token_name(tokens[i]);
    }
    return s;
}

int reasoning_group_of(int id) {
    const auto& groups = reasoning_groups();
    for (size_t g = 0; g < groups.size(); ++g)
        for (int t : groups[g])
            if (t == id) return static_cast<int>(g);
    return -1;
}

}  // namespace vocab

using namespace vocab;

std::string origin_name(TaskOrigin o) {
    switch (o) {
        case TaskOrigin::Original: return "original";
        case TaskOrigin::SelfVerification: return "self-verification";
        case TaskOrigin::Fobar: return "fobar";
    }
    return "original";
}

TaskOrigin origin_from_name(const std::string& s) {
    if (s == "self-verification") return TaskOrigin::SelfVerification;
    if (s == "fobar") return TaskOrigin::Fobar;
    if (s == "original") return TaskOrigin::Original;
    throw std::invalid_argument("unknown task origin '" + s + "'");
}

int eval_chain(const std::vector<int>& operands, const std::vector<int>& ops, int modulus) {
    if (operands.empty() || ops.size() + 1 != operands.size())
        throw std::invalid_argument("eval_chain: need one more operand than ops");
    if (modulus <= 0) throw std::invalid_argument("eval_chain: modulus must be positive");
    long long v = operands[0] % modulus;
    for (size_t i = 0; i < ops.size(); ++i) {
        const long long b = operands[i + 1] % modulus;
        switch (ops[i]) {
            case PLUS: v = (v + b) % modulus; break;
            case MINUS: v = ((v - b) % modulus + modulus) % modulus; break;
            case TIMES: v = (v * b) % modulus; break;
            default: throw std::invalid_argument("eval_chain: unknown operator token");
        }
    }
    return static_cast<int>(v);
}

namespace {

void validate_knobs(const TaskKnobs& k) {
    if (k.chain_length < 1) throw std::invalid_argument("task knobs: chain length must be >= 1");
    if (k.operand_range < 1 || k.modulus < 1)
        throw std::invalid_argument("task knobs: operand range and modulus must be positive");
    // Vocabulary capacity: two digit tokens bound both operands and answers,
    // and prompts must stay well inside the context window.
    if (k.operand_range > 100 || k.modulus > 100 || k.chain_length > 12)
        throw std::invalid_argument("task knobs: outside vocabulary capacity");
}

// Expression tokens for operands (value, or -1 for the unknown) and operator ids.
std::vector<int> build_expr_tokens(const std::vector<int>& operands, const std::vector<int>& ops,
                                   std::vector<std::pair<int, int>>* slots, int base_offset) {
    std::vector<int> out;
    for (size_t i = 0; i < operands.size(); ++i) {
        if (i > 0) out.push_back(ops[i - 1]);
        if (operands[i] < 0) {
            out.push_back(UNK);
        } else {
            if (slots) slots->emplace_back(base_offset + static_cast<int>(out.size()), operands[i]);
            const auto digits = encode_number(operands[i]);
            out.insert(out.end(), digits.begin(), digits.end());
        }
    }
    return out;
}

const int kOpTokens[3] = {PLUS, MINUS, TIMES};

}  // namespace

TaskInstance generate_task(const TaskKnobs& knobs, uint64_t id, Rng& rng) {
    validate_knobs(knobs);
    TaskInstance t;
    t.id = id;
    t.knobs = knobs;
    std::vector<int> operands(knobs.chain_length + 1);
    std::vector<int> ops(knobs.chain_length);
    for (int& d : operands) d = rng.uniform_index(knobs.operand_range);
    for (int& o : ops) o = kOpTokens[rng.uniform_index(3)];
    t.answer = eval_chain(operands, ops, knobs.modulus);
    t.prompt.push_back(BOS);
    auto expr = build_expr_tokens(operands, ops, &t.slots, static_cast<int>(t.prompt.size()));
    t.prompt.insert(t.prompt.end(), expr.begin(), expr.end());
    t.prompt.push_back(ASK);
    return t;
}

VerifierResult verify(const std::vector<int>& response, const TaskInstance& task) {
    VerifierResult r;
    size_t marker = response.size();
    for (size_t i = 0; i < response.size(); ++i)
        if (response[i] == ANS) marker = i;
    if (marker == response.size()) {
        r.reason = VerifierResult::Failure::NoAnswerMarker;
        return r;
    }
    const int value = parse_number(response, marker + 1);
    if (value < 0) {
        r.reason = VerifierResult::Failure::Malformed;
        return r;
    }
    r.extracted = value;
    if (value == task.answer) {
        r.reward = 1;
    } else {
        r.reason = VerifierResult::Failure::WrongValue;
    }
    return r;
}

int count_numeric_quantities(const TaskInstance& task) {
    return task.num_quantities();
}

void parse_prompt_expression(const std::vector<int>& prompt, std::vector<int>* operands,
                             std::vector<int>* ops) {
    operands->clear();
    ops->clear();
    size_t i = 0;
    if (i < prompt.size() && prompt[i] == BOS) ++i;
    bool expect_operand = true;
    while (i < prompt.size()) {
        const int tok = prompt[i];
        if (expect_operand) {
            if (tok == UNK) {
                operands->push_back(-1);
                ++i;
            } else if (is_digit(tok)) {
                size_t end;
                operands->push_back(parse_number(prompt, i, &end));
                i = end;
            } else {
                break;
            }
            expect_operand = false;
        } else {
            if (!is_operator(tok)) break;
            ops->push_back(tok);
            ++i;
            expect_operand = true;
        }
    }
    if (!operands->empty() && operands->size() != ops->size() + 1)
        throw std::invalid_argument("parse_prompt_expression: dangling operator");
}

std::vector<TaskInstance> rewrite_backward(const TaskInstance& task, uint64_t first_id) {
    if (task.origin != TaskOrigin::Original)
        throw std::invalid_argument("rewrite_backward: task must be an original");
    std::vector<TaskInstance> out;
    if (task.slots.empty()) return out;

    std::vector<int> operands, ops;
    parse_prompt_expression(task.prompt, &operands, &ops);

    uint64_t next_id = first_id;
    for (size_t slot = 0; slot < operands.size(); ++slot) {
        // Recover the masked operand by brute force over the operand domain.
        int unique_z = -1;
        int matches = 0;
        std::vector<int> trial = operands;
        for (int z = 0; z < task.knobs.operand_range; ++z) {
            trial[slot] = z;
            if (eval_chain(trial, ops, task.knobs.modulus) == task.answer) {
                ++matches;
                unique_z = z;
            }
        }
        if (matches != 1) continue;  // non-unique inversions are dropped

        std::vector<int> masked = operands;
        masked[slot] = -1;

        for (int variant = 0; variant < 2; ++variant) {
            TaskInstance r;
            r.id = next_id++;
            r.parent_id = task.id;
            r.origin = variant == 0 ? TaskOrigin::SelfVerification : TaskOrigin::Fobar;
            r.knobs = task.knobs;
            r.answer = unique_z;
            r.prompt.push_back(BOS);
            auto expr = build_expr_tokens(masked, ops, &r.slots, static_cast<int>(r.prompt.size()));
            r.prompt.insert(r.prompt.end(), expr.begin(), expr.end());
            const auto ans_digits = encode_number(task.answer);
            if (variant == 0) {
                // Self-Verification: state the answer as a condition, ask for z.
                r.prompt.push_back(GIVEN);
                r.prompt.insert(r.prompt.end(), ans_digits.begin(), ans_digits.end());
                r.prompt.push_back(ASKZ);
            } else {
                // FOBAR: keep the question in its original form, then append
                // "if we know the answer to the above question is <a>, what is z".
                r.prompt.push_back(ASK);
                r.prompt.push_back(IFANS);
                r.prompt.insert(r.prompt.end(), ans_digits.begin(), ans_digits.end());
                r.prompt.push_back(ASKZ);
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

std::vector<int> canonical_response(const TaskInstance& task) {
    std::vector<int> out;
    const auto append_number = [&out](int v) {
        const auto digits = encode_number(v);
        out.insert(out.end(), digits.begin(), digits.end());
    };
    if (task.origin == TaskOrigin::Original) {
        std::vector<int> operands, ops;
        parse_prompt_expression(task.prompt, &operands, &ops);
        long long v = operands[0] % task.knobs.modulus;
        for (size_t i = 0; i < ops.size(); ++i) {
            std::vector<int> prefix(operands.begin(), operands.begin() + static_cast<long>(i) + 2);
            std::vector<int> prefix_ops(ops.begin(), ops.begin() + static_cast<long>(i) + 1);
            v = eval_chain(prefix, prefix_ops, task.knobs.modulus);
            out.push_back(STEP);
            append_number(static_cast<int>(v));
        }
        out.push_back(CHECK);
        append_number(task.answer);
    } else {
        // Inverse tasks: propose z, verify the stated answer, emit z.
        std::vector<int> operands, ops;
        parse_prompt_expression(task.prompt, &operands, &ops);
        std::vector<int> filled = operands;
        for (int& o : filled)
            if (o < 0) o = task.answer;
        out.push_back(STEP);
        append_number(task.answer);
        out.push_back(CHECK);
        append_number(eval_chain(filled, ops, task.knobs.modulus));
    }
    out.push_back(ANS);
    append_number(task.answer);
    out.push_back(EOS);
    return out;
}

// --- serialization -----------------------------------------------------------

std::string task_to_line(const TaskInstance& t) {
    nlohmann::json j;
    j["id"] = t.id;
    if (t.parent_id)
        j["parent"] = *t.parent_id;
    else
        j["parent"] = nullptr;
    j["origin"] = origin_name(t.origin);
    j["prompt"] = t.prompt;
    j["answer"] = t.answer;
    j["knobs"] = {{"chain", t.knobs.chain_length}, {"range", t.knobs.operand_range}, {"mod", t.knobs.modulus}};
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& [pos, val] : t.slots) slots.push_back({pos, val});
    j["slots"] = slots;
    return j.dump();
}

TaskInstance task_from_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    TaskInstance t;
    t.id = j.at("id").get<uint64_t>();
    if (!j.at("parent").is_null()) t.parent_id = j.at("parent").get<uint64_t>();
    t.origin = origin_from_name(j.at("origin").get<std::string>());
    t.prompt = j.at("prompt").get<std::vector<int>>();
    t.answer = j.at("answer").get<int>();
    t.knobs.chain_length = j.at("knobs").at("chain").get<int>();
    t.knobs.operand_range = j.at("knobs").at("range").get<int>();
    t.knobs.modulus = j.at("knobs").at("mod").get<int>();
    for (const auto& s : j.at("slots")) t.slots.emplace_back(s[0].get<int>(), s[1].get<int>());
    return t;
}

void save_tasks(const std::string& path, const std::vector<TaskInstance>& tasks) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("save_tasks: cannot open '" + path + "'");
    for (const auto& t : tasks) f << task_to_line(t) << '\n';
}

std::vector<TaskInstance> load_tasks(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_tasks: cannot open '" + path + "'");
    std::vector<TaskInstance> out;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) out.push_back(task_from_line(line));
    }
    return out;
}

}  // namespace rlvr
