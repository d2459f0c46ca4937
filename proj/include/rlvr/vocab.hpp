#pragma once

#include <array>
#include <string>
#include <vector>

namespace rlvr::vocab {

// Fixed synthetic vocabulary for the modular-arithmetic task family.
// Ids 24..47 are reserved so V stays at 48.
enum Token : int {
    PAD = 0,
    BOS = 1,
    EOS = 2,
    D0 = 3,  // digits 0..9 map to ids 3..12
    PLUS = 13,
    MINUS = 14,
    TIMES = 15,
    STEP = 16,   // step marker between partial results
    CHECK = 17,  // verification marker before restating the result
    ANS = 18,    // answer marker
    UNK = 19,    // unknown-placeholder "z"
    GIVEN = 20,  // "the answer is ..." condition head
    IFANS = 21,  // "if we know the answer to the above question is ..."
    ASK = 22,    // forward question: compute the chain
    ASKZ = 23,   // inverse question: recover z
    RESERVED0 = 24,
};

constexpr int kVocabSize = 48;

inline bool is_digit(int id) { return id >= D0 && id < D0 + 10; }
inline int digit_value(int id) { return id - D0; }
inline int digit_token(int d) { return D0 + d; }
inline bool is_operator(int id) { return id == PLUS || id == MINUS || id == TIMES; }

// Non-negative integer -> digit tokens, no leading zeros.
std::vector<int> encode_number(int value);
// Parse a maximal digit run starting at pos; returns -1 when none.
int parse_number(const std::vector<int>& tokens, size_t pos, size_t* end = nullptr);

std::string token_name(int id);
std::string detokenize(const std::vector<int>& tokens);

// Reasoning-token groups for ReasonScore: step markers, operators,
// verification marker, answer marker. Everything else is non-reasoning.
inline const std::vector<std::vector<int>>& reasoning_groups() {
    static const std::vector<std::vector<int>> groups = {
        {STEP}, {PLUS, MINUS, TIMES}, {CHECK}, {ANS}};
    return groups;
}

// Group index for a token id, or -1 for non-reasoning tokens.
int reasoning_group_of(int id);

}  // namespace rlvr::vocab
