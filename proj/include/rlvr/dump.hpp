#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rlvr {

// Residual-stream activation dump: one width-d vector per response token,
// grouped by task sequence. Adjacency (same-sequence links) is implicit in the
// sequence layout and never crosses task boundaries.
class ActivationDump {
public:
    struct Sequence {
        uint64_t task_id = 0;
        uint64_t offset = 0;  // first token index
        uint32_t length = 0;
    };

    int tap_layer = 1;
    std::string checkpoint_id;
    int dim = 0;
    int chunk_size = 4096;
    std::vector<Sequence> sequences;
    std::vector<int> tokens;      // token id per dumped position
    std::vector<double> values;   // row-major, tokens.size() x dim

    size_t total_tokens() const { return tokens.size(); }
    const double* vector_at(size_t index) const { return &values[index * static_cast<size_t>(dim)]; }

    // (current, previous) index pairs of adjacent tokens within one sequence.
    std::vector<std::pair<uint32_t, uint32_t>> adjacency_pairs() const;

    // Chunk boundaries: every chunk has chunk_size tokens except the final one.
    size_t num_chunks() const;
    std::pair<size_t, size_t> chunk_range(size_t chunk) const;

    void append_sequence(uint64_t task_id, const std::vector<int>& toks,
                         const std::vector<double>& vecs);

    std::vector<uint8_t> encode() const;  // float32 payload, little-endian
    static ActivationDump decode(const std::vector<uint8_t>& bytes);
    void save(const std::string& path) const;
    static ActivationDump load(const std::string& path);
};

}  // namespace rlvr
