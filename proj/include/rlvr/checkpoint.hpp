#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rlvr/tensor.hpp"

namespace rlvr {

// Binary checkpoint container: magic, format version, config key-values, then
// named tensors as (name length, name bytes, rank, extents, little-endian
// 32-bit floats). Files round-trip bit-exactly.
struct Checkpoint {
    uint32_t version = 1;
    std::map<std::string, std::string> config;           // ordered, so encoding is canonical
    std::vector<std::pair<std::string, TensorPtr>> tensors;

    void add(const std::string& name, const TensorPtr& t) { tensors.emplace_back(name, t); }
    const TensorPtr& get(const std::string& name) const;
    bool has(const std::string& name) const;

    std::vector<uint8_t> encode() const;
    static Checkpoint decode(const std::vector<uint8_t>& bytes);

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// FNV-1a 64-bit content hash, hex-encoded.
uint64_t fnv1a64(const uint8_t* data, size_t n);
std::string hash_hex(const std::vector<uint8_t>& bytes);
std::string checkpoint_hash(const Checkpoint& ck);

}  // namespace rlvr
