#include "rlvr/dump.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rlvr {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((x >> (8 * i)) & 0xff));
}
void put_u64(std::vector<uint8_t>& out, uint64_t x) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((x >> (8 * i)) & 0xff));
}
void put_f32(std::vector<uint8_t>& out, float x) {
    uint32_t bits;
    std::memcpy(&bits, &x, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::vector<uint8_t>& b;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > b.size()) throw std::runtime_error("dump: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(b[pos + i]) << (8 * i);
        pos += 4;
        return x;
    }
    uint64_t u64() {
        need(8);
        uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(b[pos + i]) << (8 * i);
        pos += 8;
        return x;
    }
    float f32() {
        const uint32_t bits = u32();
        float x;
        std::memcpy(&x, &bits, 4);
        return x;
    }
};

constexpr char kMagic[8] = {'R', 'L', 'V', 'R', 'D', 'U', 'M', 'P'};

}  // namespace

std::vector<std::pair<uint32_t, uint32_t>> ActivationDump::adjacency_pairs() const {
    std::vector<std::pair<uint32_t, uint32_t>> out;
    for (const auto& s : sequences) {
        for (uint32_t t = 1; t < s.length; ++t) {
            const uint32_t cur = static_cast<uint32_t>(s.offset) + t;
            out.emplace_back(cur, cur - 1);
        }
    }
    return out;
}

size_t ActivationDump::num_chunks() const {
    if (tokens.empty()) return 0;
    return (tokens.size() + static_cast<size_t>(chunk_size) - 1) / static_cast<size_t>(chunk_size);
}

std::pair<size_t, size_t> ActivationDump::chunk_range(size_t chunk) const {
    const size_t start = chunk * static_cast<size_t>(chunk_size);
    if (start >= tokens.size()) throw std::invalid_argument("chunk_range: chunk out of range");
    return {start, std::min(tokens.size(), start + static_cast<size_t>(chunk_size))};
}

void ActivationDump::append_sequence(uint64_t task_id, const std::vector<int>& toks,
                                     const std::vector<double>& vecs) {
    if (vecs.size() != toks.size() * static_cast<size_t>(dim))
        throw std::invalid_argument("append_sequence: vector buffer size mismatch");
    Sequence s;
    s.task_id = task_id;
    s.offset = tokens.size();
    s.length = static_cast<uint32_t>(toks.size());
    sequences.push_back(s);
    tokens.insert(tokens.end(), toks.begin(), toks.end());
    values.insert(values.end(), vecs.begin(), vecs.end());
}

std::vector<uint8_t> ActivationDump::encode() const {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32(out, 1);  // version
    put_u32(out, static_cast<uint32_t>(tap_layer));
    put_u32(out, static_cast<uint32_t>(checkpoint_id.size()));
    out.insert(out.end(), checkpoint_id.begin(), checkpoint_id.end());
    put_u32(out, static_cast<uint32_t>(dim));
    put_u32(out, static_cast<uint32_t>(chunk_size));
    put_u64(out, sequences.size());
    for (const auto& s : sequences) {
        put_u64(out, s.task_id);
        put_u64(out, s.offset);
        put_u32(out, s.length);
    }
    put_u64(out, tokens.size());
    for (int t : tokens) put_u32(out, static_cast<uint32_t>(t));
    for (double v : values) put_f32(out, static_cast<float>(v));
    return out;
}

ActivationDump ActivationDump::decode(const std::vector<uint8_t>& bytes) {
    Reader r{bytes};
    r.need(8);
    if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw std::runtime_error("dump: bad magic");
    r.pos = 8;
    if (r.u32() != 1) throw std::runtime_error("dump: unsupported version");
    ActivationDump d;
    d.tap_layer = static_cast<int>(r.u32());
    const uint32_t idlen = r.u32();
    r.need(idlen);
    d.checkpoint_id.assign(reinterpret_cast<const char*>(&bytes[r.pos]), idlen);
    r.pos += idlen;
    d.dim = static_cast<int>(r.u32());
    d.chunk_size = static_cast<int>(r.u32());
    const uint64_t ns = r.u64();
    d.sequences.resize(ns);
    for (auto& s : d.sequences) {
        s.task_id = r.u64();
        s.offset = r.u64();
        s.length = r.u32();
    }
    const uint64_t nt = r.u64();
    d.tokens.resize(nt);
    for (auto& t : d.tokens) t = static_cast<int>(r.u32());
    d.values.resize(nt * static_cast<size_t>(d.dim));
    for (auto& v : d.values) v = static_cast<double>(r.f32());
    return d;
}

void ActivationDump::save(const std::string& path) const {
    const auto bytes = encode();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("dump: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("dump: write failed");
}

ActivationDump ActivationDump::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dump: cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode(bytes);
}

}  // namespace rlvr
