#include "rlvr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rlvr {

namespace {

constexpr char kMagic[8] = {'R', 'L', 'V', 'R', 'C', 'K', 'P', 'T'};

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

void put_str(std::vector<uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
    const std::vector<uint8_t>& b;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > b.size()) throw std::runtime_error("checkpoint: truncated file");
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
        uint32_t bits = u32();
        float x;
        std::memcpy(&x, &bits, 4);
        return x;
    }
    std::string str() {
        uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(&b[pos]), n);
        pos += n;
        return s;
    }
};

}  // namespace

const TensorPtr& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

std::vector<uint8_t> Checkpoint::encode() const {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 8);
    put_u32(out, version);
    put_u32(out, static_cast<uint32_t>(config.size()));
    for (const auto& [k, v] : config) {
        put_str(out, k);
        put_str(out, v);
    }
    put_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        put_str(out, name);
        put_u32(out, static_cast<uint32_t>(t->shape.size()));
        for (int e : t->shape) put_u64(out, static_cast<uint64_t>(e));
        for (double x : t->v) put_f32(out, static_cast<float>(x));
    }
    return out;
}

Checkpoint Checkpoint::decode(const std::vector<uint8_t>& bytes) {
    Reader r{bytes};
    r.need(8);
    if (std::memcmp(&bytes[0], kMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic");
    r.pos = 8;
    Checkpoint ck;
    ck.version = r.u32();
    if (ck.version != 1) throw std::runtime_error("checkpoint: unsupported version");
    const uint32_t nkv = r.u32();
    for (uint32_t i = 0; i < nkv; ++i) {
        std::string k = r.str();
        ck.config[k] = r.str();
    }
    const uint64_t nt = r.u64();
    for (uint64_t i = 0; i < nt; ++i) {
        std::string name = r.str();
        const uint32_t rank = r.u32();
        std::vector<int> shape(rank);
        int64_t n = 1;
        for (uint32_t j = 0; j < rank; ++j) {
            shape[j] = static_cast<int>(r.u64());
            n *= shape[j];
        }
        std::vector<double> vals(n);
        for (int64_t j = 0; j < n; ++j) vals[j] = static_cast<double>(r.f32());
        ck.add(name, Tensor::from(std::move(shape), std::move(vals)));
    }
    return ck;
}

void Checkpoint::save(const std::string& path) const {
    const auto bytes = encode();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode(bytes);
}

uint64_t fnv1a64(const uint8_t* data, size_t n) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hash_hex(const std::vector<uint8_t>& bytes) {
    const uint64_t h = fnv1a64(bytes.data(), bytes.size());
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[15 - i] = digits[(h >> (4 * i)) & 0xf];
    return s;
}

std::string checkpoint_hash(const Checkpoint& ck) {
    return hash_hex(ck.encode());
}

}  // namespace rlvr
