#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace rlvr {

// SplitMix64 finalizer, used to derive substream seeds from (seed, tag...).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ (b + 0x9e3779b97f4a7c15ull)); }
inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) { return mix64(mix64(a, b), c); }
inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c, uint64_t d) { return mix64(mix64(a, b, c), d); }

// Deterministic RNG. mt19937_64 output is pinned by the standard, and all
// conversions to doubles are done explicitly here, so sequences are
// bit-identical across platforms and library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t bits() { return engine_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n) by rejection, n >= 1.
    uint64_t uniform_int(uint64_t n) {
        if (n <= 1) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = bits();
        } while (x >= limit);
        return x % n;
    }

    int uniform_index(int n) { return static_cast<int>(uniform_int(static_cast<uint64_t>(n))); }

    // Standard normal (Box-Muller, cached spare).
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Sample an index from unnormalized non-negative weights.
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double r = uniform() * total;
        for (size_t i = 0; i < weights.size(); ++i) {
            r -= weights[i];
            if (r < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent substream addressed by a tag; the parent state is untouched.
    Rng fork(uint64_t tag) const { return Rng(mix64(seed_, tag)); }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace rlvr
