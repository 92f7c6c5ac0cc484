#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dmem {

// Deterministic 64-bit generator used for all randomness in the library.
// Chosen over std engines so that streams are reproducible across platforms
// and trivially re-implementable by external reference generators.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform integer in [0, n). Modulo bias is irrelevant for the small n
    // used here and keeps the mapping trivial to mirror elsewhere.
    uint64_t u32_below(uint64_t n) { return next_u64() % n; }

    // Uniform double in [0, 1).
    double real() { return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * real(); }

    // Standard normal via Box-Muller (no cached second value, determinism
    // beats throughput at this scale).
    double normal() {
        double u1 = real();
        double u2 = real();
        while (u1 <= 1e-300) u1 = real();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    uint64_t state_;
};

// SplitMix64 finalizer applied to an arbitrary integer; used for stable
// hash-based splits (e.g. train/test binding partition).
inline uint64_t mix64(uint64_t x) {
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// FNV-1a over raw bytes; used for weight checksums and config hashes.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

} // namespace dmem
