#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace posbd {

// 64-bit FNV-1a. Used for stream tags and as the content digest for
// manifests (non-cryptographic; integrity against accidental change only).
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Counter-based deterministic RNG.
///
/// Every random decision in a run derives from one root seed. Streams are
/// split by name: `derive("sft").derive(epoch)` yields an independent stream
/// whose draws depend only on (seed, tag path, draw counter), never on how
/// many draws other streams made. That makes any subsequence reproducible in
/// isolation, which the samplers rely on (a rollout keyed by
/// (prompt, k, position) is identical whether or not its siblings ran).
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}

    static CounterRng from_seed(std::uint64_t seed) {
        return CounterRng(mix64(seed ^ 0x706F7362645F7631ULL));
    }

    CounterRng derive(std::uint64_t tag) const {
        return CounterRng(mix64(key_ ^ mix64(tag ^ 0xD1B54A32D192ED03ULL)));
    }

    CounterRng derive(std::string_view name) const { return derive(fnv1a64(name)); }

    std::uint64_t next_u64() { return mix64(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

    /// Uniform double in [0, 1), 53 bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Rejection sampling, unbiased.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("CounterRng::next_below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return r % n;
    }

    /// Standard normal via Box-Muller (no cached spare, so draws stay a pure
    /// function of the counter).
    double next_gauss() {
        const double u1 = 1.0 - next_double();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(next_below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace posbd
