#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace aps {

// Counter-free PRNG (splitmix64 core). Self-contained so streams do not
// depend on libstdc++ distribution internals; every consumer derives its own
// stream with fork(), which keeps parallel data generation order-independent.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // burn one draw so seed 0 does not start on the all-zero orbit
        next_u64();
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Box-Muller, no spare caching so the draw count per call is fixed.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Independent sub-stream for a tagged purpose (per-sample, per-step, ...).
    Rng fork(std::uint64_t tag) const {
        std::uint64_t z = state_ ^ (0x9e3779b97f4a7c15ull * (tag + 0x632be59bd9b4e019ull));
        return Rng(z);
    }

    Rng fork(std::string_view tag) const {
        std::uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return fork(h);
    }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = uniform_index(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::uint64_t state_;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace aps
