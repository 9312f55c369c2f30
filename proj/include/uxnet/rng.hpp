#pragma once

#include <cstdint>
#include <vector>

namespace uxnet {

/// Counter-based generator: every draw is a pure function of (key, counter), so
/// identical seeds give identical streams on every platform, and `split` derives
/// independent streams without touching the parent's state.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : key_(mix(seed ^ 0x9E3779B97F4A7C15ULL)) {}

    uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n);

    /// Standard normal via Box-Muller (cosine branch only, no cached state).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Normal truncated to [-2 std, +2 std] by rejection.
    double truncated_normal(double stddev);

    bool bernoulli(double p) { return uniform() < p; }

    Rng split(uint64_t stream) const {
        Rng r;
        r.key_ = mix(key_ ^ mix(stream + 0xD1B54A32D192ED03ULL));
        return r;
    }

    uint64_t counter() const { return counter_; }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace uxnet
