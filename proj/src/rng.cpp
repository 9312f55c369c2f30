#include "uxnet/rng.hpp"

#include <cmath>
#include <numbers>

namespace uxnet {

uint64_t Rng::below(uint64_t n) {
    if (n <= 1) return 0;
    // rejection keeps the draw unbiased
    const uint64_t limit = (~uint64_t{0}) - (~uint64_t{0}) % n;
    uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double stddev) {
    for (;;) {
        const double z = normal();
        if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
}

}  // namespace uxnet
