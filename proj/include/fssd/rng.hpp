#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace fssd {

// Deterministic RNG used everywhere. Distributions are hand-rolled on top of
// mt19937_64 so that generated streams are identical across standard-library
// versions, which the byte-reproducibility contracts rely on.
class Rng {
public:
    explicit Rng(uint64_t seed) : base_(mix(seed)), gen_(base_) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0,1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        // rejection sampling, bias-free
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    // standard normal via Box-Muller (no cached spare)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.28318530717958647692 * u2);
    }

    // independent substream, e.g. one per evaluation episode
    Rng fork(uint64_t stream) const {
        return Rng(base_ ^ mix(stream + 0x9e3779b97f4a7c15ull));
    }

    static uint64_t mix(uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

private:
    uint64_t base_;
    std::mt19937_64 gen_;
};

} // namespace fssd
