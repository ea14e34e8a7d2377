#pragma once

#include <cstdint>

namespace declip {

/// Counter-based deterministic random source. Draw k is a pure function of
/// (seed, k), so a given seed yields the same stream on every platform and
/// streams can be replayed without storing state beyond the counter.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(seed) {}

    uint64_t next_u64() {
        uint64_t z = key_ + (++counter_) * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float uniform_float(float lo, float hi) { return lo + static_cast<float>(uniform()) * (hi - lo); }

    /// Uniform integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    uint64_t counter() const { return counter_; }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

} // namespace declip
