#pragma once

#include <cstdint>
#include <random>

namespace dico {

/// Mixes a base seed with stream indices so independent substreams
/// (per sample, per render, ...) can be derived deterministically.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
    return splitmix64(splitmix64(base ^ (a * 0x9e3779b97f4a7c15ull)) ^ b);
}

/// Seeded random source. All randomness in the project flows through this
/// wrapper so that a (seed, config) pair fully determines every run.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return mean + stddev * normal_(eng_);
    }

    double uniform() { return uniform_(eng_); }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        std::uniform_int_distribution<int> d(0, n - 1);
        return d(eng_);
    }

    /// Integer in [0, n) drawn directly from the engine. Unlike uniform_int
    /// this consumes exactly one engine step and no distribution state, so a
    /// serialized engine restores the stream exactly. Modulo bias is
    /// negligible for the small n used here.
    int bounded(int n) { return static_cast<int>(eng_() % static_cast<uint64_t>(n)); }

    uint64_t next_u64() { return eng_(); }

    std::mt19937_64& engine() { return eng_; }
    const std::mt19937_64& engine() const { return eng_; }

private:
    std::mt19937_64 eng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace dico
