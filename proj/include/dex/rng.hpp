#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dex {

// Deterministic random stream. The engine is std::mt19937_64 (fully specified
// by the standard); all value transforms are done here rather than through
// std::*_distribution so the stream is stable and the full state (engine +
// Box-Muller cache) can be round-tripped through checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the second value is cached.
    double normal();

    // Uniform integer in [0,n), rejection-sampled (no modulo bias).
    int uniform_int(int n);

    // Index drawn according to `probs` (need not be normalized).
    int categorical(std::span<const double> probs);

    // Fisher-Yates permutation of 0..n-1.
    std::vector<int> permutation(int n);

    std::string serialize() const;
    void deserialize(const std::string &s);

private:
    std::mt19937_64 eng_;
    bool has_cache_ = false;
    double cache_ = 0.0;
};

}  // namespace dex
