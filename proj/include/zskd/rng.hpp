#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace zskd {

// All randomness in the toolkit flows through this wrapper around
// std::mt19937_64 (the engine's output sequence is fixed by the C++ standard,
// so seeded runs reproduce bit-exactly across platforms). Distributions are
// implemented here rather than taken from <random>, because the standard does
// not pin distribution algorithms.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform on [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0,1); safe as a log() argument.
    double uniform_pos() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased-enough bounded draw (Lemire multiply-shift).
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Standard normal via the polar method; the spare deviate is cached.
    double normal();

    // Normal(0, sigma) truncated to +-bound_sigmas standard deviations, by
    // resampling.
    double truncated_normal(double sigma, double bound_sigmas = 2.0);

    // Gamma(shape=alpha, scale=1) via Marsaglia-Tsang; the alpha < 1 regime
    // uses the boost identity: draw at alpha+1 and multiply by U^(1/alpha).
    double gamma(double alpha);

    // Seeded Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Mixes a base seed with job coordinates (class index, beta index, batch
// index, ...) so parallel and serial schedules draw from identical streams.
uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0);

}  // namespace zskd
