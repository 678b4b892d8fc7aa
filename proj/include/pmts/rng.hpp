#pragma once

#include <cmath>
#include <cstdint>

namespace pmts {

// Deterministic splittable RNG built on splitmix64. The standard library's
// distributions are not bit-portable across implementations, so every draw
// in the project (init, sampling, shuffling) goes through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Child stream derived from (current state, salt); does not advance the
    // parent, so stream layout is independent of draw order elsewhere.
    Rng split(std::uint64_t salt) const {
        std::uint64_t z = state_ ^ (0x9E3779B97F4A7C15ull * (salt + 0x632BE59BD9B4E019ull));
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return Rng(z ^ (z >> 31));
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Index in [0, n); n must be > 0.
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    // Standard normal via Box-Muller; the pair partner is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace pmts
