#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace slicenav {

// Seeded generator with self-contained distributions. mt19937_64 is fully
// specified by the standard and the distributions below avoid the
// implementation-defined std::*_distribution algorithms, so a given seed
// produces the same stream on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed), has_spare_(false), spare_(0.0) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t randint(std::uint64_t n) {
        // rejection sampling keeps the draw unbiased
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    // Uniform integer in [lo, hi] inclusive.
    long randint(long lo, long hi) {
        return lo + static_cast<long>(randint(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool coin() { return (engine_() & 1ull) != 0; }

    // Standard normal via Box-Muller, second value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derive an independent child stream; tag keeps substreams stable when
    // call sites are added or reordered.
    Rng fork(const std::string& tag) {
        std::uint64_t h = 1469598103934665603ull;
        for (const char c : tag) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        return Rng(engine_() ^ h);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_;
    double spare_;
};

}  // namespace slicenav
