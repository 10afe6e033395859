#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace gct {

/// Seedable random source with explicit distribution code so that a given
/// seed produces the same stream on every platform (std distributions are
/// implementation-defined; the mt19937_64 engine itself is not).
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    int uniform_int(int n) {
        return static_cast<int>(engine_() % static_cast<uint64_t>(n));
    }

    /// Standard normal via Box-Muller; second value of each pair is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[i], v[uniform_int(i + 1)]);
        }
    }

    /// k distinct indices drawn from [0, n), in draw order.
    std::vector<int> sample_distinct(int k, int n) {
        std::vector<int> picked;
        picked.reserve(k);
        while (static_cast<int>(picked.size()) < k) {
            int c = uniform_int(n);
            bool dup = false;
            for (int p : picked) {
                if (p == c) { dup = true; break; }
            }
            if (!dup) picked.push_back(c);
        }
        return picked;
    }

private:
    std::mt19937_64 engine_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace gct
