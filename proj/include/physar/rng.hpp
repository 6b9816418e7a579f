#pragma once

// Deterministic, splittable RNG. Counter-based splitmix64 core so that
// per-sample streams can be derived independently of draw order; no
// wall-clock entropy anywhere in the project.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace physar {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) : state_(mix_u64(seed, stream)) {}

    // Independent child stream; parent state unchanged.
    Rng child(uint64_t tag) const { return Rng(state_, mix_u64(tag, 0x632be59bd9b4e019ULL)); }
    Rng child(std::string_view tag) const { return child(hash_str(tag)); }

    uint64_t next_u64() { return splitmix64(state_); }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // [0, n)
    uint64_t next_below(uint64_t n) {
        // multiply-shift rejection-free mapping is fine at these scales
        return n == 0 ? 0 : next_u64() % n;
    }

    // [0, 1)
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // Box-Muller; u strictly positive
        double u = 0.0;
        do {
            u = uniform01();
        } while (u <= 0.0);
        const double v = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform01() < p; }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Uniform draw over a union of intervals, weighted by interval measure.
struct IntervalUnion {
    struct Seg {
        double lo, hi;
    };
    Seg a;
    Seg b;
    bool has_b = false;

    static IntervalUnion single(double lo, double hi) { return {{lo, hi}, {0, 0}, false}; }
    static IntervalUnion pair(double lo1, double hi1, double lo2, double hi2) {
        return {{lo1, hi1}, {lo2, hi2}, true};
    }

    double sample(Rng& rng) const {
        if (!has_b) return rng.uniform(a.lo, a.hi);
        const double wa = a.hi - a.lo;
        const double wb = b.hi - b.lo;
        const double u = rng.uniform01() * (wa + wb);
        return u < wa ? a.lo + u : b.lo + (u - wa);
    }

    bool contains(double x) const {
        return (x >= a.lo && x <= a.hi) || (has_b && x >= b.lo && x <= b.hi);
    }
};

}  // namespace physar
