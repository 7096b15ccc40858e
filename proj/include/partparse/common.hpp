#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace partparse {

// All numerics run in double so analytic gradients can be validated against
// central finite differences at tight tolerances.
using real = double;

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define PP_CHECK(cond, msg)                                       \
    do {                                                          \
        if (!(cond)) throw ::partparse::Error(std::string(msg));  \
    } while (0)

// Deterministic RNG wrapper. Conversions to reals/ints are hand-rolled so
// streams are reproducible across standard libraries, not just across runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed + 0x9e3779b97f4a7c15ULL) {
        // warm up; splitmix64 keeps nearby seeds decorrelated
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    real next_real() { return static_cast<real>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo,hi)
    real uniform(real lo, real hi) { return lo + (hi - lo) * next_real(); }

    // uniform integer in [0,n)
    std::uint64_t next_index(std::uint64_t n) {
        // modulo bias is negligible for n << 2^64 but reject anyway
        if (n == 0) return 0;
        std::uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= lim) v = next_u64();
        return v % n;
    }

    int next_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(next_index(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // standard normal via Box-Muller (deterministic, no cached spare)
    real next_normal() {
        real u1 = next_real();
        real u2 = next_real();
        while (u1 <= 1e-300) u1 = next_real();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::uint64_t state_;
};

// Stable sub-seed derivation for nested deterministic streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x7f4a7c159e3779b9ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace partparse
