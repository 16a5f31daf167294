// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstddef>
#include <cmath>
#include <vector>

namespace refprop {

/// Splits a seed into decorrelated streams. Output is fully determined by the
/// input bits, so derived seeds are stable across platforms and runs.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Combines a base seed with stream labels (split id, sample index, ...).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(splitmix64(base ^ 0x5851f42d4c957f2dULL) + splitmix64(a) * 3 + b);
}

/// PCG32 (XSH-RR). Fixed-width integer math only; sequences are identical on
/// every platform, which the dataset builder relies on for byte-stable output.
class Pcg32 {
public:
    explicit Pcg32(std::uint64_t seed = 0x853c49e6748fea9bULL,
                   std::uint64_t stream = 0xda3e39cb94b95bdbULL) {
        state_ = 0;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    /// Unbiased integer in [0, bound). bound must be nonzero.
    std::uint32_t next_below(std::uint32_t bound) {
        std::uint32_t threshold = (0u - bound) % bound;
        for (;;) {
            std::uint32_t r = next_u32();
            if (r >= threshold) return r % bound;
        }
    }

    /// Integer in [lo, hi] inclusive.
    int next_range(int lo, int hi) {
        return lo + static_cast<int>(next_below(static_cast<std::uint32_t>(hi - lo + 1)));
    }

    /// Real in [0, 1) with 32 bits of precision.
    double next_real() {
        return next_u32() * (1.0 / 4294967296.0);
    }

    /// Standard normal via Box-Muller. One value per call; the spare is kept.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = next_real();
        } while (u1 <= 1e-12);
        u2 = next_real();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = next_below(static_cast<std::uint32_t>(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t state_;
    std::uint64_t inc_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace refprop
