// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace swarm {

/// SplitMix64. The update constants are part of the wire contract: prompt
/// selection must be reproducible bit-for-bit by any validator.
///
///   state += 0x9E3779B97F4A7C15
///   z = state
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   return z ^ (z >> 31)
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, n) by 128-bit multiply-shift (no modulo bias, no rejection).
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    /// Uniform double in [0, 1) from the top 53 bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; no cached spare so draws stay aligned.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) {
            u1 = 1e-300;
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

/// Derives an independent stream seed from a parent seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    SplitMix64 r(seed ^ (salt * 0xD1B54A32D192ED03ULL));
    r.next();
    return r.next();
}

}  // namespace swarm
