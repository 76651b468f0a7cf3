// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>

#include "pissa/matrix.hpp"

namespace pissa {

/// Seeded pseudorandom stream: std::mt19937_64 (whose output sequence is fixed by
/// the standard) feeding a hand-rolled Box-Muller normal sampler, so that the same
/// seed gives the same samples regardless of the standard library in use.
class RandomSource {
public:
    static constexpr const char* kAlgorithm = "mt19937_64+boxmuller/v1";

    explicit RandomSource(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on (0, 1], 53 bits.
    Scalar uniform() { return (static_cast<Scalar>(engine_() >> 11) + 1.0) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling removes modulo bias
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do x = engine_();
        while (x >= limit);
        return x % n;
    }

    Scalar normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const Scalar u1 = uniform();
        const Scalar u2 = uniform();
        const Scalar radius = std::sqrt(-2.0 * std::log(u1));
        const Scalar angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    Matrix normal_matrix(std::size_t rows, std::size_t cols, Scalar stddev = 1.0) {
        Matrix m(rows, cols);
        for (Scalar& v : m.data()) v = stddev * normal();
        return m;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    Scalar spare_ = 0;
    bool has_spare_ = false;
};

/// Derives an independent stream seed from a base seed and a configuration index.
/// The xor is passed through splitmix64 so neighbouring indices land far apart.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    std::uint64_t z = (seed ^ index) + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace pissa
