// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace kdforge {

// Deterministic generator. Only the raw mt19937_64 engine output is used;
// every distribution is implemented here so draws are identical across
// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64() { return engine_(); }
    std::uint32_t next_u32() { return static_cast<std::uint32_t>(engine_() >> 32); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    // Uniform on the open interval (0, 1).
    double uniform_open();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    // Unbiased integer in [0, n).
    std::size_t below(std::size_t n);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_;
    std::uint64_t stream_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace kdforge
