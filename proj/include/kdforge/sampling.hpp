// SPDX-License-Identifier: Apache-2.0
//
// Random loss-weight vectors on the probability simplex.
//
//   s1: n iid uniform(0, 1) draws divided by their sum. Sums to one but is
//       not uniform on the simplex (mass concentrates near the centre).
//   s2: sorted-differences construction over the integer grid 0..2^32:
//       n-1 distinct cut points in [1, 2^32 - 1], sorted, bracketed by 0
//       and 2^32, differenced and rescaled. Uniform (Dirichlet(1,...,1)).
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "kdforge/rng.hpp"

namespace kdforge {

struct SimplexWeights {
    std::vector<double> a;

    std::size_t size() const { return a.size(); }
    double operator[](std::size_t i) const { return a[i]; }
    double total() const;
};

enum class SamplingStrategy { none, s1, s2 };

SamplingStrategy parse_sampling(std::string_view name);
std::string to_string(SamplingStrategy strategy);

inline constexpr std::uint64_t kSimplexGrid = std::uint64_t{1} << 32;

SimplexWeights sample_s1(Rng& rng, std::size_t n = 3);
SimplexWeights sample_s2(Rng& rng, std::size_t n = 3);
// Dispatches on `strategy`; `none` is rejected.
SimplexWeights sample_weights(SamplingStrategy strategy, Rng& rng, std::size_t n = 3);

// Zeroes the inactive coordinates and renormalizes the rest, which is the
// marginal of the draw on the active face of the simplex.
SimplexWeights restrict_to_active(const SimplexWeights& w, const std::vector<bool>& active);

}  // namespace kdforge
