// SPDX-License-Identifier: Apache-2.0
//
// Named central-difference checks over every differentiable kernel and loss.
// Each case builds fresh random inputs from its seed.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace kdforge {

struct GradCheckCase {
    std::string name;
    std::function<double(std::uint64_t seed)> run;  // max relative error
};

const std::vector<GradCheckCase>& gradcheck_cases();

struct GradCheckResult {
    std::string name;
    double max_error = 0.0;  // worst over seeds
};

// Runs every case whose name contains `filter` (all when empty) on seeds
// first_seed .. first_seed + seeds - 1.
std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds, std::uint64_t first_seed = 1,
                                                 const std::string& filter = "");

}  // namespace kdforge
