// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "kdforge/nn.hpp"

namespace kdforge {

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 1.0;  // global gradient norm; 0 disables clipping

    void validate() const;
};

// Adam with bias correction and global-norm clipping. Updated parameters are
// rounded to binary32 so they survive the checkpoint format bit-exactly.
class Adam {
public:
    Adam(NamedTensors params, const OptimizerConfig& cfg);

    // Applies one update from the accumulated gradients and returns the
    // global gradient norm before clipping. A non-finite gradient raises
    // NumericError naming the parameter, before any value is modified.
    double step();
    void zero_grad();

    std::size_t steps() const { return t_; }
    const OptimizerConfig& config() const { return cfg_; }
    const NamedTensors& parameters() const { return params_; }

private:
    NamedTensors params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

}  // namespace kdforge
