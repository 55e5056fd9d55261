// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "kdforge/tensor.hpp"

namespace kdforge {

// Compares the analytic gradient of a scalar function against central
// differences and returns
//   max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)
// over every component of every input. eps must lie in [1e-5, 1e-2].
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn, const std::vector<Tensor>& inputs,
                  double eps);
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double eps);

}  // namespace kdforge
