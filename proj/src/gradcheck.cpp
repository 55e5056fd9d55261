// SPDX-License-Identifier: Apache-2.0
#include "kdforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "kdforge/errors.hpp"

namespace kdforge {

namespace {

double scalar_value(const Tensor& t) {
    if (!t.defined() || t.numel() != 1) {
        throw GraphError("grad_check: function must return a scalar, got shape " +
                         (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
    }
    return t.item();
}

}  // namespace

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn, const std::vector<Tensor>& inputs,
                  double eps) {
    if (!(eps >= 1e-5 && eps <= 1e-2)) {
        throw ValidationError("grad_check: eps must lie in [1e-5, 1e-2], got " + std::to_string(eps));
    }
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& x : inputs) {
        leaves.push_back(x.detach().set_requires_grad(true));
    }
    const Tensor out = fn(leaves);
    scalar_value(out);
    std::vector<std::vector<double>> analytic;
    if (out.requires_grad()) {
        backward(out);
    }
    for (const Tensor& leaf : leaves) {
        analytic.push_back(leaf.grad());
    }

    NoGradGuard no_grad;
    std::vector<Tensor> probe;
    probe.reserve(inputs.size());
    for (const Tensor& x : inputs) {
        probe.push_back(x.detach());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        auto values = probe[i].mutable_data();
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double saved = values[j];
            values[j] = saved + eps;
            const double up = scalar_value(fn(probe));
            values[j] = saved - eps;
            const double down = scalar_value(fn(probe));
            values[j] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[i][j];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double eps) {
    return grad_check([&fn](const std::vector<Tensor>& xs) { return fn(xs[0]); }, std::vector<Tensor>{x}, eps);
}

}  // namespace kdforge
