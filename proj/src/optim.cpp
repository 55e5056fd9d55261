// SPDX-License-Identifier: Apache-2.0
#include "kdforge/optim.hpp"

#include <cmath>

#include "kdforge/errors.hpp"

namespace kdforge {

void OptimizerConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ConfigError("optimizer: lr must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("optimizer: betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) {
        throw ConfigError("optimizer: eps must be positive");
    }
    if (!(clip >= 0.0)) {
        throw ConfigError("optimizer: clip must be nonnegative");
    }
}

Adam::Adam(NamedTensors params, const OptimizerConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& [name, p] : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

double Adam::step() {
    double sq = 0.0;
    for (const auto& [name, p] : params_) {
        if (!p.has_grad()) {
            continue;
        }
        for (double g : p.impl()->grad) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient in parameter '" + name + "'");
            }
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    const double factor = (cfg_.clip > 0.0 && norm > cfg_.clip) ? cfg_.clip / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        if (!p.has_grad()) {
            continue;
        }
        const std::vector<double>& g = p.impl()->grad;
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j] * factor;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            w[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        }
        snap_to_f32(p);
    }
    return norm;
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) {
        p.zero_grad();
    }
}

}  // namespace kdforge
