// SPDX-License-Identifier: Apache-2.0
#include "kdforge/sampling.hpp"

#include <algorithm>

#include "kdforge/errors.hpp"

namespace kdforge {

double SimplexWeights::total() const {
    double s = 0.0;
    for (double v : a) {
        s += v;
    }
    return s;
}

SamplingStrategy parse_sampling(std::string_view name) {
    if (name == "none") {
        return SamplingStrategy::none;
    }
    if (name == "s1" || name == "S1") {
        return SamplingStrategy::s1;
    }
    if (name == "s2" || name == "S2") {
        return SamplingStrategy::s2;
    }
    throw ConfigError("unknown sampling strategy '" + std::string(name) + "' (expected none, s1 or s2)");
}

std::string to_string(SamplingStrategy strategy) {
    switch (strategy) {
        case SamplingStrategy::s1:
            return "s1";
        case SamplingStrategy::s2:
            return "s2";
        case SamplingStrategy::none:
            break;
    }
    return "none";
}

SimplexWeights sample_s1(Rng& rng, std::size_t n) {
    if (n == 0) {
        throw ValidationError("sample_s1: need at least one coordinate");
    }
    SimplexWeights w;
    w.a.resize(n);
    double total = 0.0;
    // A zero sum has probability zero; redraw if it ever happens.
    while (total == 0.0) {
        total = 0.0;
        for (double& v : w.a) {
            v = rng.uniform();
            total += v;
        }
    }
    for (double& v : w.a) {
        v /= total;
    }
    return w;
}

SimplexWeights sample_s2(Rng& rng, std::size_t n) {
    if (n == 0) {
        throw ValidationError("sample_s2: need at least one coordinate");
    }
    std::vector<std::uint64_t> cuts;
    cuts.reserve(n + 1);
    cuts.push_back(0);
    while (cuts.size() < n) {
        const std::uint64_t c = rng.next_u32();
        if (c == 0 || std::find(cuts.begin() + 1, cuts.end(), c) != cuts.end()) {
            continue;
        }
        cuts.push_back(c);
    }
    std::sort(cuts.begin() + 1, cuts.end());
    cuts.push_back(kSimplexGrid);
    SimplexWeights w;
    w.a.resize(n);
    constexpr double inv_m = 1.0 / static_cast<double>(kSimplexGrid);
    for (std::size_t i = 0; i < n; ++i) {
        w.a[i] = static_cast<double>(cuts[i + 1] - cuts[i]) * inv_m;
    }
    return w;
}

SimplexWeights sample_weights(SamplingStrategy strategy, Rng& rng, std::size_t n) {
    switch (strategy) {
        case SamplingStrategy::s1:
            return sample_s1(rng, n);
        case SamplingStrategy::s2:
            return sample_s2(rng, n);
        case SamplingStrategy::none:
            break;
    }
    throw ConfigError("sample_weights: strategy 'none' draws nothing");
}

SimplexWeights restrict_to_active(const SimplexWeights& w, const std::vector<bool>& active) {
    if (active.size() != w.size()) {
        throw ValidationError("restrict_to_active: mask length does not match weight count");
    }
    SimplexWeights out = w;
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!active[i]) {
            out.a[i] = 0.0;
        }
        total += out.a[i];
    }
    if (total <= 0.0) {
        throw ValidationError("restrict_to_active: no active coordinate carries weight");
    }
    for (double& v : out.a) {
        v /= total;
    }
    return out;
}

}  // namespace kdforge
