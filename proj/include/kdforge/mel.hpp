// SPDX-License-Identifier: Apache-2.0
//
// Multi-resolution mel spectrograms. Scale i uses a periodic Hann window of
// 2^i samples and a hop of 2^i / 4, no centre padding, an unnormalized DFT
// and an HTK-style triangular mel filterbank spanning 0 Hz to Nyquist.
#pragma once

#include <cstddef>
#include <vector>

#include "kdforge/tensor.hpp"

namespace kdforge {

inline constexpr double kMagnitudeFloor = 1e-5;

struct MelConfig {
    std::vector<std::size_t> scales = {5, 6, 7, 8, 9};
    std::size_t mel_bins = 32;
    std::vector<double> alpha;  // per-scale L2 weights; empty means 1 for every scale
    double sample_rate = 8000.0;

    void validate() const;
    double alpha_at(std::size_t i) const { return alpha.empty() ? 1.0 : alpha[i]; }
    std::size_t alpha_count() const { return alpha.empty() ? scales.size() : alpha.size(); }
    std::size_t max_window() const;
};

// [mel_bins, window/2 + 1] triangular filters.
std::vector<double> mel_filterbank(std::size_t mel_bins, std::size_t window, double sample_rate);

class MultiScaleMel {
public:
    explicit MultiScaleMel(MelConfig cfg = {});

    // One [B, frames_i, mel_bins] spectrogram per scale; x is [B, 1, N].
    std::vector<Tensor> spectrograms(const Tensor& x) const;
    // sum_i (mean|dS_i| + alpha_i mean(dS_i^2)) / (|alpha| * |scales|).
    Tensor loss(const std::vector<Tensor>& a, const std::vector<Tensor>& b) const;
    Tensor loss(const Tensor& a, const Tensor& b) const;

    const MelConfig& config() const { return cfg_; }

private:
    MelConfig cfg_;
    std::vector<Tensor> dft_;         // [2F, 1, W] cosine rows then sine rows, windowed
    std::vector<Tensor> filterbank_;  // [F, mel_bins]
};

Tensor mel_multi_scale(const Tensor& a, const Tensor& b, const MelConfig& cfg = {});

}  // namespace kdforge
