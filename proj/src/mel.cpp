// SPDX-License-Identifier: Apache-2.0
#include "kdforge/mel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kdforge/errors.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

void MelConfig::validate() const {
    if (scales.empty()) {
        throw ConfigError("mel: at least one scale is required");
    }
    for (std::size_t s : scales) {
        if (s < 2 || s > 16) {
            throw ConfigError("mel: window exponent " + std::to_string(s) + " outside [2, 16]");
        }
    }
    if (mel_bins == 0) {
        throw ConfigError("mel: mel_bins must be positive");
    }
    if (!alpha.empty() && alpha.size() != scales.size()) {
        throw ConfigError("mel: " + std::to_string(alpha.size()) + " alpha weights for " +
                          std::to_string(scales.size()) + " scales");
    }
    for (double a : alpha) {
        if (a < 0.0) {
            throw ConfigError("mel: alpha weights must be nonnegative");
        }
    }
    if (!(sample_rate > 0.0)) {
        throw ConfigError("mel: sample rate must be positive");
    }
}

std::size_t MelConfig::max_window() const {
    return std::size_t{1} << *std::max_element(scales.begin(), scales.end());
}

namespace {
double hz_to_mel(double hz) {
    return 2595.0 * std::log10(1.0 + hz / 700.0);
}
double mel_to_hz(double mel) {
    return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}
}  // namespace

std::vector<double> mel_filterbank(std::size_t mel_bins, std::size_t window, double sample_rate) {
    const std::size_t bins = window / 2 + 1;
    const double top = hz_to_mel(sample_rate / 2.0);
    std::vector<double> edges(mel_bins + 2);
    for (std::size_t m = 0; m < edges.size(); ++m) {
        edges[m] = mel_to_hz(top * static_cast<double>(m) / static_cast<double>(mel_bins + 1));
    }
    std::vector<double> fb(mel_bins * bins, 0.0);
    for (std::size_t m = 0; m < mel_bins; ++m) {
        const double lo = edges[m];
        const double mid = edges[m + 1];
        const double hi = edges[m + 2];
        for (std::size_t k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / static_cast<double>(window);
            const double up = (f - lo) / (mid - lo);
            const double down = (hi - f) / (hi - mid);
            fb[m * bins + k] = std::max(0.0, std::min(up, down));
        }
    }
    return fb;
}

MultiScaleMel::MultiScaleMel(MelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (std::size_t s : cfg_.scales) {
        const std::size_t w = std::size_t{1} << s;
        const std::size_t bins = w / 2 + 1;
        std::vector<double> basis(2 * bins * w);
        for (std::size_t k = 0; k < bins; ++k) {
            for (std::size_t n = 0; n < w; ++n) {
                const double hann = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                                          static_cast<double>(w)));
                const double phase = 2.0 * std::numbers::pi * static_cast<double>(k * n % w) / static_cast<double>(w);
                basis[k * w + n] = hann * std::cos(phase);
                basis[(bins + k) * w + n] = -hann * std::sin(phase);
            }
        }
        dft_.emplace_back(Shape{2 * bins, 1, w}, std::move(basis));
        const std::vector<double> fb = mel_filterbank(cfg_.mel_bins, w, cfg_.sample_rate);
        std::vector<double> fbt(bins * cfg_.mel_bins);
        for (std::size_t m = 0; m < cfg_.mel_bins; ++m) {
            for (std::size_t k = 0; k < bins; ++k) {
                fbt[k * cfg_.mel_bins + m] = fb[m * bins + k];
            }
        }
        filterbank_.emplace_back(Shape{bins, cfg_.mel_bins}, std::move(fbt));
    }
}

std::vector<Tensor> MultiScaleMel::spectrograms(const Tensor& x) const {
    if (x.rank() != 3 || x.size(1) != 1) {
        throw ShapeError("mel: expected waveform [B, 1, N], got " + shape_str(x.shape()));
    }
    if (x.size(2) < cfg_.max_window()) {
        throw RangeError("mel: waveform of " + std::to_string(x.size(2)) + " samples is shorter than the " +
                         std::to_string(cfg_.max_window()) + "-sample window");
    }
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < cfg_.scales.size(); ++i) {
        const std::size_t w = std::size_t{1} << cfg_.scales[i];
        const std::size_t bins = w / 2 + 1;
        const Tensor spec = conv1d(x, dft_[i], Tensor(), w / 4, 0);  // [B, 2F, frames]
        const Tensor re = slice(spec, 1, 0, bins);
        const Tensor im = slice(spec, 1, bins, 2 * bins);
        const Tensor power = clamp_min(add(square(re), square(im)), kMagnitudeFloor * kMagnitudeFloor);
        const Tensor mag = permute(sqrt(power), {0, 2, 1});  // [B, frames, F]
        out.push_back(matmul(mag, filterbank_[i]));
    }
    return out;
}

Tensor MultiScaleMel::loss(const std::vector<Tensor>& a, const std::vector<Tensor>& b) const {
    if (a.size() != cfg_.scales.size() || b.size() != cfg_.scales.size()) {
        throw ShapeError("mel: spectrogram lists do not match the scale count");
    }
    Tensor total;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].shape() != b[i].shape()) {
            throw ShapeError("mel: spectrogram " + shape_str(a[i].shape()) + " vs " + shape_str(b[i].shape()));
        }
        const Tensor d = sub(a[i], b[i]);
        Tensor term = mean(abs(d));
        if (cfg_.alpha_at(i) != 0.0) {
            term = add(term, scale(mean(square(d)), cfg_.alpha_at(i)));
        }
        total = total.defined() ? add(total, term) : term;
    }
    return scale(total, 1.0 / static_cast<double>(cfg_.alpha_count() * cfg_.scales.size()));
}

Tensor MultiScaleMel::loss(const Tensor& a, const Tensor& b) const {
    if (a.shape() != b.shape()) {
        throw ShapeError("mel: waveform " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return loss(spectrograms(a), spectrograms(b));
}

Tensor mel_multi_scale(const Tensor& a, const Tensor& b, const MelConfig& cfg) {
    return MultiScaleMel(cfg).loss(a, b);
}

}  // namespace kdforge
