// SPDX-License-Identifier: Apache-2.0
//
// Codec-decoder distillation objective. With x the real clip, s the student
// reconstruction and t the teacher reconstruction, the generator loss is
//
//   l_time (x,s) + l_time (s,t)   weighted by lambda_time
//   l_mel  (x,s) + l_mel  (s,t)   weighted by lambda_mel
//   l_adv  (x,s) + l_adv  (s,t)   weighted by lambda_adv
//   l_feat (x,s) + l_feat (s,t)   weighted by lambda_feat
//   l_commit                      weighted by lambda_commit
//
// and every lambda is multiplied by the weight factor (or, with the
// distill-only scope, only the lambdas of the (s,t) terms are).
#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kdforge/mel.hpp"
#include "kdforge/models.hpp"

namespace kdforge {

Tensor time_l1(const Tensor& a, const Tensor& b);

// Hinge on the second argument: (1/K) sum_k mean(relu(1 - D_k(second))).
Tensor gen_adv_from_scores(const std::vector<Tensor>& scores);
Tensor gen_adv(const Tensor& first, const Tensor& second, const MultiScaleDiscriminator& disc);

// max(mean|F|, 1e-8) per discriminator and layer.
using FeatureScales = std::vector<std::vector<double>>;
FeatureScales feature_scales(const std::vector<std::vector<Tensor>>& features);

// (1/(K L)) sum_k sum_l mean|F_a - F_b| / scale_kl, the scale taken from b
// (or from `scales` when given) and held constant for differentiation.
Tensor feat_match_from_features(const std::vector<std::vector<Tensor>>& a,
                                const std::vector<std::vector<Tensor>>& b, const FeatureScales* scales = nullptr);
Tensor feat_match(const Tensor& a, const Tensor& b, const MultiScaleDiscriminator& disc);

// Sum over stages of the mean per-vector squared distance between the
// residual and its selected entry.
Tensor commitment(const ResidualTrace& trace);

enum class WeightFactorScope { all, distill_only };
WeightFactorScope parse_weight_factor_scope(std::string_view name);
std::string to_string(WeightFactorScope scope);

struct Lambdas {
    double time = 0.1;
    double mel = 2.0;
    double adv = 4.0;
    double feat = 4.0;
    double commit = 0.1;
    double weight_factor = 1.0;
    WeightFactorScope scope = WeightFactorScope::all;

    void validate() const;
    // Effective {time, mel, adv, feat, commit} for the (x, s) and (s, t) pairs.
    std::array<double, 5> real_pair() const;
    std::array<double, 5> teacher_pair() const;
};

struct CodecLossOptions {
    // When set, the second adversarial term scores the student output
    // instead of the teacher output.
    bool adversarial_on_student = false;
    // Pins the denominators of the (x, s) feature-matching term. Lets a
    // finite-difference check see the same function the gradient describes.
    std::optional<FeatureScales> frozen_real_scales;
};

struct CodecLossBreakdown {
    double time_real = 0.0;
    double time_teacher = 0.0;
    double mel_real = 0.0;
    double mel_teacher = 0.0;
    double adv_real = 0.0;
    double adv_teacher = 0.0;
    double feat_real = 0.0;
    double feat_teacher = 0.0;
    double commit = 0.0;
    double total = 0.0;

    // Recomputes the total from the nine terms.
    double recombine(const Lambdas& lambdas) const;
};

// x and t are treated as constants; gradients flow into s (and through the
// discriminator parameters, which the caller does not step on this pass).
Tensor codec_total(const Tensor& x, const Tensor& s, const Tensor& t, const Tensor& commit,
                   const MultiScaleDiscriminator& disc, const MultiScaleMel& mel, const Lambdas& lambdas,
                   const CodecLossOptions& opts = {}, CodecLossBreakdown* breakdown = nullptr);

// (1/K) sum_k [2 (relu(1 - D_k(x)) + relu(1 + D_k(s))) + relu(1 + D_k(t))],
// each hinge mean-reduced over the score map.
Tensor disc_loss_from_scores(const std::vector<Tensor>& real, const std::vector<Tensor>& student,
                             const std::vector<Tensor>& teacher);
// Waveforms are treated as constants.
Tensor disc_loss(const Tensor& x, const Tensor& s, const Tensor& t, const MultiScaleDiscriminator& disc);

}  // namespace kdforge
