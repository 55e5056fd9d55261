// SPDX-License-Identifier: Apache-2.0
#include "kdforge/codec_losses.hpp"

#include <algorithm>
#include <cmath>

#include "kdforge/errors.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

namespace {

Tensor accumulate(const Tensor& total, const Tensor& term) {
    return total.defined() ? add(total, term) : term;
}

// mean(relu(1 + sign * score))
Tensor hinge(const Tensor& score, double sign) {
    return mean(relu(add_scalar(scale(score, sign), 1.0)));
}

}  // namespace

Tensor time_l1(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("time l1: waveform " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return l1(a, b);
}

Tensor gen_adv_from_scores(const std::vector<Tensor>& scores) {
    if (scores.empty()) {
        throw ValidationError("adversarial loss: no discriminator scores");
    }
    Tensor total;
    for (const Tensor& s : scores) {
        total = accumulate(total, hinge(s, -1.0));
    }
    return scale(total, 1.0 / static_cast<double>(scores.size()));
}

Tensor gen_adv(const Tensor& /*first*/, const Tensor& second, const MultiScaleDiscriminator& disc) {
    return gen_adv_from_scores(disc(second).scores);
}

FeatureScales feature_scales(const std::vector<std::vector<Tensor>>& features) {
    FeatureScales out(features.size());
    for (std::size_t k = 0; k < features.size(); ++k) {
        for (const Tensor& f : features[k]) {
            double acc = 0.0;
            for (double v : f.data()) {
                acc += std::abs(v);
            }
            out[k].push_back(std::max(acc / static_cast<double>(f.numel()), 1e-8));
        }
    }
    return out;
}

Tensor feat_match_from_features(const std::vector<std::vector<Tensor>>& a,
                                const std::vector<std::vector<Tensor>>& b, const FeatureScales* scales) {
    if (a.size() != b.size() || a.empty()) {
        throw ShapeError("feature matching: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                         " discriminators");
    }
    const FeatureScales own = scales ? FeatureScales{} : feature_scales(b);
    const FeatureScales& denom = scales ? *scales : own;
    if (denom.size() != a.size()) {
        throw ShapeError("feature matching: scales for " + std::to_string(denom.size()) + " discriminators");
    }
    Tensor total;
    std::size_t maps = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (a[k].size() != b[k].size()) {
            throw ShapeError("feature matching: discriminator " + std::to_string(k) + " exposes " +
                             std::to_string(a[k].size()) + " vs " + std::to_string(b[k].size()) + " layers");
        }
        if (denom[k].size() != a[k].size()) {
            throw ShapeError("feature matching: scale count differs from layer count");
        }
        for (std::size_t l = 0; l < a[k].size(); ++l) {
            total = accumulate(total, scale(l1(a[k][l], b[k][l]), 1.0 / denom[k][l]));
            ++maps;
        }
    }
    return scale(total, 1.0 / static_cast<double>(maps));
}

Tensor feat_match(const Tensor& a, const Tensor& b, const MultiScaleDiscriminator& disc) {
    return feat_match_from_features(disc(a).features, disc(b).features);
}

Tensor commitment(const ResidualTrace& trace) {
    if (trace.residuals.empty() || trace.residuals.size() != trace.selected.size()) {
        throw ValidationError("commitment: empty or inconsistent residual trace");
    }
    Tensor total;
    for (std::size_t s = 0; s < trace.residuals.size(); ++s) {
        const double dim = static_cast<double>(trace.residuals[s].size(-1));
        total = accumulate(total, scale(mse(trace.residuals[s], trace.selected[s]), dim));
    }
    return total;
}

WeightFactorScope parse_weight_factor_scope(std::string_view name) {
    if (name == "all") {
        return WeightFactorScope::all;
    }
    if (name == "distill_only" || name == "distill-only") {
        return WeightFactorScope::distill_only;
    }
    throw ConfigError("unknown weight factor scope '" + std::string(name) + "' (expected all or distill_only)");
}

std::string to_string(WeightFactorScope scope) {
    return scope == WeightFactorScope::all ? "all" : "distill_only";
}

void Lambdas::validate() const {
    for (double v : {time, mel, adv, feat, commit, weight_factor}) {
        if (!(v >= 0.0)) {
            throw ConfigError("codec loss coefficients and weight factor must be nonnegative");
        }
    }
}

std::array<double, 5> Lambdas::real_pair() const {
    const double wf = scope == WeightFactorScope::all ? weight_factor : 1.0;
    return {time * wf, mel * wf, adv * wf, feat * wf, commit * wf};
}

std::array<double, 5> Lambdas::teacher_pair() const {
    return {time * weight_factor, mel * weight_factor, adv * weight_factor, feat * weight_factor,
            real_pair()[4]};
}

double CodecLossBreakdown::recombine(const Lambdas& lambdas) const {
    const auto r = lambdas.real_pair();
    const auto t = lambdas.teacher_pair();
    return r[0] * time_real + t[0] * time_teacher + r[1] * mel_real + t[1] * mel_teacher + r[2] * adv_real +
           t[2] * adv_teacher + r[3] * feat_real + t[3] * feat_teacher + r[4] * commit;
}

Tensor codec_total(const Tensor& x_in, const Tensor& s, const Tensor& t_in, const Tensor& commit,
                   const MultiScaleDiscriminator& disc, const MultiScaleMel& mel, const Lambdas& lambdas,
                   const CodecLossOptions& opts, CodecLossBreakdown* breakdown) {
    lambdas.validate();
    const Tensor x = x_in.detach();
    const Tensor t = t_in.detach();

    const Tensor time_real = time_l1(x, s);
    const Tensor time_teacher = time_l1(s, t);

    const std::vector<Tensor> mel_s = mel.spectrograms(s);
    const Tensor mel_real = mel.loss(mel.spectrograms(x), mel_s);
    const Tensor mel_teacher = mel.loss(mel_s, mel.spectrograms(t));

    const DiscriminatorOutput dx = disc(x);
    const DiscriminatorOutput ds = disc(s);
    const DiscriminatorOutput dt = disc(t);
    const Tensor adv_real = gen_adv_from_scores(ds.scores);
    const Tensor adv_teacher = gen_adv_from_scores(opts.adversarial_on_student ? ds.scores : dt.scores);
    const Tensor feat_real = feat_match_from_features(
        dx.features, ds.features, opts.frozen_real_scales ? &*opts.frozen_real_scales : nullptr);
    const Tensor feat_teacher = feat_match_from_features(ds.features, dt.features);

    const auto r = lambdas.real_pair();
    const auto q = lambdas.teacher_pair();
    const Tensor terms[9] = {time_real, time_teacher, mel_real, mel_teacher, adv_real,
                             adv_teacher, feat_real, feat_teacher, commit};
    const double coef[9] = {r[0], q[0], r[1], q[1], r[2], q[2], r[3], q[3], r[4]};
    Tensor total;
    for (std::size_t i = 0; i < 9; ++i) {
        total = accumulate(total, scale(terms[i], coef[i]));
    }
    if (breakdown) {
        breakdown->time_real = time_real.item();
        breakdown->time_teacher = time_teacher.item();
        breakdown->mel_real = mel_real.item();
        breakdown->mel_teacher = mel_teacher.item();
        breakdown->adv_real = adv_real.item();
        breakdown->adv_teacher = adv_teacher.item();
        breakdown->feat_real = feat_real.item();
        breakdown->feat_teacher = feat_teacher.item();
        breakdown->commit = commit.item();
        breakdown->total = total.item();
    }
    return total;
}

Tensor disc_loss_from_scores(const std::vector<Tensor>& real, const std::vector<Tensor>& student,
                             const std::vector<Tensor>& teacher) {
    if (real.empty() || real.size() != student.size() || real.size() != teacher.size()) {
        throw ShapeError("discriminator loss: mismatched score lists");
    }
    Tensor total;
    for (std::size_t k = 0; k < real.size(); ++k) {
        const Tensor pair = scale(add(hinge(real[k], -1.0), hinge(student[k], 1.0)), 2.0);
        total = accumulate(total, add(pair, hinge(teacher[k], 1.0)));
    }
    return scale(total, 1.0 / static_cast<double>(real.size()));
}

Tensor disc_loss(const Tensor& x, const Tensor& s, const Tensor& t, const MultiScaleDiscriminator& disc) {
    return disc_loss_from_scores(disc(x.detach()).scores, disc(s.detach()).scores, disc(t.detach()).scores);
}

}  // namespace kdforge
