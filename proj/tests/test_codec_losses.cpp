// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>

#include "kdforge/codec_losses.hpp"
#include "kdforge/errors.hpp"
#include "kdforge/gradcheck.hpp"
#include "kdforge/ops.hpp"

using namespace kdforge;

namespace {

Tensor sinusoid(double hz, std::size_t n, double rate = 8000.0, double amp = 0.5) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / rate);
    }
    return Tensor({1, 1, n}, std::move(v));
}

Tensor constant_map(double v) {
    return Tensor({1, 1, 4}, v);
}

MelConfig small_mel() {
    MelConfig c;
    c.scales = {3, 4};
    c.mel_bins = 6;
    return c;
}

DiscriminatorConfig small_disc() {
    DiscriminatorConfig c;
    c.count = 2;
    c.layers = 2;
    c.channels = 3;
    c.kernel = 3;
    return c;
}

}  // namespace

TEST_CASE("time-domain l1") {
    Rng rng(1);
    const Tensor a = Tensor::uniform({2, 1, 64}, rng, -1, 1);
    const Tensor b = Tensor::uniform({2, 1, 64}, rng, -1, 1);
    CHECK(time_l1(a, a).item() == 0.0);
    CHECK(time_l1(a, add_scalar(a, 0.5)).item() == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(time_l1(a, b).item() == time_l1(b, a).item());
    CHECK_THROWS_AS(time_l1(a, Tensor::zeros({2, 1, 32})), ShapeError);
}

TEST_CASE("spectrogram matches a direct DFT of one frame") {
    MelConfig cfg;
    cfg.scales = {5};
    cfg.mel_bins = 8;
    const MultiScaleMel mel(cfg);
    Rng rng(2);
    const Tensor x = Tensor::uniform({1, 1, 96}, rng, -1, 1);
    const Tensor spec = mel.spectrograms(x)[0];  // [1, frames, 8]
    const std::size_t w = 32;
    CHECK(spec.shape() == Shape{1, (96 - w) / (w / 4) + 1, 8});
    const std::vector<double> fb = mel_filterbank(8, w, 8000.0);
    const std::size_t frame = 3;
    std::vector<double> mag(w / 2 + 1);
    for (std::size_t k = 0; k < mag.size(); ++k) {
        std::complex<double> acc = 0.0;
        for (std::size_t n = 0; n < w; ++n) {
            const double hann = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / w);
            acc += hann * x.at(frame * w / 4 + n) * std::polar(1.0, -2 * std::numbers::pi * k * n / w);
        }
        mag[k] = std::max(std::abs(acc), kMagnitudeFloor);
    }
    for (std::size_t m = 0; m < 8; ++m) {
        double expect = 0.0;
        for (std::size_t k = 0; k < mag.size(); ++k) {
            expect += fb[m * mag.size() + k] * mag[k];
        }
        CHECK(spec.at(frame * 8 + m) == doctest::Approx(expect).epsilon(1e-10));
    }
}

TEST_CASE("mel filterbank triangles peak at one and stay nonnegative") {
    const std::vector<double> fb = mel_filterbank(16, 512, 8000.0);
    const std::size_t bins = 257;
    for (std::size_t m = 0; m < 16; ++m) {
        double peak = 0.0;
        for (std::size_t k = 0; k < bins; ++k) {
            CHECK(fb[m * bins + k] >= 0.0);
            peak = std::max(peak, fb[m * bins + k]);
        }
        CHECK(peak > 0.5);
        CHECK(peak <= 1.0);
    }
}

TEST_CASE("multi-scale mel loss") {
    const MultiScaleMel mel;
    const Tensor a440 = sinusoid(440, 1024);
    CHECK(mel.loss(a440, a440).item() == 0.0);
    const double far = mel.loss(a440, sinusoid(880, 1024)).item();
    const double near = mel.loss(a440, sinusoid(450, 1024)).item();
    CHECK(far > 0.0);
    CHECK(near > 0.0);
    CHECK(far > near);
    CHECK_THROWS_AS(mel.loss(sinusoid(440, 256), sinusoid(440, 256)), RangeError);
}

TEST_CASE("mel loss with zero alphas is the normalized multi-scale l1") {
    MelConfig cfg = small_mel();
    cfg.alpha = {0.0, 0.0};
    const MultiScaleMel mel(cfg);
    Rng rng(3);
    const Tensor a = Tensor::uniform({2, 1, 64}, rng, -1, 1);
    const Tensor b = Tensor::uniform({2, 1, 64}, rng, -1, 1);
    const auto sa = mel.spectrograms(a);
    const auto sb = mel.spectrograms(b);
    double expect = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < sa[i].numel(); ++j) {
            acc += std::abs(sa[i].at(j) - sb[i].at(j));
        }
        expect += acc / static_cast<double>(sa[i].numel());
    }
    CHECK(mel.loss(a, b).item() == doctest::Approx(expect / 4.0).epsilon(1e-12));
}

TEST_CASE("generator hinge arithmetic") {
    CHECK(gen_adv_from_scores({Tensor::zeros({2, 1, 5})}).item() == 1.0);
    CHECK(gen_adv_from_scores({constant_map(1.0), constant_map(3.0)}).item() == 0.0);
    CHECK(gen_adv_from_scores({constant_map(0.5), constant_map(-0.5)}).item() == 1.0);
}

TEST_CASE("feature matching arithmetic and invariances") {
    CHECK(feat_match_from_features({{Tensor({1}, {2.0})}}, {{Tensor({1}, {1.0})}}).item() == 1.0);

    Rng rng(4);
    DiscriminatorConfig cfg = small_disc();
    const MultiScaleDiscriminator disc(cfg, rng);
    const Tensor x = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    CHECK(feat_match(x, x, disc).item() == 0.0);

    // A purely linear toy discriminator: the ratio is scale invariant.
    const Tensor w1 = Tensor::randn({3, 1, 3}, rng);
    const Tensor w2 = Tensor::randn({3, 3, 3}, rng);
    auto linear_features = [&](const Tensor& in) {
        const Tensor f1 = conv1d(in, w1, Tensor(), 1, 1);
        const Tensor f2 = conv1d(f1, w2, Tensor(), 2, 1);
        return std::vector<std::vector<Tensor>>{{f1, f2}};
    };
    const Tensor y = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    const double base = feat_match_from_features(linear_features(x), linear_features(y)).item();
    const double doubled =
        feat_match_from_features(linear_features(scale(x, 2.0)), linear_features(scale(y, 2.0))).item();
    CHECK(doubled == doctest::Approx(base).epsilon(1e-12));
    CHECK(base > 0.0);
}

TEST_CASE("commitment convention") {
    ResidualTrace one;
    one.residuals.push_back(Tensor({1, 2}, {1.0, 0.0}));
    one.selected.push_back(Tensor({1, 2}, {0.0, 0.0}));
    CHECK(commitment(one).item() == 1.0);
    ResidualTrace exact;
    exact.residuals.push_back(Tensor({1, 2}, {0.3, 0.4}));
    exact.selected.push_back(Tensor({1, 2}, {0.3, 0.4}));
    CHECK(commitment(exact).item() == 0.0);
    CHECK_THROWS_AS(commitment(ResidualTrace{}), ValidationError);

    Rng rng(5);
    CodecConfig cc = CodecConfig::desk_teacher();
    cc.rvq_stages = 3;
    const Codec codec(cc, rng);
    const Quantized q = codec.encode_quantize(Tensor::uniform({2, 1, 128}, rng, -1, 1));
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < 3; ++s) {
        ResidualTrace stage;
        stage.residuals.push_back(q.trace.residuals[s]);
        stage.selected.push_back(q.trace.selected[s]);
        const double v = commitment(stage).item();
        CHECK(v <= prev);
        prev = v;
    }
}

TEST_CASE("discriminator loss arithmetic") {
    const std::vector<Tensor> zeros = {Tensor::zeros({1, 1, 3})};
    CHECK(disc_loss_from_scores(zeros, zeros, zeros).item() == 5.0);
    CHECK(disc_loss_from_scores({constant_map(1.5)}, {constant_map(-1.0)}, {constant_map(-2.0)}).item() == 0.0);
    Rng rng(6);
    const Tensor r = Tensor::randn({1, 1, 4}, rng);
    const Tensor s = Tensor::randn({1, 1, 4}, rng);
    const Tensor t = Tensor::randn({1, 1, 4}, rng);
    CHECK(disc_loss_from_scores({r, r}, {s, s}, {t, t}).item() ==
          doctest::Approx(disc_loss_from_scores({r}, {s}, {t}).item()).epsilon(1e-15));
}

TEST_CASE("effective lambdas under the weight factor") {
    Lambdas l;
    CHECK(l.real_pair() == std::array<double, 5>{0.1, 2, 4, 4, 0.1});
    l.weight_factor = 0.75;
    const auto e = l.real_pair();
    const std::array<double, 5> expect = {0.075, 1.5, 3, 3, 0.075};
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(e[i] == doctest::Approx(expect[i]).epsilon(1e-15));
        CHECK(l.teacher_pair()[i] == e[i]);
    }
    l.scope = WeightFactorScope::distill_only;
    CHECK(l.real_pair() == std::array<double, 5>{0.1, 2, 4, 4, 0.1});
    CHECK(l.teacher_pair()[1] == 1.5);
    CHECK(l.teacher_pair()[4] == 0.1);
    CHECK_THROWS_AS(parse_weight_factor_scope("some"), ConfigError);
}

TEST_CASE("codec total on identical waveforms leaves the hinge residue") {
    Rng rng(7);
    DiscriminatorConfig dc = small_disc();
    dc.zero_init_final = true;
    const MultiScaleDiscriminator disc(dc, rng);
    const MultiScaleMel mel(small_mel());
    const Tensor x = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    const Tensor commit = Tensor::scalar(0.3);
    for (double wf : {0.75, 1.0, 1.25}) {
        Lambdas l;
        l.weight_factor = wf;
        CodecLossBreakdown bd;
        const double total = codec_total(x, x, x, commit, disc, mel, l, {}, &bd).item();
        CHECK(total == doctest::Approx(wf * (l.adv * 2 + l.commit * 0.3)).epsilon(1e-12));
        CHECK(bd.time_real == 0.0);
        CHECK(bd.mel_teacher == 0.0);
        CHECK(bd.feat_real == 0.0);
        l.scope = WeightFactorScope::distill_only;
        CHECK(codec_total(x, x, x, commit, disc, mel, l).item() ==
              doctest::Approx(l.adv * (1 + wf) + l.commit * 0.3).epsilon(1e-12));
    }
}

TEST_CASE("codec total equals the sum of its nine weighted terms") {
    Rng rng(8);
    const MultiScaleDiscriminator disc(small_disc(), rng);
    const MultiScaleMel mel(small_mel());
    const Tensor x = Tensor::uniform({2, 1, 32}, rng, -1, 1);
    const Tensor s = Tensor::uniform({2, 1, 32}, rng, -1, 1);
    const Tensor t = Tensor::uniform({2, 1, 32}, rng, -1, 1);
    const Tensor commit = Tensor::scalar(0.7);
    const Lambdas l;
    CodecLossBreakdown bd;
    const double total = codec_total(x, s, t, commit, disc, mel, l, {}, &bd).item();
    const double literal = l.time * (time_l1(x, s).item() + time_l1(s, t).item()) +
                           l.mel * (mel.loss(x, s).item() + mel.loss(s, t).item()) +
                           l.adv * (gen_adv(x, s, disc).item() + gen_adv(s, t, disc).item()) +
                           l.feat * (feat_match(x, s, disc).item() + feat_match(s, t, disc).item()) +
                           l.commit * 0.7;
    CHECK(std::abs(total - literal) < 1e-10);
    CHECK(std::abs(bd.recombine(l) - total) < 1e-10);

    CodecLossOptions on_student;
    on_student.adversarial_on_student = true;
    CodecLossBreakdown alt;
    codec_total(x, s, t, commit, disc, mel, l, on_student, &alt);
    CHECK(alt.adv_teacher == alt.adv_real);
}

TEST_CASE("gradient flow: teacher output frozen, generator frozen under the discriminator loss") {
    Rng rng(9);
    const MultiScaleDiscriminator disc(small_disc(), rng);
    const MultiScaleMel mel(small_mel());
    Tensor x = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    Tensor s = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    Tensor t = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    x.set_requires_grad(true);
    s.set_requires_grad(true);
    t.set_requires_grad(true);
    backward(codec_total(x, s, t, Tensor::scalar(0.0), disc, mel, Lambdas{}));
    for (double g : t.grad()) {
        CHECK(g == 0.0);
    }
    double sg = 0.0;
    for (double g : s.grad()) {
        sg += std::abs(g);
    }
    CHECK(sg > 0.0);

    s.zero_grad();
    zero_grad(disc.named_parameters());
    backward(disc_loss(x, s, t, disc));
    for (double g : s.grad()) {
        CHECK(g == 0.0);
    }
    double dg = 0.0;
    for (const auto& [name, p] : disc.named_parameters()) {
        for (double g : p.grad()) {
            dg += std::abs(g);
        }
    }
    CHECK(dg > 0.0);
}

TEST_CASE("codec loss gradients pass central-difference checks") {
    Rng rng(10);
    const MultiScaleDiscriminator disc(small_disc(), rng);
    const MultiScaleMel mel(small_mel());
    const Tensor x = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    const Tensor t = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    const Tensor s = Tensor::uniform({1, 1, 32}, rng, -1, 1);
    CHECK(grad_check([&](const Tensor& v) { return time_l1(x, v); }, s, 1e-5) < 1e-3);
    CHECK(grad_check([&](const Tensor& v) { return mel.loss(x, v); }, s, 1e-5) < 1e-3);
    // The feature-matching denominators are constants of the gradient, so
    // the numerical side holds them at their value at the base point.
    const FeatureScales at_s = feature_scales(disc(s).features);
    const auto dx = disc(x).features;
    CHECK(grad_check([&](const Tensor& v) { return feat_match_from_features(dx, disc(v).features, &at_s); }, s,
                     1e-5) < 1e-3);
    CHECK(grad_check([&](const Tensor& v) { return feat_match(v, x, disc); }, s, 1e-5) < 1e-3);
    CHECK(grad_check([&](const Tensor& v) { return gen_adv(x, v, disc); }, s, 1e-5) < 1e-3);
    CodecLossOptions frozen;
    frozen.frozen_real_scales = at_s;
    CHECK(grad_check(
              [&](const Tensor& v) { return codec_total(x, v, t, Tensor::scalar(0.1), disc, mel, Lambdas{}, frozen); },
              s, 1e-5) < 1e-3);
    ResidualTrace trace;
    trace.selected.push_back(Tensor::randn({3, 4}, rng));
    CHECK(grad_check(
              [&](const Tensor& r) {
                  ResidualTrace tr = trace;
                  tr.residuals = {r};
                  return commitment(tr);
              },
              Tensor::randn({3, 4}, rng), 1e-5) < 1e-6);
}
