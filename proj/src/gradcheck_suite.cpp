// SPDX-License-Identifier: Apache-2.0
#include "kdforge/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>

#include "kdforge/codec_losses.hpp"
#include "kdforge/gradcheck.hpp"
#include "kdforge/kd_losses.hpp"
#include "kdforge/mel.hpp"
#include "kdforge/models.hpp"
#include "kdforge/nn.hpp"
#include "kdforge/ops.hpp"
#include "kdforge/rng.hpp"
#include "kdforge/sampling.hpp"
#include "kdforge/transfer.hpp"

namespace kdforge {

namespace {

constexpr double kEps = 1e-5;

using Fn1 = std::function<Tensor(const Tensor&)>;
using FnN = std::function<Tensor(const std::vector<Tensor>&)>;

Tensor rand(const Shape& shape, Rng& rng) {
    return Tensor::uniform(shape, rng, -1.0, 1.0);
}

// Magnitudes in [0.1, 1] with random sign, so kinked kernels are probed away
// from their kinks.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
    Tensor t = Tensor::uniform(shape, rng, 0.1, 1.0);
    for (double& v : t.mutable_data()) {
        if (rng.uniform() < 0.5) {
            v = -v;
        }
    }
    return t;
}

Tensor positive(const Shape& shape, Rng& rng) {
    return Tensor::uniform(shape, rng, 0.2, 2.0);
}

// Random linear read-out so that every output element affects the loss.
Tensor readout(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed, 0xBEEF);
    return sum(mul(y, rand(y.shape(), rng)));
}

GradCheckCase unary(std::string name, Tensor (*make)(const Shape&, Rng&), std::function<Tensor(const Tensor&)> op) {
    return {std::move(name), [make, op](std::uint64_t seed) {
                Rng rng(seed);
                const Tensor x = make({3, 5}, rng);
                return grad_check([&](const Tensor& v) { return readout(op(v), seed); }, x, kEps);
            }};
}

GradCheckCase binary(std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op, Shape a, Shape b) {
    return {std::move(name), [op, a, b](std::uint64_t seed) {
                Rng rng(seed);
                return grad_check([&](const std::vector<Tensor>& in) { return readout(op(in[0], in[1]), seed); },
                                  {rand(a, rng), rand(b, rng)}, kEps);
            }};
}

TokenBatch random_tokens(std::size_t b, std::size_t k, std::size_t t, std::size_t c, Rng& rng) {
    TokenBatch tok(b, k, t, c);
    for (auto& code : tok.codes) {
        code = static_cast<std::uint16_t>(rng.below(c));
    }
    return tok;
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

std::vector<GradCheckCase> build_cases() {
    std::vector<GradCheckCase> cases;

    // Elementwise and structural kernels.
    cases.push_back(binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {2, 3, 4}, {3, 4}));
    cases.push_back(binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, {2, 3, 4}, {4}));
    cases.push_back(binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {2, 3, 4}, {3, 4}));
    cases.push_back(unary("scale", rand, [](const Tensor& x) { return scale(x, -1.7); }));
    cases.push_back(binary("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, {2, 3, 4}, {4, 5}));
    cases.push_back(
        binary("matmul_batched", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, {2, 3, 4}, {2, 4, 2}));
    cases.push_back({"embedding", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const std::vector<std::size_t> idx = {3, 0, 3, 1, 4, 2};
                         return grad_check(
                             [&](const Tensor& w) { return readout(embedding(w, idx, {2, 3}), seed); },
                             rand({5, 4}, rng), kEps);
                     }});
    cases.push_back(unary("reshape", rand, [](const Tensor& x) { return reshape(x, {5, 3}); }));
    cases.push_back({"permute", [](std::uint64_t seed) {
                         Rng rng(seed);
                         return grad_check([&](const Tensor& x) { return readout(permute(x, {2, 0, 1}), seed); },
                                           rand({2, 3, 4}, rng), kEps);
                     }});
    cases.push_back(unary("transpose", rand, [](const Tensor& x) { return transpose(x, 0, 1); }));
    cases.push_back(binary("concat", [](const Tensor& a, const Tensor& b) { return concat({a, b, a}, 1); }, {2, 3, 2},
                           {2, 1, 2}));
    cases.push_back(unary("slice", rand, [](const Tensor& x) { return slice(x, 1, 1, 4); }));
    cases.push_back(unary("relu", away_from_zero, [](const Tensor& x) { return relu(x); }));
    cases.push_back(unary("leaky_relu", away_from_zero, [](const Tensor& x) { return leaky_relu(x, 0.2); }));
    cases.push_back(unary("gelu", rand, [](const Tensor& x) { return gelu(x); }));
    cases.push_back(unary("tanh", rand, [](const Tensor& x) { return tanh(x); }));
    cases.push_back(unary("sigmoid", rand, [](const Tensor& x) { return sigmoid(x); }));
    cases.push_back(unary("elu", away_from_zero, [](const Tensor& x) { return elu(x); }));
    cases.push_back(unary("abs", away_from_zero, [](const Tensor& x) { return abs(x); }));
    cases.push_back(unary("square", rand, [](const Tensor& x) { return square(x); }));
    cases.push_back(unary("sqrt", positive, [](const Tensor& x) { return sqrt(x); }));
    cases.push_back(unary("exp", rand, [](const Tensor& x) { return exp(x); }));
    cases.push_back(unary("log", positive, [](const Tensor& x) { return log(x); }));
    cases.push_back({"layer_norm", [](std::uint64_t seed) {
                         Rng rng(seed);
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 return readout(layer_norm(in[0], in[1], in[2]), seed);
                             },
                             {rand({2, 3, 6}, rng), rand({6}, rng), rand({6}, rng)}, kEps);
                     }});
    cases.push_back(unary("softmax", rand, [](const Tensor& x) { return softmax(x, 1); }));
    cases.push_back(unary("log_softmax", rand, [](const Tensor& x) { return log_softmax(x, 0); }));
    cases.push_back(unary("sum_axis", rand, [](const Tensor& x) { return sum(x, 1); }));
    cases.push_back(unary("mean_axis", rand, [](const Tensor& x) { return mean(x, 0, true); }));
    cases.push_back(binary("mse", [](const Tensor& a, const Tensor& b) { return mse(a, b); }, {3, 4}, {3, 4}));
    cases.push_back({"l1", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const Tensor b = rand({3, 4}, rng);
                         const Tensor a = add(b, away_from_zero({3, 4}, rng));
                         return grad_check([&](const Tensor& v) { return l1(v, b); }, a, kEps);
                     }});
    cases.push_back({"conv1d", [](std::uint64_t seed) {
                         Rng rng(seed);
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 return readout(conv1d(in[0], in[1], in[2], 2, 1), seed);
                             },
                             {rand({2, 3, 8}, rng), rand({4, 3, 3}, rng), rand({4}, rng)}, kEps);
                     }});
    cases.push_back({"conv_transpose1d", [](std::uint64_t seed) {
                         Rng rng(seed);
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 return readout(conv_transpose1d(in[0], in[1], in[2], 2, 1, 1), seed);
                             },
                             {rand({2, 3, 5}, rng), rand({3, 2, 4}, rng), rand({2}, rng)}, kEps);
                     }});
    cases.push_back({"avg_pool1d", [](std::uint64_t seed) {
                         Rng rng(seed);
                         return grad_check([&](const Tensor& x) { return readout(avg_pool1d(x, 2), seed); },
                                           rand({2, 3, 8}, rng), kEps);
                     }});
    cases.push_back({"causal_self_attention", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const MultiHeadAttention attn(8, 8, 2, rng);
                         return grad_check([&](const Tensor& x) { return readout(attn(x, x, true), seed); },
                                           rand({2, 5, 8}, rng), kEps);
                     }});
    cases.push_back({"cross_attention", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const MultiHeadAttention attn(8, 6, 2, rng);
                         return grad_check(
                             [&](const std::vector<Tensor>& in) { return readout(attn(in[0], in[1], false), seed); },
                             {rand({2, 4, 8}, rng), rand({2, 3, 6}, rng)}, kEps);
                     }});

    // Distillation losses.
    cases.push_back({"student_ce", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const TokenBatch y = random_tokens(2, 3, 4, 5, rng);
                         return grad_check([&](const Tensor& l) { return student_loss(l, y); }, rand({2, 3, 4, 5}, rng),
                                           kEps);
                     }});
    cases.push_back({"teacher_kl", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const Tensor teacher = scale(rand({2, 3, 4, 5}, rng), 3.0);
                         return grad_check([&](const Tensor& l) { return teacher_loss(l, teacher); },
                                           rand({2, 3, 4, 5}, rng), kEps);
                     }});
    cases.push_back({"intermediate_mse", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const HiddenTrace teacher = {rand({2, 3, 6}, rng), rand({2, 3, 6}, rng), rand({2, 3, 6}, rng),
                                                      rand({2, 3, 6}, rng)};
                         const LayerMapping m = equidistant_map(2, 4);
                         const Linear proj(4, 6, rng, true);
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 Linear p;
                                 p.weight = in[2];
                                 p.bias = in[3];
                                 return intermediate_mse({in[0], in[1]}, teacher, m, &p);
                             },
                             {rand({2, 3, 4}, rng), rand({2, 3, 4}, rng), proj.weight, proj.bias}, kEps);
                     }});
    cases.push_back({"combined_kd", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const TokenBatch y = random_tokens(2, 2, 3, 4, rng);
                         const Tensor teacher_logits = rand({2, 2, 3, 4}, rng);
                         const HiddenTrace teacher = {rand({2, 3, 5}, rng)};
                         const SimplexWeights w = sample_s2(rng);
                         LossScales scales;
                         scales.student = 0.7;
                         scales.teacher = 1.3;
                         scales.mse = 0.4;
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 return combine_losses(student_loss(in[0], y), teacher_loss(in[0], teacher_logits),
                                                       intermediate_mse({in[1]}, teacher, equidistant_map(1, 1)),
                                                       scales, w);
                             },
                             {rand({2, 2, 3, 4}, rng), rand({2, 3, 5}, rng)}, kEps);
                     }});

    // Codec losses.
    cases.push_back({"time_l1", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const Tensor x = rand({1, 1, 32}, rng);
                         const Tensor s = add(x, scale(away_from_zero({1, 1, 32}, rng), 0.5));
                         return grad_check([&](const Tensor& v) { return time_l1(x, v); }, s, kEps);
                     }});
    cases.push_back({"mel_multi_scale", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const MultiScaleMel mel(small_mel());
                         const Tensor x = rand({1, 1, 32}, rng);
                         const Tensor s = rand({1, 1, 32}, rng);
                         return grad_check([&](const Tensor& v) { return mel.loss(x, v); }, s, kEps);
                     }});
    cases.push_back({"gen_adversarial", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const MultiScaleDiscriminator disc(small_disc(), rng);
                         const Tensor x = rand({1, 1, 32}, rng);
                         return grad_check([&](const Tensor& v) { return gen_adv(x, v, disc); }, rand({1, 1, 32}, rng),
                                           kEps);
                     }});
    cases.push_back({"feature_matching", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const MultiScaleDiscriminator disc(small_disc(), rng);
                         const Tensor x = rand({1, 1, 32}, rng);
                         const Tensor s = rand({1, 1, 32}, rng);
                         // The denominators are constants of the gradient; the
                         // numeric side holds them at the base point.
                         const FeatureScales at_x = feature_scales(disc(x).features);
                         const auto fx = disc(x).features;
                         return grad_check(
                             [&](const Tensor& v) { return feat_match_from_features(disc(v).features, fx, &at_x); }, s,
                             kEps);
                     }});
    cases.push_back({"commitment", [](std::uint64_t seed) {
                         Rng rng(seed);
                         ResidualTrace trace;
                         trace.selected = {rand({4, 3}, rng), rand({4, 3}, rng)};
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 ResidualTrace tr = trace;
                                 tr.residuals = in;
                                 return commitment(tr);
                             },
                             {rand({4, 3}, rng), rand({4, 3}, rng)}, kEps);
                     }});
    cases.push_back({"codec_total", [](std::uint64_t seed) {
                         Rng rng(seed);
                         const MultiScaleDiscriminator disc(small_disc(), rng);
                         const MultiScaleMel mel(small_mel());
                         const Tensor x = rand({1, 1, 32}, rng);
                         const Tensor t = rand({1, 1, 32}, rng);
                         const Tensor s = rand({1, 1, 32}, rng);
                         CodecLossOptions opts;
                         opts.frozen_real_scales = feature_scales(disc(s).features);
                         Lambdas lambdas;
                         lambdas.weight_factor = 0.75;
                         // The teacher-pair feature term also normalizes by a
                         // detached scale taken from t, which is fixed here.
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 return codec_total(x, in[0], t, sum(square(in[1])), disc, mel, lambdas, opts);
                             },
                             {s, rand({3}, rng)}, kEps);
                     }});
    cases.push_back({"disc_hinge", [](std::uint64_t seed) {
                         Rng rng(seed);
                         // Scores in (-0.9, 0.9) keep every hinge active.
                         auto score = [&] { return scale(rand({1, 1, 6}, rng), 0.9); };
                         return grad_check(
                             [&](const std::vector<Tensor>& in) {
                                 return disc_loss_from_scores({in[0], in[1]}, {in[2], in[3]}, {in[4], in[5]});
                             },
                             {score(), score(), score(), score(), score(), score()}, kEps);
                     }});
    return cases;
}

}  // namespace

const std::vector<GradCheckCase>& gradcheck_cases() {
    static const std::vector<GradCheckCase> cases = build_cases();
    return cases;
}

std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds, std::uint64_t first_seed,
                                                 const std::string& filter) {
    std::vector<GradCheckResult> out;
    for (const GradCheckCase& c : gradcheck_cases()) {
        if (!filter.empty() && c.name.find(filter) == std::string::npos) {
            continue;
        }
        GradCheckResult r{c.name, 0.0};
        for (std::size_t i = 0; i < seeds; ++i) {
            r.max_error = std::max(r.max_error, c.run(first_seed + i));
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace kdforge
