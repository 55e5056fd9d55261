// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kdforge/errors.hpp"
#include "kdforge/sampling.hpp"

using namespace kdforge;

namespace {

struct Marginals {
    double mean[3] = {0, 0, 0};
    double var[3] = {0, 0, 0};
    double above_half[3] = {0, 0, 0};
};

Marginals collect(SamplingStrategy s, std::uint64_t seed, int draws) {
    Rng rng(seed);
    Marginals m;
    double sq[3] = {0, 0, 0};
    for (int i = 0; i < draws; ++i) {
        const SimplexWeights w = sample_weights(s, rng);
        for (int k = 0; k < 3; ++k) {
            m.mean[k] += w[k];
            sq[k] += w[k] * w[k];
            m.above_half[k] += w[k] > 0.5 ? 1.0 : 0.0;
        }
    }
    for (int k = 0; k < 3; ++k) {
        m.mean[k] /= draws;
        m.var[k] = sq[k] / draws - m.mean[k] * m.mean[k];
        m.above_half[k] /= draws;
    }
    return m;
}

}  // namespace

TEST_CASE("single draws lie on the simplex") {
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        const SimplexWeights a = sample_s1(rng);
        const SimplexWeights b = sample_s2(rng);
        CHECK(std::fabs(a.total() - 1.0) < 1e-12);
        CHECK(std::fabs(b.total() - 1.0) < 1e-12);
        for (double v : b.a) {
            CHECK(v >= 1.0 / static_cast<double>(kSimplexGrid));
        }
    }
}

TEST_CASE("one million draws per strategy stay on the simplex") {
    for (auto s : {SamplingStrategy::s1, SamplingStrategy::s2}) {
        Rng rng(2024);
        bool ok = true;
        for (int i = 0; i < 1'000'000 && ok; ++i) {
            const SimplexWeights w = sample_weights(s, rng);
            ok = std::fabs(w.total() - 1.0) <= 1e-12 && w[0] >= 0.0 && w[1] >= 0.0 && w[2] >= 0.0 &&
                 w[0] <= 1.0 && w[1] <= 1.0 && w[2] <= 1.0;
        }
        CHECK(ok);
    }
}

TEST_CASE("s1 marginals: mean 1/3 and P(a1 > 1/2) = 1/6") {
    // a1 > 1/2 iff u1 > u2 + u3, whose volume in the unit cube is
    // integral_0^1 u^2 / 2 du = 1/6.
    const Marginals m = collect(SamplingStrategy::s1, 11, 100'000);
    CHECK(std::fabs(m.mean[0] - 1.0 / 3.0) < 0.005);
    CHECK(std::fabs(m.above_half[0] - 1.0 / 6.0) < 0.01);
}

TEST_CASE("s2 marginals match the uniform simplex") {
    Rng rng(12);
    const int draws = 100'000;
    double tail[3] = {0, 0, 0};
    const double t[3] = {0.25, 0.5, 0.75};
    double mean = 0.0;
    double sq = 0.0;
    for (int i = 0; i < draws; ++i) {
        const SimplexWeights w = sample_s2(rng);
        for (int j = 0; j < 3; ++j) {
            tail[j] += w[0] > t[j] ? 1.0 : 0.0;
        }
        mean += w[0];
        sq += w[0] * w[0];
    }
    for (int j = 0; j < 3; ++j) {
        CHECK(std::fabs(tail[j] / draws - (1.0 - t[j]) * (1.0 - t[j])) < 0.01);
    }
    mean /= draws;
    const double var = sq / draws - mean * mean;
    CHECK(std::fabs(var - 1.0 / 18.0) < 0.003);
}

TEST_CASE("the two strategies are statistically distinct") {
    const int draws = 100'000;
    const double p1 = collect(SamplingStrategy::s1, 21, draws).above_half[0];
    const double p2 = collect(SamplingStrategy::s2, 22, draws).above_half[0];
    const double se = std::sqrt(p1 * (1 - p1) / draws + p2 * (1 - p2) / draws);
    CHECK(std::fabs(p2 - p1) > 5.0 * se);
}

TEST_CASE("exchangeable coordinates") {
    for (auto s : {SamplingStrategy::s1, SamplingStrategy::s2}) {
        const Marginals m = collect(s, 31, 100'000);
        for (int k = 1; k < 3; ++k) {
            CHECK(std::fabs(m.mean[k] - m.mean[0]) < 0.006);
            CHECK(std::fabs(m.above_half[k] - m.above_half[0]) < 0.01);
            CHECK(std::fabs(m.var[k] - m.var[0]) < 0.003);
        }
    }
}

TEST_CASE("n = 2 closed forms") {
    // s2 with n = 2 puts a1 uniform on (0, 1); s1 gives a1 = u1 / (u1 + u2)
    // with P(a1 < 1/4) = P(3 u1 < u2) = 1/6.
    Rng rng(41);
    const int draws = 100'000;
    double s1_low = 0.0;
    double s2_low = 0.0;
    double s2_mean = 0.0;
    for (int i = 0; i < draws; ++i) {
        const SimplexWeights a = sample_s1(rng, 2);
        const SimplexWeights b = sample_s2(rng, 2);
        s1_low += a[0] < 0.25 ? 1.0 : 0.0;
        s2_low += b[0] < 0.25 ? 1.0 : 0.0;
        s2_mean += b[0];
    }
    CHECK(std::fabs(s1_low / draws - 1.0 / 6.0) < 0.01);
    CHECK(std::fabs(s2_low / draws - 0.25) < 0.01);
    CHECK(std::fabs(s2_mean / draws - 0.5) < 0.005);
}

TEST_CASE("seeded streams are reproducible") {
    Rng a(99);
    Rng b(99);
    Rng c(99, 1);
    const SimplexWeights wa = sample_s2(a);
    const SimplexWeights wb = sample_s2(b);
    const SimplexWeights wc = sample_s2(c);
    CHECK(wa.a == wb.a);
    CHECK(wa.a != wc.a);
}

TEST_CASE("restriction to active coordinates") {
    const SimplexWeights w{{0.5, 0.25, 0.25}};
    const SimplexWeights r = restrict_to_active(w, {true, false, true});
    CHECK(r[0] == doctest::Approx(2.0 / 3.0));
    CHECK(r[1] == 0.0);
    CHECK(r[2] == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(restrict_to_active(w, {false, false, false}), ValidationError);
}

TEST_CASE("strategy names") {
    CHECK(parse_sampling("s2") == SamplingStrategy::s2);
    CHECK(to_string(SamplingStrategy::s1) == "s1");
    CHECK_THROWS_AS(parse_sampling("s3"), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(sample_weights(SamplingStrategy::none, rng), ConfigError);
}
