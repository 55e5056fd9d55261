// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "kdforge/errors.hpp"
#include "kdforge/metrics.hpp"

using namespace kdforge;

namespace {

GaussianStats diagonal(std::vector<double> mean, std::vector<double> var) {
    const std::size_t d = mean.size();
    GaussianStats g{d, std::move(mean), std::vector<double>(d * d, 0.0)};
    for (std::size_t i = 0; i < d; ++i) {
        g.cov[i * d + i] = var[i];
    }
    return g;
}

// Random symmetric positive semi-definite matrix A A^T / n.
std::vector<double> random_psd(Rng& rng, std::size_t n, std::size_t rank) {
    std::vector<double> a(n * rank);
    for (double& v : a) {
        v = rng.normal();
    }
    std::vector<double> out(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t k = 0; k < rank; ++k) {
                out[i * n + j] += a[i * rank + k] * a[j * rank + k] / static_cast<double>(rank);
            }
        }
    }
    return out;
}

std::vector<double> sine_clip(double hz, std::size_t n, double phase) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = 0.8 * std::sin(2 * std::numbers::pi * hz * static_cast<double>(i) / 8000.0 + phase);
    }
    return v;
}

}  // namespace

TEST_CASE("gaussian statistics") {
    const GaussianStats g = gaussian_stats({2, 2, {0, 0, 2, 0}});
    CHECK(g.mean == std::vector<double>{1, 0});
    CHECK(g.cov == std::vector<double>{2, 0, 0, 0});

    const GaussianStats same = gaussian_stats({3, 2, {1, 2, 1, 2, 1, 2}});
    for (double v : same.cov) {
        CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(gaussian_stats({1, 2, {1, 2}}), ValidationError);

    Rng rng(1);
    FeatureSet normal{10000, 3, {}};
    for (std::size_t i = 0; i < 30000; ++i) {
        normal.values.push_back(rng.normal());
    }
    const GaussianStats s = gaussian_stats(normal);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(s.mean[i]) < 0.05);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(std::abs(s.cov[i * 3 + j] - (i == j ? 1.0 : 0.0)) < 0.1);
            CHECK(s.cov[i * 3 + j] == s.cov[j * 3 + i]);
        }
    }
}

TEST_CASE("Jacobi eigendecomposition reconstructs the matrix") {
    Rng rng(2);
    for (std::size_t n : {1u, 2u, 5u, 16u, 40u}) {
        const std::vector<double> a = random_psd(rng, n, n);
        const SymmetricEigen e = jacobi_eigen(a, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double r = 0.0;
                double orth = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    r += e.vectors[i * n + k] * e.values[k] * e.vectors[j * n + k];
                    orth += e.vectors[k * n + i] * e.vectors[k * n + j];
                }
                CHECK(r == doctest::Approx(a[i * n + j]).epsilon(1e-10).scale(1.0));
                CHECK(orth == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-10).scale(1.0));
            }
        }
        const std::vector<double> root = psd_sqrt(a, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double sq = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    sq += root[i * n + k] * root[k * n + j];
                }
                CHECK(sq == doctest::Approx(a[i * n + j]).epsilon(1e-9).scale(1.0));
            }
        }
    }
    CHECK_THROWS_AS(jacobi_eigen(std::vector<double>{1, NAN, NAN, 1}, 2), NumericError);
}

TEST_CASE("frechet distance closed forms") {
    CHECK(frechet_distance(diagonal({0, 0}, {1, 1}), diagonal({1, 0}, {4, 4})) ==
          doctest::Approx(3.0).epsilon(1e-12));
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 1 + rng.below(8);
        std::vector<double> m1(d), m2(d), v1(d), v2(d);
        double expect = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            m1[i] = rng.normal();
            m2[i] = rng.normal();
            v1[i] = rng.uniform(0.01, 4.0);
            v2[i] = rng.uniform(0.01, 4.0);
            expect += std::pow(m1[i] - m2[i], 2) + std::pow(std::sqrt(v1[i]) - std::sqrt(v2[i]), 2);
        }
        const GaussianStats a = diagonal(m1, v1);
        const GaussianStats b = diagonal(m2, v2);
        CHECK(std::abs(frechet_distance(a, b) - expect) < 1e-6);
        CHECK(frechet_distance(a, a) < 1e-8);
    }
}

TEST_CASE("frechet distance is symmetric, nonnegative and grows with the mean gap") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 6;
        GaussianStats a{d, std::vector<double>(d, 0.0), random_psd(rng, d, 3)};  // rank deficient
        GaussianStats b{d, std::vector<double>(d, 0.0), random_psd(rng, d, 8)};
        for (std::size_t i = 0; i < d; ++i) {
            b.mean[i] = rng.normal();
        }
        const double ab = frechet_distance(a, b);
        CHECK(ab >= 0.0);
        CHECK(std::abs(ab - frechet_distance(b, a)) < 1e-6);
        CHECK(frechet_distance(b, b) < 1e-8);
        double prev = -1.0;
        for (double shift : {0.0, 0.5, 1.0, 2.0}) {
            GaussianStats c = a;
            c.mean[0] += shift;
            const double v = frechet_distance(a, c);
            CHECK(v > prev);
            prev = v;
        }
    }
    CHECK_THROWS_AS(frechet_distance(diagonal({0}, {1}), diagonal({0, 0}, {1, 1})), ShapeError);
    CHECK_THROWS_AS(frechet_distance(diagonal({0}, {NAN}), diagonal({0}, {1})), NumericError);
}

TEST_CASE("pairwise kl") {
    const FeatureSet ref{1, 2, {1.0, 0.0}};
    const FeatureSet half{1, 2, {0.5, 0.5}};
    CHECK(pairwise_kl(ref, ref) == 0.0);
    CHECK(std::abs(pairwise_kl(half, ref) - std::numbers::ln2) < 1e-9);
    const FeatureSet both_ref{2, 2, {1.0, 0.0, 1.0, 0.0}};
    const FeatureSet both_gen{2, 2, {1.0, 0.0, 0.5, 0.5}};
    CHECK(std::abs(pairwise_kl(both_gen, both_ref) - std::numbers::ln2 / 2) < 1e-9);
    CHECK_THROWS_AS(pairwise_kl(FeatureSet{1, 2, {0.5, 0.6}}, ref), ValidationError);

    // Appending identical pairs scales the mean but keeps it nonnegative.
    Rng rng(5);
    FeatureSet g{0, 4, {}};
    FeatureSet r{0, 4, {}};
    for (int i = 0; i < 50; ++i) {
        double sg = 0.0;
        double sr = 0.0;
        std::vector<double> pg(4), pr(4);
        for (int c = 0; c < 4; ++c) {
            pg[c] = rng.uniform(0.01, 1);
            pr[c] = rng.uniform(0.01, 1);
            sg += pg[c];
            sr += pr[c];
        }
        for (int c = 0; c < 4; ++c) {
            g.values.push_back(pg[c] / sg);
            r.values.push_back(pr[c] / sr);
        }
        ++g.rows;
        ++r.rows;
    }
    const double base = pairwise_kl(g, r);
    CHECK(base >= 0.0);
    FeatureSet g2 = g;
    FeatureSet r2 = r;
    for (std::size_t i = 0; i < g.rows; ++i) {
        for (int c = 0; c < 4; ++c) {
            g2.values.push_back(r.values[i * 4 + c]);
            r2.values.push_back(r.values[i * 4 + c]);
        }
    }
    g2.rows = r2.rows = 2 * g.rows;
    CHECK(pairwise_kl(g2, r2) == doctest::Approx(base / 2).epsilon(1e-12));
}

TEST_CASE("toy extractor is deterministic and separates noise from tones") {
    ExtractorConfig cfg;
    cfg.embed_dim = 6;
    cfg.classes = 5;
    const ToyFeatureExtractor ex(cfg);
    Rng rng(6);
    std::vector<std::vector<double>> tones;
    std::vector<std::vector<double>> noise;
    for (int i = 0; i < 80; ++i) {
        tones.push_back(sine_clip(rng.uniform(200, 1200), 1024, rng.uniform(0, 6.28)));
        std::vector<double> n(1024);
        for (double& v : n) {
            v = 0.3 * rng.normal();
        }
        noise.push_back(std::move(n));
    }
    const ExtractedFeatures ft = ex.extract(tones);
    CHECK(ft.embeddings.dim == 6);
    CHECK(ft.posteriors.dim == 5);
    const ExtractedFeatures again = ex.extract(tones, 3);
    CHECK(again.embeddings.values == ft.embeddings.values);
    CHECK(again.posteriors.values == ft.posteriors.values);

    const ExtractedFeatures fn = ex.extract(noise);
    auto half = [](const FeatureSet& fs, std::size_t part) {
        FeatureSet h{fs.rows / 2, fs.dim, {}};
        const std::size_t off = part * h.rows * fs.dim;
        h.values.assign(fs.values.begin() + static_cast<std::ptrdiff_t>(off),
                        fs.values.begin() + static_cast<std::ptrdiff_t>(off + h.rows * fs.dim));
        return h;
    };
    const double baseline =
        frechet_distance(gaussian_stats(half(ft.embeddings, 0)), gaussian_stats(half(ft.embeddings, 1)));
    const double apart = frechet_distance(gaussian_stats(ft.embeddings), gaussian_stats(fn.embeddings));
    CHECK(apart > 10.0 * baseline);
    CHECK_THROWS_AS(ex.extract({std::vector<double>(ex.receptive_field() - 1, 0.0)}), RangeError);
}
