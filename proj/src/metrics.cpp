// SPDX-License-Identifier: Apache-2.0
#include "kdforge/metrics.hpp"

#include <cmath>

#include "kdforge/errors.hpp"
#include "kdforge/ops.hpp"
#include "kdforge/threads.hpp"

namespace kdforge {

GaussianStats gaussian_stats(const FeatureSet& fs) {
    if (fs.values.size() != fs.rows * fs.dim) {
        throw ShapeError("feature set: " + std::to_string(fs.values.size()) + " values do not fill [" +
                         std::to_string(fs.rows) + ", " + std::to_string(fs.dim) + "]");
    }
    if (fs.rows < 2) {
        throw ValidationError("gaussian stats need at least 2 rows, got " + std::to_string(fs.rows));
    }
    const std::size_t d = fs.dim;
    GaussianStats g{d, std::vector<double>(d, 0.0), std::vector<double>(d * d, 0.0)};
    for (std::size_t r = 0; r < fs.rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            g.mean[c] += fs.at(r, c);
        }
    }
    for (double& m : g.mean) {
        m /= static_cast<double>(fs.rows);
    }
    std::vector<double> centred(d);
    for (std::size_t r = 0; r < fs.rows; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            centred[c] = fs.at(r, c) - g.mean[c];
        }
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                g.cov[i * d + j] += centred[i] * centred[j];
            }
        }
    }
    const double denom = static_cast<double>(fs.rows - 1);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            const double v = 0.5 * (g.cov[i * d + j] + g.cov[j * d + i]) / denom;
            g.cov[i * d + j] = v;
            g.cov[j * d + i] = v;
        }
    }
    return g;
}

SymmetricEigen jacobi_eigen(std::span<const double> in, std::size_t n) {
    if (in.size() != n * n) {
        throw ShapeError("eigen: expected " + std::to_string(n * n) + " entries, got " + std::to_string(in.size()));
    }
    std::vector<double> a(in.begin(), in.end());
    double scale_sq = 0.0;
    for (double v : a) {
        if (!std::isfinite(v)) {
            throw NumericError("eigen: non-finite matrix entry");
        }
        scale_sq += v * v;
    }
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        v[i * n + i] = 1.0;
    }
    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i != j) {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        return s;
    };
    const double target = 1e-26 * std::max(scale_sq, 1e-300);
    bool converged = false;
    for (int sweep = 0; sweep < 100; ++sweep) {
        if (off_norm() <= target) {
            converged = true;
            break;
        }
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (apq == 0.0) {
                    continue;
                }
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k * n + p];
                    const double akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p * n + k];
                    const double aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k * n + p];
                    const double vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged && off_norm() > target) {
        throw NumericError("eigen: Jacobi iteration did not converge");
    }
    SymmetricEigen out{std::vector<double>(n), std::move(v)};
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] = a[i * n + i];
        if (!std::isfinite(out.values[i])) {
            throw NumericError("eigen: non-finite eigenvalue");
        }
    }
    return out;
}

std::vector<double> psd_sqrt(std::span<const double> a, std::size_t n) {
    const SymmetricEigen e = jacobi_eigen(a, n);
    std::vector<double> root(n * n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const double s = std::sqrt(std::max(e.values[k], 0.0));
        if (s == 0.0) {
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double vi = e.vectors[i * n + k] * s;
            for (std::size_t j = 0; j < n; ++j) {
                root[i * n + j] += vi * e.vectors[j * n + k];
            }
        }
    }
    return root;
}

namespace {

std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b, std::size_t n) {
    std::vector<double> c(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            const double aik = a[i * n + k];
            for (std::size_t j = 0; j < n; ++j) {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    return c;
}

double trace_sqrt_product(const std::vector<double>& s1, const std::vector<double>& s2, std::size_t n) {
    const std::vector<double> r1 = psd_sqrt(s1, n);
    std::vector<double> m = matmul_sq(matmul_sq(r1, s2, n), r1, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    const SymmetricEigen e = jacobi_eigen(m, n);
    double tr = 0.0;
    for (double l : e.values) {
        tr += std::sqrt(std::max(l, 0.0));
    }
    return tr;
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.dim != b.dim || a.mean.size() != a.dim || b.mean.size() != b.dim || a.cov.size() != a.dim * a.dim ||
        b.cov.size() != b.dim * b.dim) {
        throw ShapeError("frechet distance: dimension " + std::to_string(a.dim) + " vs " + std::to_string(b.dim));
    }
    const std::size_t n = a.dim;
    for (double v : a.cov) {
        if (!std::isfinite(v)) {
            throw NumericError("frechet distance: non-finite covariance");
        }
    }
    for (double v : b.cov) {
        if (!std::isfinite(v)) {
            throw NumericError("frechet distance: non-finite covariance");
        }
    }
    double mean_term = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.mean[i] - b.mean[i];
        mean_term += d * d;
    }
    std::vector<double> s1 = a.cov;
    std::vector<double> s2 = b.cov;
    double tr_cross = 0.0;
    try {
        tr_cross = trace_sqrt_product(s1, s2, n);
    } catch (const NumericError&) {
        for (std::size_t i = 0; i < n; ++i) {
            s1[i * n + i] += 1e-6;
            s2[i * n + i] += 1e-6;
        }
        tr_cross = trace_sqrt_product(s1, s2, n);
    }
    double tr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        tr += s1[i * n + i] + s2[i * n + i];
    }
    return std::max(0.0, mean_term + tr - 2.0 * tr_cross);
}

double pairwise_kl(const FeatureSet& gen, const FeatureSet& ref) {
    if (gen.rows != ref.rows || gen.dim != ref.dim || gen.values.size() != gen.rows * gen.dim ||
        ref.values.size() != ref.rows * ref.dim) {
        throw ShapeError("pairwise kl: [" + std::to_string(gen.rows) + ", " + std::to_string(gen.dim) + "] vs [" +
                         std::to_string(ref.rows) + ", " + std::to_string(ref.dim) + "]");
    }
    if (gen.rows == 0) {
        throw ValidationError("pairwise kl: empty sets");
    }
    auto check_rows = [](const FeatureSet& fs, const char* which) {
        for (std::size_t r = 0; r < fs.rows; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < fs.dim; ++c) {
                if (fs.at(r, c) < 0.0) {
                    throw ValidationError(std::string("pairwise kl: negative probability in ") + which);
                }
                total += fs.at(r, c);
            }
            if (std::abs(total - 1.0) > 1e-6) {
                throw ValidationError(std::string("pairwise kl: ") + which + " row " + std::to_string(r) +
                                      " sums to " + std::to_string(total));
            }
        }
    };
    check_rows(gen, "generated");
    check_rows(ref, "reference");
    constexpr double floor = 1e-12;
    double total = 0.0;
    for (std::size_t r = 0; r < gen.rows; ++r) {
        for (std::size_t c = 0; c < gen.dim; ++c) {
            const double p = ref.at(r, c);
            if (p > 0.0) {
                total += p * (std::log(std::max(p, floor)) - std::log(std::max(gen.at(r, c), floor)));
            }
        }
    }
    return total / static_cast<double>(gen.rows);
}

ToyFeatureExtractor::ToyFeatureExtractor(const ExtractorConfig& cfg) : cfg_(cfg) {
    if (cfg.embed_dim == 0 || cfg.classes < 2 || cfg.channels == 0 || cfg.layers == 0 || cfg.kernel == 0) {
        throw ConfigError("feature extractor: dimensions must be positive and classes >= 2");
    }
    Rng rng(cfg.seed, 0x6578);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        convs_.emplace_back(l == 0 ? 1 : cfg.channels, cfg.channels, cfg.kernel, 2, 0, rng);
        // Random biases break the symmetry of relu around zero.
        for (double& b : convs_.back().bias.mutable_data()) {
            b = rng.uniform(-0.1, 0.1);
        }
    }
    embed_ = Linear(2 * cfg.channels, cfg.embed_dim, rng);
    classify_ = Linear(cfg.embed_dim, cfg.classes, rng, true, 3.0);
}

std::size_t ToyFeatureExtractor::receptive_field() const {
    std::size_t rf = 1;
    std::size_t jump = 1;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        rf += (cfg_.kernel - 1) * jump;
        jump *= 2;
    }
    return rf;
}

ExtractedFeatures ToyFeatureExtractor::extract(const std::vector<std::vector<double>>& clips,
                                               std::size_t threads) const {
    const std::size_t n = clips.size();
    for (const auto& clip : clips) {
        if (clip.size() < receptive_field()) {
            throw RangeError("feature extractor: clip of " + std::to_string(clip.size()) +
                             " samples is shorter than the receptive field of " +
                             std::to_string(receptive_field()));
        }
    }
    ExtractedFeatures out;
    out.embeddings = {n, cfg_.embed_dim, std::vector<double>(n * cfg_.embed_dim)};
    out.posteriors = {n, cfg_.classes, std::vector<double>(n * cfg_.classes)};
    parallel_for(n, threads, [&](std::size_t i) {
        NoGradGuard guard;
        Tensor h({1, 1, clips[i].size()}, clips[i]);
        for (const auto& conv : convs_) {
            h = relu(conv(h));
        }
        // Mean and RMS over time of each channel.
        const Tensor avg = mean(h, 2);
        const Tensor rms = sqrt(add_scalar(mean(square(h), 2), 1e-12));
        const Tensor pooled = concat({avg, rms}, 1);  // [1, 2C]
        const Tensor e = tanh(embed_(pooled));
        const Tensor p = softmax(classify_(e), -1);
        std::copy(e.data().begin(), e.data().end(),
                  out.embeddings.values.begin() + static_cast<std::ptrdiff_t>(i * cfg_.embed_dim));
        std::copy(p.data().begin(), p.data().end(),
                  out.posteriors.values.begin() + static_cast<std::ptrdiff_t>(i * cfg_.classes));
    });
    return out;
}

}  // namespace kdforge
