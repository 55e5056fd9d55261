// SPDX-License-Identifier: Apache-2.0
//
// Set-level evaluation: Frechet distance between Gaussians fitted to
// embeddings, and the mean paired KL between classifier posteriors. A frozen
// randomly initialized conv net stands in for a pretrained audio model.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kdforge/models.hpp"

namespace kdforge {

// Row-major [rows, dim].
struct FeatureSet {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> values;

    double at(std::size_t r, std::size_t c) const { return values[r * dim + c]; }
};

struct GaussianStats {
    std::size_t dim = 0;
    std::vector<double> mean;
    std::vector<double> cov;  // [dim, dim], symmetric
};

// Sample mean and unbiased covariance, symmetrized.
GaussianStats gaussian_stats(const FeatureSet& fs);

struct SymmetricEigen {
    std::vector<double> values;
    std::vector<double> vectors;  // [n, n]; column j is the eigenvector of values[j]
};

// Cyclic Jacobi rotations. Throws NumericError on non-finite input or if the
// off-diagonal mass fails to vanish.
SymmetricEigen jacobi_eigen(std::span<const double> a, std::size_t n);

// Principal square root of a symmetric matrix, negative eigenvalues floored at 0.
std::vector<double> psd_sqrt(std::span<const double> a, std::size_t n);

// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2). Retries once with
// 1e-6 I added to both covariances if the decomposition fails.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// mean_i sum_c ref[i,c] log(ref[i,c] / gen[i,c]), probabilities floored at 1e-12.
double pairwise_kl(const FeatureSet& gen, const FeatureSet& ref);

struct ExtractorConfig {
    std::size_t embed_dim = 16;
    std::size_t classes = 8;
    std::size_t channels = 8;
    std::size_t layers = 3;
    std::size_t kernel = 9;
    std::uint64_t seed = 20240917;
};

struct ExtractedFeatures {
    FeatureSet embeddings;  // [clips, embed_dim]
    FeatureSet posteriors;  // [clips, classes]
};

class ToyFeatureExtractor {
public:
    explicit ToyFeatureExtractor(const ExtractorConfig& cfg = {});

    // Clips are mono sample vectors. Work is spread over `threads` workers;
    // the output does not depend on the thread count.
    ExtractedFeatures extract(const std::vector<std::vector<double>>& clips, std::size_t threads = 1) const;
    std::size_t receptive_field() const;
    const ExtractorConfig& config() const { return cfg_; }

private:
    ExtractorConfig cfg_;
    std::vector<Conv1d> convs_;
    Linear embed_;
    Linear classify_;
};

}  // namespace kdforge
