// SPDX-License-Identifier: Apache-2.0
//
// Parameterized layers shared by every model. Layers own their parameter
// tensors; copying a layer copies handles, so use clone_parameters() for an
// independent copy.
#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "kdforge/rng.hpp"
#include "kdforge/tensor.hpp"

namespace kdforge {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::size_t count_parameters(const NamedTensors& params);
void set_requires_grad(const NamedTensors& params, bool flag);
void zero_grad(const NamedTensors& params);
// Deep-copies values of `source` into same-named tensors of `target`.
// Missing names or differing shapes raise ShapeError when `strict`.
void copy_parameters(const NamedTensors& target, const NamedTensors& source, bool strict = true);
// FNV-1a over names, shapes and binary32 values; hex string.
std::string parameter_hash(const NamedTensors& params);

// Trainable leaf initialized from N(0, stddev^2) and snapped to binary32.
Tensor make_parameter(Shape shape, Rng& rng, double stddev);
Tensor make_parameter(Shape shape, double fill);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out], may be undefined

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true, double gain = 1.0);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    Linear clone() const;
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    LayerNorm clone() const;
};

// Additive mask: 0 where key position <= query position, -1e9 elsewhere.
Tensor causal_mask(std::size_t queries, std::size_t keys);

struct MultiHeadAttention {
    Linear query;
    Linear key;
    Linear value;
    Linear out;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t kv_dim, std::size_t heads, Rng& rng, double out_gain = 1.0);
    // x [B, T, dim], kv [B, S, kv_dim] -> [B, T, dim].
    Tensor operator()(const Tensor& x, const Tensor& kv, bool causal) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    MultiHeadAttention clone() const;
};

struct FeedForward {
    Linear up;
    Linear down;

    FeedForward() = default;
    FeedForward(std::size_t dim, std::size_t hidden, Rng& rng, double out_gain = 1.0);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    FeedForward clone() const;
};

struct Conv1d {
    Tensor weight;  // [out, in, kernel]
    Tensor bias;    // [out]
    std::size_t stride = 1;
    std::size_t padding = 0;

    Conv1d() = default;
    Conv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    Conv1d clone() const;
};

struct ConvTranspose1d {
    Tensor weight;  // [in, out, kernel]
    Tensor bias;    // [out]
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t output_padding = 0;

    ConvTranspose1d() = default;
    ConvTranspose1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                    std::size_t output_padding, Rng& rng);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, NamedTensors& out) const;
    ConvTranspose1d clone() const;
};

}  // namespace kdforge
