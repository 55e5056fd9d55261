// SPDX-License-Identifier: Apache-2.0
//
// Differentiable kernels. Each has an analytic backward; see gradcheck.hpp
// for the finite-difference harness that exercises all of them.
//
// Binary elementwise kernels broadcast along leading axes only: the shape of
// the smaller operand must be a suffix of the larger one's shape.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kdforge/tensor.hpp"

namespace kdforge {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// [..., M, K] x [K, N] (shared right operand) or [..., M, K] x [..., K, N]
// with identical leading axes.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row gather from `weight` [V, D]; result shape is index_shape + [D].
Tensor embedding(const Tensor& weight, std::span<const std::size_t> indices, const Shape& index_shape);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& dims);
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double negative_slope = 0.2);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor elu(const Tensor& a, double alpha = 1.0);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// max(a, lo); the gradient is passed only where a > lo.
Tensor clamp_min(const Tensor& a, double lo);

// Normalizes over the last axis; gamma and beta have the last axis' extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);

// Mean-reduced squared and absolute differences.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor l1(const Tensor& a, const Tensor& b);

// x [B, Cin, N], weight [Cout, Cin, W], bias [Cout] or undefined.
// Output length floor((N + 2*padding - W) / stride) + 1.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
              std::size_t padding = 0);
// x [B, Cin, N], weight [Cin, Cout, W]. Output length
// (N - 1) * stride - 2 * padding + W + output_padding.
Tensor conv_transpose1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                        std::size_t padding = 0, std::size_t output_padding = 0);
// Non-overlapping average pooling over the last axis of [B, C, N].
Tensor avg_pool1d(const Tensor& x, std::size_t factor);

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t padding);

// Constant one-hot encoding, shape index_shape + [classes].
Tensor one_hot(std::span<const std::size_t> indices, const Shape& index_shape, std::size_t classes);

}  // namespace kdforge
