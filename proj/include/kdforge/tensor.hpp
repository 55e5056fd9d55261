// SPDX-License-Identifier: Apache-2.0
//
// Dense tensor value type with tape-free reverse-mode differentiation.
//
// Every kernel that produces a Tensor from inputs that require gradients
// attaches a Node holding the inputs and an analytic backward closure.
// backward() walks the resulting DAG in reverse topological order exactly
// once and then releases it, so a second backward over the same graph is
// reported as an error instead of silently double counting.
//
// Values are stored in double precision. Model parameters are additionally
// kept representable in binary32 (see snap_to_f32), which is the precision
// of the checkpoint format.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kdforge {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    // Extent along `axis`; negative axes count from the end.
    std::size_t size(int axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // In-place access for parameter initialization and optimizer updates.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag = true);
    bool is_leaf() const;
    bool has_grad() const;
    // Gradient buffer; all zeros if nothing has been accumulated yet.
    std::vector<double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // Same values, no history, does not require grad.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    // Identity of the underlying storage (two handles to one tensor compare equal).
    const void* id() const { return impl_.get(); }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    // Reads the output value and gradient, accumulates into input gradients.
    std::function<void(const TensorImpl& out)> backward;
    bool consumed = false;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
        return grad;
    }
};

// Builds the result of a kernel. When gradient recording is enabled and any
// input requires grad, the result records `backward`; otherwise it is a
// constant and `backward` is dropped.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward);

// Gradient buffer of `t` if it participates in differentiation, else empty.
std::span<double> grad_sink(const Tensor& t);

}  // namespace detail

// Thread-local switch for graph recording.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// `loss`. Throws GraphError for a non-scalar loss, a loss with no
// differentiable inputs, or a graph that was already consumed.
void backward(const Tensor& loss);

// Rounds every element to the nearest binary32 value.
void snap_to_f32(Tensor& t);

}  // namespace kdforge
