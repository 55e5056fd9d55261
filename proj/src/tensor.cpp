// SPDX-License-Identifier: Apache-2.0
#include "kdforge/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "kdforge/errors.hpp"
#include "kdforge/rng.hpp"

namespace kdforge {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) {
    return Tensor(Shape{}, std::vector<double>{value});
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.impl_->data) {
        v = rng.normal() * stddev;
    }
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.impl_->data) {
        v = rng.uniform(lo, hi);
    }
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) {
        throw GraphError("use of an undefined tensor");
    }
    return impl_->shape;
}

std::size_t Tensor::size(int axis) const {
    const auto r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw AxisError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const {
    return impl_ ? impl_->data.size() : 0;
}

std::span<const double> Tensor::data() const {
    shape();
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    shape();
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() needs a single-element tensor, got shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const {
    return impl_ && impl_->requires_grad;
}

Tensor& Tensor::set_requires_grad(bool flag) {
    shape();
    if (impl_->node) {
        throw GraphError("requires_grad can only be set on leaf tensors");
    }
    impl_->requires_grad = flag;
    return *this;
}

bool Tensor::is_leaf() const {
    return impl_ && !impl_->node;
}

bool Tensor::has_grad() const {
    return impl_ && !impl_->grad.empty();
}

std::vector<double> Tensor::grad() const {
    shape();
    if (impl_->grad.empty()) {
        return std::vector<double>(impl_->data.size(), 0.0);
    }
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    shape();
    return impl_->grad_buffer();
}

void Tensor::zero_grad() {
    if (impl_) {
        impl_->grad.clear();
    }
}

Tensor Tensor::detach() const {
    return Tensor(shape(), impl_->data);
}

namespace detail {

namespace {
Tensor finish(Shape shape, std::vector<double> data, bool needs_grad, std::vector<std::shared_ptr<TensorImpl>> ins,
              std::function<void(const TensorImpl&)> backward) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (needs_grad) {
        impl->requires_grad = true;
        impl->node = std::make_shared<Node>();
        impl->node->inputs = std::move(ins);
        impl->node->backward = std::move(backward);
    }
    return Tensor(std::move(impl));
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward) {
    return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("kernel produced " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    }
    bool needs = false;
    std::vector<std::shared_ptr<TensorImpl>> ins;
    if (g_grad_enabled) {
        for (const Tensor& t : inputs) {
            if (t.requires_grad()) {
                needs = true;
            }
        }
        if (needs) {
            ins.reserve(inputs.size());
            for (const Tensor& t : inputs) {
                if (t.requires_grad()) {
                    ins.push_back(t.impl());
                }
            }
        }
    }
    return finish(std::move(shape), std::move(data), needs, std::move(ins), needs ? std::move(backward) : nullptr);
}

std::span<double> grad_sink(const Tensor& t) {
    if (!t.requires_grad()) {
        return {};
    }
    return t.impl()->grad_buffer();
}

}  // namespace detail

bool grad_enabled() {
    return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = previous_;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw GraphError("backward() needs a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    auto root = loss.impl();
    if (!root->requires_grad) {
        throw GraphError("backward() on a detached graph: the loss depends on no tensor that requires grad");
    }
    if (!root->node) {
        root->grad_buffer()[0] += 1.0;
        return;
    }
    if (root->node->consumed) {
        throw GraphError("backward() called twice on the same graph; rebuild the forward pass first");
    }

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<const detail::TensorImpl*> visited;
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        if (impl->node && next < impl->node->inputs.size()) {
            detail::TensorImpl* child = impl->node->inputs[next++].get();
            if (child->node && visited.insert(child).second) {
                if (child->node->consumed) {
                    throw GraphError("backward() reached a graph already consumed by a previous backward()");
                }
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }

    root->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* impl = *it;
        if (!impl->grad.empty()) {
            impl->node->backward(*impl);
        }
    }
    for (detail::TensorImpl* impl : order) {
        impl->node->consumed = true;
        impl->node->backward = nullptr;
        impl->node->inputs.clear();
        impl->grad.clear();
        impl->grad.shrink_to_fit();
    }
}

void snap_to_f32(Tensor& t) {
    for (double& v : t.mutable_data()) {
        v = static_cast<double>(static_cast<float>(v));
    }
}

}  // namespace kdforge
