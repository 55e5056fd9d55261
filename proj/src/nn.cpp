// SPDX-License-Identifier: Apache-2.0
#include "kdforge/nn.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <map>
#include <sstream>

#include "kdforge/errors.hpp"
#include "kdforge/hash.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

std::size_t count_parameters(const NamedTensors& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) {
        n += t.numel();
    }
    return n;
}

void set_requires_grad(const NamedTensors& params, bool flag) {
    for (const auto& [name, t] : params) {
        Tensor handle = t;
        handle.set_requires_grad(flag);
    }
}

void zero_grad(const NamedTensors& params) {
    for (const auto& [name, t] : params) {
        Tensor handle = t;
        handle.zero_grad();
    }
}

void copy_parameters(const NamedTensors& target, const NamedTensors& source, bool strict) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : source) {
        by_name[name] = &t;
    }
    for (const auto& [name, t] : target) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            if (strict) {
                throw ShapeError("parameter '" + name + "' missing from source");
            }
            continue;
        }
        const Tensor& src = *it->second;
        if (src.shape() != t.shape()) {
            throw ShapeError("parameter '" + name + "': shape mismatch " + shape_str(t.shape()) + " vs " +
                             shape_str(src.shape()));
        }
        Tensor handle = t;
        auto dst = handle.mutable_data();
        std::copy(src.data().begin(), src.data().end(), dst.begin());
    }
}

std::string parameter_hash(const NamedTensors& params) {
    Fnv1a h;
    auto feed = [&h](const void* p, std::size_t n) { h.update(p, n); };
    for (const auto& [name, t] : params) {
        feed(name.data(), name.size());
        for (std::size_t e : t.shape()) {
            const auto e32 = static_cast<std::uint32_t>(e);
            feed(&e32, sizeof e32);
        }
        for (double v : t.data()) {
            const float f = static_cast<float>(v);
            feed(&f, sizeof f);
        }
    }
    return h.hex();
}

std::string Fnv1a::hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h_;
    return os.str();
}

Tensor make_parameter(Shape shape, Rng& rng, double stddev) {
    Tensor t = Tensor::randn(std::move(shape), rng, stddev);
    snap_to_f32(t);
    t.set_requires_grad(true);
    return t;
}

Tensor make_parameter(Shape shape, double fill) {
    Tensor t(std::move(shape), fill);
    snap_to_f32(t);
    t.set_requires_grad(true);
    return t;
}

namespace {
Tensor clone_param(const Tensor& t) {
    if (!t.defined()) {
        return t;
    }
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
}
}  // namespace

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias, double gain)
    : weight(make_parameter({in, out}, rng, gain / std::sqrt(static_cast<double>(in)))) {
    if (with_bias) {
        bias = make_parameter({out}, 0.0);
    }
}

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) {
        out.emplace_back(prefix + ".bias", bias);
    }
}

Linear Linear::clone() const {
    Linear l;
    l.weight = clone_param(weight);
    l.bias = clone_param(bias);
    return l;
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(make_parameter({dim}, 1.0)), beta(make_parameter({dim}, 0.0)) {}

Tensor LayerNorm::operator()(const Tensor& x) const {
    return layer_norm(x, gamma, beta);
}

void LayerNorm::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

LayerNorm LayerNorm::clone() const {
    LayerNorm l;
    l.gamma = clone_param(gamma);
    l.beta = clone_param(beta);
    return l;
}

Tensor causal_mask(std::size_t queries, std::size_t keys) {
    Tensor m({queries, keys});
    auto d = m.mutable_data();
    for (std::size_t i = 0; i < queries; ++i) {
        for (std::size_t j = i + 1; j < keys; ++j) {
            d[i * keys + j] = -1e9;
        }
    }
    return m;
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t kv_dim, std::size_t heads_, Rng& rng,
                                       double out_gain)
    : query(dim, dim, rng),
      key(kv_dim, dim, rng),
      value(kv_dim, dim, rng),
      out(dim, dim, rng, true, out_gain),
      heads(heads_) {
    if (heads == 0 || dim % heads != 0) {
        throw ConfigError("attention: dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
}

Tensor MultiHeadAttention::operator()(const Tensor& x, const Tensor& kv, bool causal) const {
    const std::size_t batch = x.size(0);
    const std::size_t t = x.size(1);
    const std::size_t s = kv.size(1);
    const std::size_t dim = query.weight.size(1);
    const std::size_t hd = dim / heads;

    const Tensor q = permute(reshape(query(x), {batch, t, heads, hd}), {0, 2, 1, 3});
    const Tensor k = permute(reshape(key(kv), {batch, s, heads, hd}), {0, 2, 3, 1});
    const Tensor v = permute(reshape(value(kv), {batch, s, heads, hd}), {0, 2, 1, 3});
    Tensor scores = scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
    if (causal) {
        scores = add(scores, causal_mask(t, s));
    }
    const Tensor mixed = matmul(softmax(scores, -1), v);
    return out(reshape(permute(mixed, {0, 2, 1, 3}), {batch, t, dim}));
}

void MultiHeadAttention::collect(const std::string& prefix, NamedTensors& out_list) const {
    query.collect(prefix + ".query", out_list);
    key.collect(prefix + ".key", out_list);
    value.collect(prefix + ".value", out_list);
    out.collect(prefix + ".out", out_list);
}

MultiHeadAttention MultiHeadAttention::clone() const {
    MultiHeadAttention m;
    m.query = query.clone();
    m.key = key.clone();
    m.value = value.clone();
    m.out = out.clone();
    m.heads = heads;
    return m;
}

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, Rng& rng, double out_gain)
    : up(dim, hidden, rng), down(hidden, dim, rng, true, out_gain) {}

Tensor FeedForward::operator()(const Tensor& x) const {
    return down(gelu(up(x)));
}

void FeedForward::collect(const std::string& prefix, NamedTensors& out) const {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
}

FeedForward FeedForward::clone() const {
    FeedForward f;
    f.up = up.clone();
    f.down = down.clone();
    return f;
}

Conv1d::Conv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_,
               Rng& rng)
    : weight(make_parameter({out, in, kernel}, rng, 1.0 / std::sqrt(static_cast<double>(in * kernel)))),
      bias(make_parameter({out}, 0.0)),
      stride(stride_),
      padding(padding_) {}

Tensor Conv1d::operator()(const Tensor& x) const {
    return conv1d(x, weight, bias, stride, padding);
}

void Conv1d::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

Conv1d Conv1d::clone() const {
    Conv1d c = *this;
    c.weight = clone_param(weight);
    c.bias = clone_param(bias);
    return c;
}

ConvTranspose1d::ConvTranspose1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_,
                                 std::size_t padding_, std::size_t output_padding_, Rng& rng)
    : weight(make_parameter({in, out, kernel}, rng,
                            1.0 / std::sqrt(static_cast<double>(in * kernel) / static_cast<double>(stride_)))),
      bias(make_parameter({out}, 0.0)),
      stride(stride_),
      padding(padding_),
      output_padding(output_padding_) {}

Tensor ConvTranspose1d::operator()(const Tensor& x) const {
    return conv_transpose1d(x, weight, bias, stride, padding, output_padding);
}

void ConvTranspose1d::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
}

ConvTranspose1d ConvTranspose1d::clone() const {
    ConvTranspose1d c = *this;
    c.weight = clone_param(weight);
    c.bias = clone_param(bias);
    return c;
}

}  // namespace kdforge
