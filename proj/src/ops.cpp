// SPDX-License-Identifier: Apache-2.0
#include "kdforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "kdforge/errors.hpp"

namespace kdforge {

using detail::grad_sink;
using detail::make_result;
using detail::TensorImpl;

namespace {

std::size_t norm_axis(int axis, std::size_t rank, const Shape& shape) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw AxisError("axis " + std::to_string(axis) + " is not valid for shape " + shape_str(shape));
    }
    return static_cast<std::size_t>(a);
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) {
        s.outer *= shape[i];
    }
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        s.inner *= shape[i];
    }
    return s;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) {
        return false;
    }
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// Elementwise binary kernel with leading-axis broadcast. The callbacks give
// the value and the two partial derivatives at (x, y).
template <class F, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, Da da, Db db) {
    const Shape* out_shape = nullptr;
    if (is_suffix(b.shape(), a.shape())) {
        out_shape = &a.shape();
    } else if (is_suffix(a.shape(), b.shape())) {
        out_shape = &b.shape();
    } else {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not broadcast-compatible");
    }
    const std::size_t n = shape_numel(*out_shape);
    const std::size_t na = a.numel();
    const std::size_t nb = b.numel();
    std::vector<double> out(n);
    auto ad = a.data();
    auto bd = b.data();
    if (n > 0) {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = f(ad[i % na], bd[i % nb]);
        }
    }
    return make_result(*out_shape, std::move(out), {a, b}, [a, b, da, db, na, nb](const TensorImpl& o) {
        auto ga = grad_sink(a);
        auto gb = grad_sink(b);
        auto ad = a.data();
        auto bd = b.data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const double x = ad[i % na];
            const double y = bd[i % nb];
            if (!ga.empty()) {
                ga[i % na] += o.grad[i] * da(x, y);
            }
            if (!gb.empty()) {
                gb[i % nb] += o.grad[i] * db(x, y);
            }
        }
    });
}

// Elementwise unary kernel; `df(x, y)` is the derivative given input and output.
template <class F, class Df>
Tensor unary(const Tensor& a, F f, Df df) {
    auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) {
        out[i] = f(ad[i]);
    }
    return make_result(a.shape(), std::move(out), {a}, [a, df](const TensorImpl& o) {
        auto ga = grad_sink(a);
        auto ad = a.data();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += o.grad[i] * df(ad[i], o.data[i]);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
    return unary(
        a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(
        a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) {
    return scale(a, -1.0);
}

Tensor relu(const Tensor& a) {
    return unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary(
        a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
    constexpr double k = 0.044715;
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
        [](double x, double) {
            const double u = c * (x + k * x * x * x);
            const double t = std::tanh(u);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
        });
}

Tensor tanh(const Tensor& a) {
    return unary(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a,
        [](double x) {
            if (x >= 0.0) {
                return 1.0 / (1.0 + std::exp(-x));
            }
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor elu(const Tensor& a, double alpha) {
    return unary(
        a, [alpha](double x) { return x > 0.0 ? x : alpha * std::expm1(x); },
        [alpha](double x, double y) { return x > 0.0 ? 1.0 : y + alpha; });
}

Tensor abs(const Tensor& a) {
    return unary(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
    return unary(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0) {
            throw ValidationError("sqrt of a negative value; clamp the input first");
        }
    }
    return unary(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor exp(const Tensor& a) {
    return unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) {
            throw ValidationError("log of a non-positive value; clamp the input first");
        }
    }
    return unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return unary(
        a, [lo](double x) { return x > lo ? x : lo; }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
    }
    const std::size_t m = as[as.size() - 2];
    const std::size_t k = as.back();
    const std::size_t kb = bs[bs.size() - 2];
    const std::size_t n = bs.back();
    const bool shared_rhs = bs.size() == 2;
    bool ok = k == kb;
    if (!shared_rhs) {
        ok = ok && as.size() == bs.size() && std::equal(as.begin(), as.end() - 2, bs.begin());
    }
    if (!ok) {
        throw ShapeError("matmul: shape mismatch " + shape_str(as) + " vs " + shape_str(bs));
    }
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < as.size(); ++i) {
        batch *= as[i];
    }
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);

    // A shared right operand is a single [batch * m, k] x [k, n] product.
    const std::size_t rows = shared_rhs ? batch * m : m;
    const std::size_t nbatch = shared_rhs ? 1 : batch;
    std::vector<double> out(nbatch * rows * n, 0.0);
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t p = 0; p < nbatch; ++p) {
        const double* A = ad.data() + p * rows * k;
        const double* B = bd.data() + p * k * n;
        double* C = out.data() + p * rows * n;
        for (std::size_t i = 0; i < rows; ++i) {
            double* crow = C + i * n;
            for (std::size_t q = 0; q < k; ++q) {
                const double av = A[i * k + q];
                const double* brow = B + q * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
    return make_result(std::move(out_shape), std::move(out), {a, b},
                       [a, b, rows, k, n, nbatch](const TensorImpl& o) {
                           auto ga = grad_sink(a);
                           auto gb = grad_sink(b);
                           auto ad = a.data();
                           auto bd = b.data();
                           for (std::size_t p = 0; p < nbatch; ++p) {
                               const double* A = ad.data() + p * rows * k;
                               const double* B = bd.data() + p * k * n;
                               const double* G = o.grad.data() + p * rows * n;
                               if (!ga.empty()) {
                                   double* GA = ga.data() + p * rows * k;
                                   for (std::size_t i = 0; i < rows; ++i) {
                                       const double* grow = G + i * n;
                                       for (std::size_t q = 0; q < k; ++q) {
                                           const double* brow = B + q * n;
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < n; ++j) {
                                               acc += grow[j] * brow[j];
                                           }
                                           GA[i * k + q] += acc;
                                       }
                                   }
                               }
                               if (!gb.empty()) {
                                   double* GB = gb.data() + p * k * n;
                                   for (std::size_t i = 0; i < rows; ++i) {
                                       const double* grow = G + i * n;
                                       for (std::size_t q = 0; q < k; ++q) {
                                           const double av = A[i * k + q];
                                           double* gbrow = GB + q * n;
                                           for (std::size_t j = 0; j < n; ++j) {
                                               gbrow[j] += av * grow[j];
                                           }
                                       }
                                   }
                               }
                           }
                       });
}

Tensor embedding(const Tensor& weight, std::span<const std::size_t> indices, const Shape& index_shape) {
    if (weight.rank() != 2) {
        throw ShapeError("embedding: weight must be [V, D], got " + shape_str(weight.shape()));
    }
    if (shape_numel(index_shape) != indices.size()) {
        throw ShapeError("embedding: index shape " + shape_str(index_shape) + " does not match " +
                         std::to_string(indices.size()) + " indices");
    }
    const std::size_t vocab = weight.shape()[0];
    const std::size_t d = weight.shape()[1];
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    for (std::size_t i : idx) {
        if (i >= vocab) {
            throw RangeError("embedding: index " + std::to_string(i) + " out of range for " + std::to_string(vocab) +
                             " rows");
        }
    }
    std::vector<double> out(idx.size() * d);
    auto wd = weight.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        std::copy_n(wd.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    Shape out_shape = index_shape;
    out_shape.push_back(d);
    return make_result(std::move(out_shape), std::move(out), {weight},
                       [weight, idx = std::move(idx), d](const TensorImpl& o) {
                           auto gw = grad_sink(weight);
                           for (std::size_t r = 0; r < idx.size(); ++r) {
                               for (std::size_t j = 0; j < d; ++j) {
                                   gw[idx[r] * d + j] += o.grad[r * d + j];
                               }
                           }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), {a}, [a](const TensorImpl& o) {
        auto ga = grad_sink(a);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] += o.grad[i];
        }
    });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& dims) {
    const Shape& s = a.shape();
    const std::size_t r = s.size();
    if (dims.size() != r) {
        throw AxisError("permute: " + std::to_string(dims.size()) + " axes given for shape " + shape_str(s));
    }
    std::vector<bool> seen(r, false);
    for (std::size_t d : dims) {
        if (d >= r || seen[d]) {
            throw AxisError("permute: invalid axis order for shape " + shape_str(s));
        }
        seen[d] = true;
    }
    Shape out_shape(r);
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * s[i];
    }
    std::vector<std::size_t> src_stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = s[dims[i]];
        src_stride[i] = in_strides[dims[i]];
    }
    const std::size_t n = a.numel();
    // Source offset of each output element, reused by backward.
    std::vector<std::size_t> src(n);
    {
        std::vector<std::size_t> counter(r, 0);
        std::size_t off = 0;
        for (std::size_t i = 0; i < n; ++i) {
            src[i] = off;
            for (std::size_t ax = r; ax-- > 0;) {
                ++counter[ax];
                off += src_stride[ax];
                if (counter[ax] < out_shape[ax]) {
                    break;
                }
                off -= src_stride[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
    }
    std::vector<double> out(n);
    auto ad = a.data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = ad[src[i]];
    }
    return make_result(std::move(out_shape), std::move(out), {a}, [a, src = std::move(src)](const TensorImpl& o) {
        auto ga = grad_sink(a);
        for (std::size_t i = 0; i < src.size(); ++i) {
            ga[src[i]] += o.grad[i];
        }
    });
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
    const std::size_t r = a.rank();
    std::vector<std::size_t> dims(r);
    std::iota(dims.begin(), dims.end(), std::size_t{0});
    std::swap(dims[norm_axis(axis0, r, a.shape())], dims[norm_axis(axis1, r, a.shape())]);
    return permute(a, dims);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    const Shape& first = parts[0].shape();
    const std::size_t ax = norm_axis(axis, first.size(), first);
    Shape out_shape = first;
    out_shape[ax] = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) {
            ok = i == ax || s[i] == first[i];
        }
        if (!ok) {
            throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
        }
        out_shape[ax] += s[ax];
    }
    const AxisSplit split = split_at(out_shape, ax);
    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(offset);
        const std::size_t len = p.shape()[ax];
        auto pd = p.data();
        for (std::size_t o = 0; o < split.outer; ++o) {
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * len * split.inner), len * split.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * split.len + offset) * split.inner));
        }
        offset += len;
    }
    return make_result(out_shape, std::move(out), parts, [parts, offsets, split, ax](const TensorImpl& o) {
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            auto gp = grad_sink(parts[pi]);
            if (gp.empty()) {
                continue;
            }
            const std::size_t len = parts[pi].shape()[ax];
            for (std::size_t q = 0; q < split.outer; ++q) {
                const double* src = o.grad.data() + (q * split.len + offsets[pi]) * split.inner;
                double* dst = gp.data() + q * len * split.inner;
                for (std::size_t i = 0; i < len * split.inner; ++i) {
                    dst[i] += src[i];
                }
            }
        }
    });
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = norm_axis(axis, a.rank(), a.shape());
    const AxisSplit split = split_at(a.shape(), ax);
    if (begin > end || end > split.len) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for shape " + shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[ax] = end - begin;
    const std::size_t len = end - begin;
    std::vector<double> out(split.outer * len * split.inner);
    auto ad = a.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
        std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((o * split.len + begin) * split.inner),
                    len * split.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * split.inner));
    }
    return make_result(std::move(out_shape), std::move(out), {a}, [a, split, begin, len](const TensorImpl& o) {
        auto ga = grad_sink(a);
        for (std::size_t q = 0; q < split.outer; ++q) {
            const double* src = o.grad.data() + q * len * split.inner;
            double* dst = ga.data() + (q * split.len + begin) * split.inner;
            for (std::size_t i = 0; i < len * split.inner; ++i) {
                dst[i] += src[i];
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() == 0) {
        throw ShapeError("layer_norm: input must have rank >= 1");
    }
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + " vs gain " +
                         shape_str(gamma.shape()) + " / bias " + shape_str(beta.shape()));
    }
    const std::size_t rows = d == 0 ? 0 : x.numel() / d;
    auto xd = x.data();
    auto g = gamma.data();
    auto bta = beta.data();
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += (row[j] - mu) * (row[j] - mu);
        }
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * rstd[r];
            out[r * d + j] = xhat[r * d + j] * g[j] + bta[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), d, rows](const TensorImpl& o) {
                           auto gx = grad_sink(x);
                           auto gg = grad_sink(gamma);
                           auto gb = grad_sink(beta);
                           auto g = gamma.data();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* go = o.grad.data() + r * d;
                               const double* xh = xhat.data() + r * d;
                               if (!gg.empty() || !gb.empty()) {
                                   for (std::size_t j = 0; j < d; ++j) {
                                       if (!gg.empty()) {
                                           gg[j] += go[j] * xh[j];
                                       }
                                       if (!gb.empty()) {
                                           gb[j] += go[j];
                                       }
                                   }
                               }
                               if (!gx.empty()) {
                                   double s1 = 0.0;
                                   double s2 = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dy = go[j] * g[j];
                                       s1 += dy;
                                       s2 += dy * xh[j];
                                   }
                                   const double inv_d = 1.0 / static_cast<double>(d);
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dy = go[j] * g[j];
                                       gx[r * d + j] += rstd[r] * (dy - inv_d * s1 - xh[j] * inv_d * s2);
                                   }
                               }
                           }
                       });
}

Tensor softmax(const Tensor& x, int axis) {
    const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
    const AxisSplit s = split_at(x.shape(), ax);
    auto xd = x.data();
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.len; ++i) {
                mx = std::max(mx, xd[base + i * s.inner]);
            }
            double z = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) {
                const double e = std::exp(xd[base + i * s.inner] - mx);
                out[base + i * s.inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < s.len; ++i) {
                out[base + i * s.inner] /= z;
            }
        }
    }
    return make_result(x.shape(), std::move(out), {x}, [x, s](const TensorImpl& o) {
        auto gx = grad_sink(x);
        for (std::size_t q = 0; q < s.outer; ++q) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = q * s.len * s.inner + in;
                double dot = 0.0;
                for (std::size_t i = 0; i < s.len; ++i) {
                    dot += o.grad[base + i * s.inner] * o.data[base + i * s.inner];
                }
                for (std::size_t i = 0; i < s.len; ++i) {
                    const std::size_t p = base + i * s.inner;
                    gx[p] += o.data[p] * (o.grad[p] - dot);
                }
            }
        }
    });
}

Tensor log_softmax(const Tensor& x, int axis) {
    const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
    const AxisSplit s = split_at(x.shape(), ax);
    auto xd = x.data();
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.len; ++i) {
                mx = std::max(mx, xd[base + i * s.inner]);
            }
            double z = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) {
                z += std::exp(xd[base + i * s.inner] - mx);
            }
            const double lse = mx + std::log(z);
            for (std::size_t i = 0; i < s.len; ++i) {
                out[base + i * s.inner] = xd[base + i * s.inner] - lse;
            }
        }
    }
    return make_result(x.shape(), std::move(out), {x}, [x, s](const TensorImpl& o) {
        auto gx = grad_sink(x);
        for (std::size_t q = 0; q < s.outer; ++q) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = q * s.len * s.inner + in;
                double total = 0.0;
                for (std::size_t i = 0; i < s.len; ++i) {
                    total += o.grad[base + i * s.inner];
                }
                for (std::size_t i = 0; i < s.len; ++i) {
                    const std::size_t p = base + i * s.inner;
                    gx[p] += o.grad[p] - std::exp(o.data[p]) * total;
                }
            }
        }
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    return make_result(Shape{}, {acc}, {x}, [x](const TensorImpl& o) {
        auto gx = grad_sink(x);
        const double g = o.grad[0];
        for (double& v : gx) {
            v += g;
        }
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) {
        throw ShapeError("mean of an empty tensor " + shape_str(x.shape()));
    }
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
    const std::size_t ax = norm_axis(axis, x.rank(), x.shape());
    const AxisSplit s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    if (keepdim) {
        out_shape[ax] = 1;
    } else {
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    }
    std::vector<double> out(s.outer * s.inner, 0.0);
    auto xd = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.len; ++i) {
            const double* src = xd.data() + (o * s.len + i) * s.inner;
            double* dst = out.data() + o * s.inner;
            for (std::size_t in = 0; in < s.inner; ++in) {
                dst[in] += src[in];
            }
        }
    }
    return make_result(std::move(out_shape), std::move(out), {x}, [x, s](const TensorImpl& o) {
        auto gx = grad_sink(x);
        for (std::size_t q = 0; q < s.outer; ++q) {
            for (std::size_t i = 0; i < s.len; ++i) {
                double* dst = gx.data() + (q * s.len + i) * s.inner;
                const double* src = o.grad.data() + q * s.inner;
                for (std::size_t in = 0; in < s.inner; ++in) {
                    dst[in] += src[in];
                }
            }
        }
    });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
    const std::size_t len = x.size(axis);
    if (len == 0) {
        throw ShapeError("mean over an empty axis of " + shape_str(x.shape()));
    }
    return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    const std::size_t n = a.numel();
    if (n == 0) {
        throw ShapeError("mse of empty tensors");
    }
    auto ad = a.data();
    auto bd = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = ad[i] - bd[i];
        acc += d * d;
    }
    return make_result(Shape{}, {acc / static_cast<double>(n)}, {a, b}, [a, b, n](const TensorImpl& o) {
        auto ga = grad_sink(a);
        auto gb = grad_sink(b);
        auto ad = a.data();
        auto bd = b.data();
        const double k = 2.0 * o.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = k * (ad[i] - bd[i]);
            if (!ga.empty()) {
                ga[i] += g;
            }
            if (!gb.empty()) {
                gb[i] -= g;
            }
        }
    });
}

Tensor l1(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "l1");
    const std::size_t n = a.numel();
    if (n == 0) {
        throw ShapeError("l1 of empty tensors");
    }
    auto ad = a.data();
    auto bd = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += std::fabs(ad[i] - bd[i]);
    }
    return make_result(Shape{}, {acc / static_cast<double>(n)}, {a, b}, [a, b, n](const TensorImpl& o) {
        auto ga = grad_sink(a);
        auto gb = grad_sink(b);
        auto ad = a.data();
        auto bd = b.data();
        const double k = o.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = ad[i] - bd[i];
            const double g = d > 0.0 ? k : (d < 0.0 ? -k : 0.0);
            if (!ga.empty()) {
                ga[i] += g;
            }
            if (!gb.empty()) {
                gb[i] -= g;
            }
        }
    });
}

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (stride == 0) {
        throw ValidationError("conv1d: stride must be positive");
    }
    if (length + 2 * padding < kernel) {
        throw ShapeError("conv1d: input length " + std::to_string(length) + " with padding " +
                         std::to_string(padding) + " is shorter than kernel " + std::to_string(kernel));
    }
    return (length + 2 * padding - kernel) / stride + 1;
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
    if (x.rank() != 3 || weight.rank() != 3 || x.shape()[1] != weight.shape()[1]) {
        throw ShapeError("conv1d: shape mismatch " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t batch = x.shape()[0];
    const std::size_t cin = x.shape()[1];
    const std::size_t n = x.shape()[2];
    const std::size_t cout = weight.shape()[0];
    const std::size_t kw = weight.shape()[2];
    if (bias.defined() && bias.shape() != Shape{cout}) {
        throw ShapeError("conv1d: shape mismatch bias " + shape_str(bias.shape()) + " vs " + std::to_string(cout) +
                         " output channels");
    }
    const std::size_t nout = conv1d_output_length(n, kw, stride, padding);
    const auto pad = static_cast<std::ptrdiff_t>(padding);
    const auto sn = static_cast<std::ptrdiff_t>(n);
    const auto skw = static_cast<std::ptrdiff_t>(kw);
    std::vector<double> out(batch * cout * nout, 0.0);
    auto xd = x.data();
    auto wd = weight.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t co = 0; co < cout; ++co) {
            double* orow = out.data() + (b * cout + co) * nout;
            if (bias.defined()) {
                std::fill_n(orow, nout, bias.data()[co]);
            }
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* xrow = xd.data() + (b * cin + ci) * n;
                const double* wrow = wd.data() + (co * cin + ci) * kw;
                for (std::size_t t = 0; t < nout; ++t) {
                    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * stride) - pad;
                    const std::ptrdiff_t k0 = std::max<std::ptrdiff_t>(0, -start);
                    const std::ptrdiff_t k1 = std::min<std::ptrdiff_t>(skw, sn - start);
                    double acc = 0.0;
                    for (std::ptrdiff_t k = k0; k < k1; ++k) {
                        acc += wrow[k] * xrow[start + k];
                    }
                    orow[t] += acc;
                }
            }
        }
    }
    return make_result(
        Shape{batch, cout, nout}, std::move(out), {x, weight, bias},
        [x, weight, bias, batch, cin, n, cout, kw, nout, stride, pad](const TensorImpl& o) {
            auto gx = grad_sink(x);
            auto gw = grad_sink(weight);
            auto gb = bias.defined() ? grad_sink(bias) : std::span<double>{};
            auto xd = x.data();
            auto wd = weight.data();
            const auto sn = static_cast<std::ptrdiff_t>(n);
            const auto skw = static_cast<std::ptrdiff_t>(kw);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* grow = o.grad.data() + (b * cout + co) * nout;
                    if (!gb.empty()) {
                        for (std::size_t t = 0; t < nout; ++t) {
                            gb[co] += grow[t];
                        }
                    }
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* xrow = xd.data() + (b * cin + ci) * n;
                        const double* wrow = wd.data() + (co * cin + ci) * kw;
                        double* gxrow = gx.empty() ? nullptr : gx.data() + (b * cin + ci) * n;
                        double* gwrow = gw.empty() ? nullptr : gw.data() + (co * cin + ci) * kw;
                        for (std::size_t t = 0; t < nout; ++t) {
                            const double g = grow[t];
                            const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * stride) - pad;
                            const std::ptrdiff_t k0 = std::max<std::ptrdiff_t>(0, -start);
                            const std::ptrdiff_t k1 = std::min<std::ptrdiff_t>(skw, sn - start);
                            if (gxrow) {
                                for (std::ptrdiff_t k = k0; k < k1; ++k) {
                                    gxrow[start + k] += g * wrow[k];
                                }
                            }
                            if (gwrow) {
                                for (std::ptrdiff_t k = k0; k < k1; ++k) {
                                    gwrow[k] += g * xrow[start + k];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t padding, std::size_t output_padding) {
    if (x.rank() != 3 || weight.rank() != 3 || x.shape()[1] != weight.shape()[0]) {
        throw ShapeError("conv_transpose1d: shape mismatch " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    if (stride == 0) {
        throw ValidationError("conv_transpose1d: stride must be positive");
    }
    const std::size_t batch = x.shape()[0];
    const std::size_t cin = x.shape()[1];
    const std::size_t n = x.shape()[2];
    const std::size_t cout = weight.shape()[1];
    const std::size_t kw = weight.shape()[2];
    if (bias.defined() && bias.shape() != Shape{cout}) {
        throw ShapeError("conv_transpose1d: shape mismatch bias " + shape_str(bias.shape()) + " vs " +
                         std::to_string(cout) + " output channels");
    }
    const std::ptrdiff_t full = static_cast<std::ptrdiff_t>((n == 0 ? 0 : (n - 1) * stride) + kw + output_padding);
    const std::ptrdiff_t signed_out = full - 2 * static_cast<std::ptrdiff_t>(padding);
    if (n == 0 || signed_out <= 0) {
        throw ShapeError("conv_transpose1d: empty output for input " + shape_str(x.shape()));
    }
    const auto nout = static_cast<std::size_t>(signed_out);
    const auto pad = static_cast<std::ptrdiff_t>(padding);
    const auto snout = static_cast<std::ptrdiff_t>(nout);
    const auto skw = static_cast<std::ptrdiff_t>(kw);
    std::vector<double> out(batch * cout * nout, 0.0);
    auto xd = x.data();
    auto wd = weight.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t co = 0; co < cout; ++co) {
            double* orow = out.data() + (b * cout + co) * nout;
            if (bias.defined()) {
                std::fill_n(orow, nout, bias.data()[co]);
            }
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double* xrow = xd.data() + (b * cin + ci) * n;
                const double* wrow = wd.data() + (ci * cout + co) * kw;
                for (std::size_t i = 0; i < n; ++i) {
                    const double v = xrow[i];
                    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(i * stride) - pad;
                    const std::ptrdiff_t k0 = std::max<std::ptrdiff_t>(0, -start);
                    const std::ptrdiff_t k1 = std::min<std::ptrdiff_t>(skw, snout - start);
                    for (std::ptrdiff_t k = k0; k < k1; ++k) {
                        orow[start + k] += v * wrow[k];
                    }
                }
            }
        }
    }
    return make_result(
        Shape{batch, cout, nout}, std::move(out), {x, weight, bias},
        [x, weight, bias, batch, cin, n, cout, kw, nout, stride, pad](const TensorImpl& o) {
            auto gx = grad_sink(x);
            auto gw = grad_sink(weight);
            auto gb = bias.defined() ? grad_sink(bias) : std::span<double>{};
            auto xd = x.data();
            auto wd = weight.data();
            const auto snout = static_cast<std::ptrdiff_t>(nout);
            const auto skw = static_cast<std::ptrdiff_t>(kw);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t co = 0; co < cout; ++co) {
                    const double* grow = o.grad.data() + (b * cout + co) * nout;
                    if (!gb.empty()) {
                        for (std::size_t t = 0; t < nout; ++t) {
                            gb[co] += grow[t];
                        }
                    }
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* xrow = xd.data() + (b * cin + ci) * n;
                        const double* wrow = wd.data() + (ci * cout + co) * kw;
                        double* gxrow = gx.empty() ? nullptr : gx.data() + (b * cin + ci) * n;
                        double* gwrow = gw.empty() ? nullptr : gw.data() + (ci * cout + co) * kw;
                        for (std::size_t i = 0; i < n; ++i) {
                            const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(i * stride) - pad;
                            const std::ptrdiff_t k0 = std::max<std::ptrdiff_t>(0, -start);
                            const std::ptrdiff_t k1 = std::min<std::ptrdiff_t>(skw, snout - start);
                            if (gxrow) {
                                double acc = 0.0;
                                for (std::ptrdiff_t k = k0; k < k1; ++k) {
                                    acc += grow[start + k] * wrow[k];
                                }
                                gxrow[i] += acc;
                            }
                            if (gwrow) {
                                const double v = xrow[i];
                                for (std::ptrdiff_t k = k0; k < k1; ++k) {
                                    gwrow[k] += v * grow[start + k];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor avg_pool1d(const Tensor& x, std::size_t factor) {
    if (x.rank() != 3) {
        throw ShapeError("avg_pool1d: expected [B, C, N], got " + shape_str(x.shape()));
    }
    if (factor == 0) {
        throw ValidationError("avg_pool1d: factor must be positive");
    }
    const std::size_t rows = x.shape()[0] * x.shape()[1];
    const std::size_t n = x.shape()[2];
    const std::size_t nout = n / factor;
    if (nout == 0) {
        throw ShapeError("avg_pool1d: input length " + std::to_string(n) + " shorter than factor " +
                         std::to_string(factor));
    }
    const double inv = 1.0 / static_cast<double>(factor);
    std::vector<double> out(rows * nout, 0.0);
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t t = 0; t < nout; ++t) {
            double acc = 0.0;
            for (std::size_t k = 0; k < factor; ++k) {
                acc += xd[r * n + t * factor + k];
            }
            out[r * nout + t] = acc * inv;
        }
    }
    return make_result(Shape{x.shape()[0], x.shape()[1], nout}, std::move(out), {x},
                       [x, rows, n, nout, factor, inv](const TensorImpl& o) {
                           auto gx = grad_sink(x);
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t t = 0; t < nout; ++t) {
                                   const double g = o.grad[r * nout + t] * inv;
                                   for (std::size_t k = 0; k < factor; ++k) {
                                       gx[r * n + t * factor + k] += g;
                                   }
                               }
                           }
                       });
}

Tensor one_hot(std::span<const std::size_t> indices, const Shape& index_shape, std::size_t classes) {
    if (shape_numel(index_shape) != indices.size()) {
        throw ShapeError("one_hot: index shape " + shape_str(index_shape) + " does not match " +
                         std::to_string(indices.size()) + " indices");
    }
    Shape shape = index_shape;
    shape.push_back(classes);
    Tensor t(shape);
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= classes) {
            throw RangeError("one_hot: index " + std::to_string(indices[i]) + " out of range for " +
                             std::to_string(classes) + " classes");
        }
        d[i * classes + indices[i]] = 1.0;
    }
    return t;
}

}  // namespace kdforge
