// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <string>

#include "kdforge/errors.hpp"
#include "kdforge/gradcheck.hpp"
#include "kdforge/ops.hpp"
#include "kdforge/rng.hpp"

using namespace kdforge;

TEST_CASE("log_softmax of a two-way tie") {
    const Tensor y = log_softmax(Tensor({2}, {0.0, 0.0}), 0);
    CHECK(y.at(0) == doctest::Approx(-std::numbers::ln2).epsilon(1e-15));
    CHECK(y.at(1) == doctest::Approx(-std::numbers::ln2).epsilon(1e-15));
}

TEST_CASE("softmax rows are normalized and agree with exp(log_softmax)") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = Tensor::randn({4, 7}, rng, 5.0);
        const Tensor p = softmax(x, -1);
        const Tensor lp = log_softmax(x, -1);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                total += p.at(r * 7 + c);
                CHECK(std::fabs(std::exp(lp.at(r * 7 + c)) - p.at(r * 7 + c)) < 1e-10);
            }
            CHECK(std::fabs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax over a middle axis") {
    Rng rng(5);
    const Tensor x = Tensor::randn({2, 3, 4}, rng);
    const Tensor p = softmax(x, 1);
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t j = 0; j < 4; ++j) {
            double total = 0.0;
            for (std::size_t i = 0; i < 3; ++i) {
                total += p.at((b * 3 + i) * 4 + j);
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv1d output length") {
    CHECK(conv1d_output_length(8, 3, 2, 1) == 4);
    const Tensor y = conv1d(Tensor::ones({1, 1, 8}), Tensor::ones({1, 1, 3}), Tensor(), 2, 1);
    CHECK(y.shape() == Shape{1, 1, 4});
    // Windows: [pad,0,1], [1,2,3], [3,4,5], [5,6,7] over an all-ones input.
    CHECK(y.at(0) == 2.0);
    CHECK(y.at(1) == 3.0);
}

TEST_CASE("conv_transpose1d inverts the length arithmetic of conv1d") {
    const Tensor x = Tensor::ones({1, 2, 16});
    const Tensor down = conv1d(x, Tensor::ones({3, 2, 8}), Tensor(), 4, 2);
    CHECK(down.shape() == Shape{1, 3, 4});
    const Tensor up = conv_transpose1d(down, Tensor::ones({3, 2, 8}), Tensor(), 4, 2);
    CHECK(up.shape() == Shape{1, 2, 16});
}

TEST_CASE("backward of sum gives ones") {
    Tensor x = Tensor({3}, {1.0, -2.0, 0.5}).set_requires_grad();
    backward(sum(x));
    for (double g : x.grad()) {
        CHECK(g == 1.0);
    }
}

TEST_CASE("mse of a leaf against itself has zero gradient") {
    Tensor x = Tensor({3}, {1.0, -2.0, 0.5}).set_requires_grad();
    backward(mse(x, x));
    for (double g : x.grad()) {
        CHECK(g == 0.0);
    }
}

TEST_CASE("mean of squares gradient") {
    Tensor x = Tensor({2}, {1.0, 2.0}).set_requires_grad();
    backward(mean(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(1.0));
    CHECK(x.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("graph misuse is reported") {
    Tensor x = Tensor({2}, {1.0, 2.0}).set_requires_grad();
    SUBCASE("non-scalar loss") {
        CHECK_THROWS_AS(backward(mul(x, x)), GraphError);
    }
    SUBCASE("detached graph") {
        CHECK_THROWS_AS(backward(sum(x.detach())), GraphError);
    }
    SUBCASE("second backward on the same graph") {
        const Tensor loss = sum(mul(x, x));
        backward(loss);
        CHECK_THROWS_AS(backward(loss), GraphError);
    }
    SUBCASE("no-grad mode records nothing") {
        NoGradGuard guard;
        CHECK_FALSE(sum(mul(x, x)).requires_grad());
    }
}

TEST_CASE("shape and axis errors") {
    const Tensor a({2, 3});
    const Tensor b({3, 2});
    try {
        matmul(a, Tensor({2, 2}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[2, 2]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(mse(a, b), ShapeError);
    CHECK_THROWS_AS(softmax(a, 2), AxisError);
    CHECK_THROWS_AS(sum(a, -3), AxisError);
    CHECK_NOTHROW(matmul(a, b));
}

TEST_CASE("trailing-axis broadcast") {
    const Tensor a = Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0});
    const Tensor bias = Tensor({2}, {10.0, 20.0});
    const Tensor c = add(a, bias);
    CHECK(c.at(0) == 11.0);
    CHECK(c.at(3) == 24.0);
    CHECK(add(bias, a).at(2) == 13.0);
}

TEST_CASE("permute round trip and matmul batching") {
    Rng rng(11);
    const Tensor x = Tensor::randn({2, 3, 4, 5}, rng);
    const Tensor y = permute(permute(x, {0, 2, 3, 1}), {0, 3, 1, 2});
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(x.at(i) == y.at(i));
    }
    const Tensor w = Tensor::randn({5, 2}, rng);
    const Tensor shared = matmul(x, w);
    CHECK(shared.shape() == Shape{2, 3, 4, 2});
    double manual = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
        manual += x.at(((1 * 3 + 2) * 4 + 3) * 5 + k) * w.at(k * 2 + 1);
    }
    CHECK(shared.at(((1 * 3 + 2) * 4 + 3) * 2 + 1) == doctest::Approx(manual).epsilon(1e-14));
}

TEST_CASE("grad_check on sum of squares") {
    Rng rng(1);
    const Tensor x = Tensor::uniform({8}, rng, -1.0, 1.0);
    const double err = grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x, 1e-4);
    CHECK(err < 1e-4);
}

TEST_CASE("grad_check on a constant function") {
    const Tensor x({4}, 0.3);
    const double err = grad_check([](const Tensor&) { return Tensor::scalar(2.5); }, x, 1e-3);
    CHECK(err == 0.0);
}

TEST_CASE("grad_check rejects bad eps and non-scalar output") {
    const Tensor x({2}, 1.0);
    CHECK_THROWS_AS(grad_check([](const Tensor& v) { return sum(v); }, x, 1.0), ValidationError);
    CHECK_THROWS_AS(grad_check([](const Tensor& v) { return scale(v, 2.0); }, x, 1e-3), GraphError);
}

TEST_CASE("forward evaluation is deterministic") {
    auto run = [] {
        Rng rng(42);
        const Tensor x = Tensor::randn({3, 4, 6}, rng);
        const Tensor w = Tensor::randn({6, 6}, rng);
        return softmax(matmul(gelu(x), w), -1);
    };
    const Tensor a = run();
    const Tensor b = run();
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(a.at(i) == b.at(i));
    }
}

TEST_CASE("snap_to_f32 makes values binary32-representable") {
    Tensor t({1}, {0.1});
    snap_to_f32(t);
    CHECK(t.at(0) == static_cast<double>(0.1f));
}
