#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "aps/conv.hpp"
#include "aps/gradcheck.hpp"
#include "aps/tensor.hpp"
#include "oracles.hpp"

using namespace aps;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

TensorPtr<double> randn_d(Shape s, Rng& rng, double stddev = 1.0) {
    return Td::randn(std::move(s), rng, 0.0, stddev);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace

TEST_CASE("conv2d identity kernel passes input through") {
    Rng rng(7);
    auto x = randn_d({1, 1, 4, 4}, rng);
    auto w = Td::from({1, 1, 1, 1}, {1.0});
    auto b = Td::zeros({1});
    auto y = conv2d<double>(x, w, b, 1, 0);
    CHECK(y->shape == Shape{1, 1, 4, 4});
    for (std::int64_t i = 0; i < 16; ++i) CHECK(y->values[i] == doctest::Approx(x->values[i]).epsilon(0));
}

TEST_CASE("conv2d all-ones 3x3 on all-ones 5x5 gives 9 everywhere") {
    auto x = Td::ones({1, 1, 5, 5});
    auto w = Td::ones({1, 1, 3, 3});
    auto y = conv2d<double>(x, w, nullptr, 1, 0);
    CHECK(y->shape == Shape{1, 1, 3, 3});
    for (auto v : y->values) CHECK(v == doctest::Approx(9.0));
}

TEST_CASE("conv2d matches nested-loop oracle on strided padded case") {
    Rng rng(11);
    auto x = randn_d({2, 3, 6, 6}, rng);
    auto w = randn_d({4, 3, 3, 3}, rng);
    auto b = randn_d({4}, rng);
    auto y = conv2d<double>(x, w, b, 2, 1);
    auto ref = oracle::conv2d(x->values, 2, 3, 6, 6, w->values, 4, 3, 3, b->values, 2, 1);
    CHECK(y->shape == Shape{2, 4, 3, 3});
    CHECK(max_abs_diff(y->values, ref) < 1e-6);
}

TEST_CASE("conv2d oracle equivalence across 100 random instances") {
    Rng rng(23);
    for (int t = 0; t < 100; ++t) {
        const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
        const std::int64_t ci = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
        const std::int64_t co = 1 + static_cast<std::int64_t>(rng.uniform_index(4));
        const std::int64_t k = 1 + 2 * static_cast<std::int64_t>(rng.uniform_index(2));  // 1 or 3
        const std::int64_t h = k + static_cast<std::int64_t>(rng.uniform_index(6));
        const std::int64_t w = k + static_cast<std::int64_t>(rng.uniform_index(6));
        const std::int64_t stride = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
        const std::int64_t pad = static_cast<std::int64_t>(rng.uniform_index(2));
        auto x = randn_d({n, ci, h, w}, rng);
        auto wt = randn_d({co, ci, k, k}, rng);
        auto b = randn_d({co}, rng);
        auto y = conv2d<double>(x, wt, b, stride, pad);
        auto ref = oracle::conv2d(x->values, n, ci, h, w, wt->values, co, k, k, b->values, stride, pad);
        CHECK(max_abs_diff(y->values, ref) < 1e-6);
    }
}

TEST_CASE("conv2d stride-1 same padding preserves spatial dims") {
    Rng rng(31);
    for (std::int64_t k : {1, 3, 5}) {
        auto x = randn_d({2, 3, 8, 6}, rng);
        auto w = randn_d({4, 3, k, k}, rng);
        auto y = conv2d<double>(x, w, nullptr, 1, (k - 1) / 2);
        CHECK(y->dim(2) == 8);
        CHECK(y->dim(3) == 6);
    }
}

TEST_CASE("conv2d names the offending axis on mismatch") {
    auto x = Td::zeros({1, 3, 4, 4});
    auto w = Td::zeros({2, 4, 3, 3});
    CHECK_THROWS_WITH_AS(conv2d<double>(x, w, nullptr, 1, 0),
                         doctest::Contains("input channel axis 3"), DimensionError);
    auto w2 = Td::zeros({2, 3, 3, 3});
    auto bad_bias = Td::zeros({3});
    CHECK_THROWS_AS(conv2d<double>(x, w2, bad_bias, 1, 0), DimensionError);
    auto big = Td::zeros({2, 3, 9, 9, 1});
    CHECK_THROWS_AS(conv2d<double>(big, w2, nullptr, 1, 0), DimensionError);
}

TEST_CASE("deconv2d ones input counts contributing cells") {
    auto x = Td::ones({1, 1, 2, 2});
    auto w = Td::ones({1, 1, 4, 4});
    auto b = Td::zeros({1});
    auto y = deconv2d<double>(x, w, b, 2, 1);
    REQUIRE(y->shape == Shape{1, 1, 4, 4});
    // corners touched by one input cell, the 2x2 center by all four
    const double expect[16] = {1, 2, 2, 1, 2, 4, 4, 2, 2, 4, 4, 2, 1, 2, 2, 1};
    for (int i = 0; i < 16; ++i) CHECK(y->values[i] == doctest::Approx(expect[i]));
}

TEST_CASE("deconv2d zero input yields broadcast bias") {
    auto x = Td::zeros({2, 3, 3, 3});
    Rng rng(5);
    auto w = randn_d({3, 2, 4, 4}, rng);
    auto b = Td::from({2}, {0.5, -1.25});
    auto y = deconv2d<double>(x, w, b, 2, 1);
    REQUIRE(y->shape == Shape{2, 2, 6, 6});
    for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t c = 0; c < 2; ++c)
            for (std::int64_t j = 0; j < 36; ++j)
                CHECK(y->values[(n * 2 + c) * 36 + j] == doctest::Approx(b->values[c]));
}

TEST_CASE("deconv2d matches scatter oracle and the conv adjoint") {
    Rng rng(13);
    for (int t = 0; t < 100; ++t) {
        const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(2));
        const std::int64_t ci = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
        const std::int64_t co = 1 + static_cast<std::int64_t>(rng.uniform_index(3));
        const std::int64_t h = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
        const std::int64_t w = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
        auto x = randn_d({n, ci, h, w}, rng);
        auto wt = randn_d({ci, co, 4, 4}, rng);
        auto b = randn_d({co}, rng);
        auto y = deconv2d<double>(x, wt, b, 2, 1);
        auto ref = oracle::deconv2d(x->values, n, ci, h, w, wt->values, co, 4, 4, b->values, 2, 1);
        CHECK(y->shape == Shape{n, co, 2 * h, 2 * w});
        CHECK(max_abs_diff(y->values, ref) < 1e-6);
    }

    // adjoint identity: <conv(x,w), y> == <x, deconv(y,w)> with zero bias
    for (int t = 0; t < 20; ++t) {
        auto x = randn_d({2, 3, 8, 6}, rng);
        auto w = randn_d({4, 3, 4, 4}, rng);  // conv layout [co,ci,k,k]
        auto cy = conv2d<double>(x, w, nullptr, 2, 1);
        auto y = randn_d(cy->shape, rng);
        double lhs = 0.0;
        for (std::int64_t i = 0; i < cy->numel(); ++i) lhs += cy->values[i] * y->values[i];
        // same storage reinterpreted as deconv layout [ci=4, co=3, k, k]
        auto dx = deconv2d<double>(y, w, nullptr, 2, 1);
        REQUIRE(dx->shape == x->shape);
        double rhs = 0.0;
        for (std::int64_t i = 0; i < x->numel(); ++i) rhs += x->values[i] * dx->values[i];
        CHECK(std::abs(lhs - rhs) < 1e-5 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("deconv2d rejects non-positive output sizes") {
    auto x = Td::zeros({1, 1, 1, 1});
    auto w = Td::zeros({1, 1, 2, 2});
    CHECK_THROWS_AS(deconv2d<double>(x, w, nullptr, 1, 1), DimensionError);
}

TEST_CASE("elementwise analytic values") {
    auto z = Td::from({1}, {0.0});
    CHECK(sigmoid(z)->item() == doctest::Approx(0.5));
    auto v = Td::from({2}, {-3.2, 3.2});
    auto r = relu(v);
    CHECK(r->values[0] == 0.0);
    CHECK(r->values[1] == doctest::Approx(3.2));
    Rng rng(3);
    auto a = randn_d({2, 3}, rng);
    auto ones = Td::ones(a->shape);
    auto m = mul(a, ones);
    for (std::int64_t i = 0; i < a->numel(); ++i) CHECK(m->values[i] == a->values[i]);
    CHECK_THROWS_AS(add(a, Td::zeros({3, 2})), DimensionError);
}

TEST_CASE("sigmoid and softplus stay finite at extreme logits") {
    auto x = Td::from({4}, {-80.0, 80.0, -500.0, 500.0});
    auto s = sigmoid(x);
    auto sp = softplus(x);
    for (auto v : s->values) CHECK(std::isfinite(v));
    for (auto v : sp->values) CHECK(std::isfinite(v));
    CHECK(s->values[0] == doctest::Approx(0.0).epsilon(1e-30));
    CHECK(s->values[1] == doctest::Approx(1.0));
    CHECK(sp->values[2] == doctest::Approx(0.0).epsilon(1e-30));
    CHECK(sp->values[3] == doctest::Approx(500.0));
}

TEST_CASE("concat_channels stacks, slices back, and splits gradient") {
    Rng rng(17);
    auto a = randn_d({1, 2, 4, 4}, rng);
    auto b = randn_d({1, 3, 4, 4}, rng);
    auto c = concat_channels(a, b);
    CHECK(c->shape == Shape{1, 5, 4, 4});
    auto ra = slice_channels(c, 0, 2);
    auto rb = slice_channels(c, 2, 5);
    for (std::int64_t i = 0; i < a->numel(); ++i) CHECK(ra->values[i] == a->values[i]);
    for (std::int64_t i = 0; i < b->numel(); ++i) CHECK(rb->values[i] == b->values[i]);

    a->requires_grad = true;
    b->requires_grad = true;
    backward(sum_all(concat_channels(a, b)));
    for (auto g : a->grad) CHECK(g == 1.0);
    for (auto g : b->grad) CHECK(g == 1.0);

    CHECK_THROWS_AS(concat_channels(a, Td::zeros({1, 2, 3, 4})), DimensionError);
}

TEST_CASE("avg_pool2 arithmetic and linearity") {
    auto x = Td::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(avg_pool2(x)->item() == doctest::Approx(2.5));

    auto c = Td::full({2, 3, 4, 6}, 1.75);
    auto p = avg_pool2(c);
    CHECK(p->shape == Shape{2, 3, 2, 3});
    for (auto v : p->values) CHECK(v == doctest::Approx(1.75));

    Rng rng(19);
    auto r = randn_d({1, 2, 6, 4}, rng);
    CHECK(sum_all(avg_pool2(r))->item() == doctest::Approx(sum_all(r)->item() / 4.0));

    CHECK_THROWS_AS(avg_pool2(Td::zeros({1, 1, 3, 4})), DimensionError);
}

TEST_CASE("dropout contract") {
    Rng rng(29);
    auto x = randn_d({1, 1, 100, 100}, rng);

    Rng drop_rng(99);
    auto ident = dropout(x, 0.0, true, drop_rng);
    for (std::int64_t i = 0; i < x->numel(); ++i) CHECK(ident->values[i] == x->values[i]);

    auto eval = dropout(x, 0.7, false, drop_rng);
    for (std::int64_t i = 0; i < x->numel(); ++i) CHECK(eval->values[i] == x->values[i]);

    auto ones = Td::ones({1, 1, 100, 100});
    Rng seeded(1234);
    auto dropped = dropout(ones, 0.5, true, seeded);
    std::int64_t survivors = 0;
    for (auto v : dropped->values) {
        if (v != 0.0) {
            CHECK(v == doctest::Approx(2.0));
            ++survivors;
        }
    }
    const double frac = static_cast<double>(survivors) / 10000.0;
    CHECK(frac > 0.48);
    CHECK(frac < 0.52);

    CHECK_THROWS_AS(dropout(x, 1.0, true, seeded), ConfigError);
    CHECK_THROWS_AS(dropout(x, -0.1, true, seeded), ConfigError);
}

TEST_CASE("grad_check closed cases") {
    Rng rng(41);
    // f = sum(x^2): analytic gradient 2x
    auto x = randn_d({3, 4}, rng);
    auto err = grad_check<double>(
        [](const std::vector<TensorPtr<double>>& in) { return sum_all(mul(in[0], in[0])); }, {x},
        1e-4);
    CHECK(err < 1e-6);

    // f = sum(conv2d(x, w))
    auto xc = randn_d({1, 2, 5, 5}, rng);
    auto wc = randn_d({3, 2, 3, 3}, rng);
    err = grad_check<double>(
        [](const std::vector<TensorPtr<double>>& in) {
            return sum_all(conv2d<double>(in[0], in[1], nullptr, 1, 1));
        },
        {xc, wc}, 1e-4);
    CHECK(err < 1e-4);

    // constant f: analytic gradient must be exactly zero
    auto xz = randn_d({4}, rng);
    auto czero = grad_check<double>(
        [](const std::vector<TensorPtr<double>>&) { return Td::from({1}, {3.25}); }, {xz}, 1e-4);
    CHECK(czero == 0.0);
    for (auto g : xz->grad) CHECK(g == 0.0);
}

TEST_CASE("finite-difference pass over every differentiable op") {
    Rng rng(43);
    auto shapes = Shape{2, 8, 8, 8};
    auto rand_small = [&](Shape s) { return randn_d(std::move(s), rng); };

    struct Case {
        const char* name;
        std::function<TensorPtr<double>(const std::vector<TensorPtr<double>>&)> f;
        std::vector<TensorPtr<double>> inputs;
        double tol;
    };
    std::vector<Case> cases;
    auto x = rand_small({2, 4, 6, 6});
    auto y = rand_small({2, 4, 6, 6});
    cases.push_back({"add", [](auto& in) { return sum_all(mul(add(in[0], in[1]), in[0])); }, {x, y}, 1e-4});
    cases.push_back({"sub", [](auto& in) { return sum_all(mul(sub(in[0], in[1]), in[1])); },
                     {rand_small({2, 4, 6, 6}), rand_small({2, 4, 6, 6})}, 1e-4});
    cases.push_back({"mul", [](auto& in) { return sum_all(mul(in[0], in[1])); },
                     {rand_small({2, 4, 6, 6}), rand_small({2, 4, 6, 6})}, 1e-4});
    cases.push_back({"sigmoid", [](auto& in) { return sum_all(mul(sigmoid(in[0]), in[0])); },
                     {rand_small({2, 3, 4, 4})}, 1e-4});
    cases.push_back({"tanh", [](auto& in) { return sum_all(mul(tanh_op(in[0]), in[0])); },
                     {rand_small({2, 3, 4, 4})}, 1e-4});
    cases.push_back({"softplus", [](auto& in) { return sum_all(softplus(in[0])); },
                     {rand_small({2, 3, 4, 4})}, 1e-4});
    cases.push_back({"relu", [](auto& in) { return sum_all(mul(relu(in[0]), in[0])); },
                     {add_scalar(rand_small({2, 3, 4, 4}), 0.37)}, 1e-4});
    cases.push_back({"leaky_relu", [](auto& in) { return sum_all(leaky_relu(in[0], 0.2)); },
                     {add_scalar(rand_small({2, 3, 4, 4}), 0.37)}, 1e-4});
    cases.push_back({"abs", [](auto& in) { return sum_all(abs_op(in[0])); },
                     {add_scalar(rand_small({2, 3, 4, 4}), 0.4)}, 1e-4});
    cases.push_back({"mean_all", [](auto& in) { return mean_all(mul(in[0], in[0])); },
                     {rand_small({2, 8, 8, 8})}, 1e-4});
    cases.push_back({"concat", [](auto& in) {
                         return sum_all(mul(concat_channels(in[0], in[1]),
                                            concat_channels(in[1], in[0])));
                     },
                     {rand_small({2, 4, 4, 4}), rand_small({2, 4, 4, 4})}, 1e-4});
    cases.push_back({"slice", [](auto& in) { return sum_all(mul(slice_channels(in[0], 1, 3),
                                                                slice_channels(in[0], 2, 4))); },
                     {rand_small({2, 5, 4, 4})}, 1e-4});
    cases.push_back({"avg_pool2", [](auto& in) { return sum_all(mul(avg_pool2(in[0]), avg_pool2(in[0]))); },
                     {rand_small({2, 3, 6, 6})}, 1e-4});
    cases.push_back({"tile2d", [](auto& in) { return sum_all(mul(tile2d(in[0], 2, 3), tile2d(in[0], 2, 3))); },
                     {rand_small({2, 3, 3, 2})}, 1e-4});
    cases.push_back({"global_avg_pool", [](auto& in) {
                         return sum_all(mul(global_avg_pool(in[0]), global_avg_pool(in[0])));
                     },
                     {rand_small({2, 5, 4, 4})}, 1e-4});
    cases.push_back({"broadcast_batch", [](auto& in) {
                         return sum_all(mul(broadcast_batch(in[0], 3), broadcast_batch(in[0], 3)));
                     },
                     {rand_small({1, 3, 4, 4})}, 1e-4});
    cases.push_back({"conv2d", [](auto& in) {
                         return sum_all(mul(conv2d<double>(in[0], in[1], in[2], 2, 1),
                                            conv2d<double>(in[0], in[1], in[2], 2, 1)));
                     },
                     {rand_small({2, 3, 6, 6}), rand_small({4, 3, 3, 3}), rand_small({4})}, 1e-4});
    cases.push_back({"deconv2d", [](auto& in) {
                         return sum_all(mul(deconv2d<double>(in[0], in[1], in[2], 2, 1),
                                            deconv2d<double>(in[0], in[1], in[2], 2, 1)));
                     },
                     {rand_small({2, 3, 4, 4}), rand_small({3, 2, 4, 4}), rand_small({2})}, 1e-4});

    for (auto& c : cases) {
        INFO(c.name);
        CHECK(grad_check<double>(c.f, c.inputs, 1e-4) < c.tol);
    }
}

TEST_CASE("backward is single-use and gradients accumulate across graphs") {
    Rng rng(47);
    auto x = randn_d({4}, rng);
    x->requires_grad = true;

    auto loss = sum_all(mul(x, x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), ApsError);

    std::vector<double> after_one = x->grad;
    backward(sum_all(mul(x, x)));
    for (std::int64_t i = 0; i < 4; ++i)
        CHECK(x->grad[i] == doctest::Approx(2.0 * after_one[i]));

    x->zero_grad();
    for (auto g : x->grad) CHECK(g == 0.0);

    auto nondep = Td::from({1}, {1.0});
    CHECK_THROWS_AS(backward(nondep), ApsError);
    auto vecloss = mul(x, x);
    CHECK_THROWS_AS(backward(vecloss), DimensionError);
}

TEST_CASE("no-grad mode skips graph construction") {
    Rng rng(53);
    auto x = randn_d({2, 2}, rng);
    x->requires_grad = true;
    {
        autograd::NoGradGuard ng;
        auto y = mul(x, x);
        CHECK_FALSE(y->requires_grad);
        CHECK(y->parents.empty());
    }
    auto y = mul(x, x);
    CHECK(y->requires_grad);
}

TEST_CASE("float engine runs the same kernels") {
    Rng rng(59);
    auto x = Tf::randn({2, 3, 8, 8}, rng);
    auto w = Tf::randn({4, 3, 3, 3}, rng, 0.0f, 0.02f);
    auto y = conv2d<float>(x, w, nullptr, 1, 1);
    CHECK(y->shape == Shape{2, 4, 8, 8});
    std::vector<double> xd(x->values.begin(), x->values.end());
    std::vector<double> wd(w->values.begin(), w->values.end());
    auto ref = oracle::conv2d(xd, 2, 3, 8, 8, wd, 4, 3, 3, {}, 1, 1);
    for (std::int64_t i = 0; i < y->numel(); ++i)
        CHECK(static_cast<double>(y->values[i]) == doctest::Approx(ref[i]).epsilon(1e-4));
}
