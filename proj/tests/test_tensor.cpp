#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mvheat/gradcheck.hpp"
#include "mvheat/heat.hpp"
#include "mvheat/ops.hpp"

using namespace mvheat;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = d(rng);
    return T64(std::move(shape), std::move(v));
}

std::vector<double> naive_matmul(const T64& a, const T64& b) {
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
    return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    T64 a({2, 2}, {1, 2, 3, 4});
    T64 id({2, 2}, {1, 0, 0, 1});
    auto y = matmul(a, id);
    EXPECT_EQ(y.values(), (std::vector<double>{1, 2, 3, 4}));
    auto z = matmul(id, a);
    EXPECT_EQ(z.values(), a.values());
}

TEST(Matmul, ColumnVectorMatchesTripleLoop) {
    T64 a({2, 2}, {1, 2, 3, 4});
    T64 b({2, 1}, {5, 6});
    auto y = matmul(a, b);
    EXPECT_EQ(y.shape(), (Shape{2, 1}));
    EXPECT_EQ(y.values(), naive_matmul(a, b));
    EXPECT_EQ(y.values(), (std::vector<double>{17, 39}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    T64 a({2, 3}, std::vector<double>(6, 1.0));
    T64 b({2, 2}, std::vector<double>(4, 1.0));
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[2x2]"), std::string::npos);
    }
}

TEST(Matmul, RandomAgreesWithTripleLoop) {
    std::mt19937_64 rng(3);
    for (int s = 0; s < 10; ++s) {
        auto a = random_tensor({4, 7}, rng);
        auto b = random_tensor({7, 5}, rng);
        auto y = matmul(a, b);
        auto ref = naive_matmul(a, b);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
}

TEST(DepthwiseConv, DeltaKernelIsIdentity) {
    T64 x({1, 3, 3, 1}, std::vector<double>(9, 1.0));
    std::vector<double> k(9, 0.0);
    k[4] = 1.0;
    auto y = depthwise_conv2d(x, T64({3, 3, 1}, k), T64(), 1, 1);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y.values(), x.values());
}

TEST(DepthwiseConv, AveragingKernelPreservesConstantInterior) {
    const double c = 2.5;
    T64 x({1, 5, 5, 2}, std::vector<double>(50, c));
    auto y = depthwise_conv2d(x, T64({3, 3, 2}, std::vector<double>(18, 1.0 / 9.0)), T64(), 1, 1);
    for (std::size_t i = 1; i < 4; ++i)
        for (std::size_t j = 1; j < 4; ++j)
            for (std::size_t ch = 0; ch < 2; ++ch) EXPECT_NEAR(y[((i * 5) + j) * 2 + ch], c, 1e-12);
}

TEST(DepthwiseConv, RampWithBoxKernelMatchesNestedLoops) {
    std::vector<double> ramp(16);
    for (std::size_t i = 0; i < 16; ++i) ramp[i] = double(i);
    T64 x({1, 4, 4, 1}, ramp);
    for (std::size_t pad : {0u, 1u}) {
        auto y = depthwise_conv2d(x, T64({3, 3, 1}, std::vector<double>(9, 1.0)), T64(), 1, pad);
        const std::size_t out = 4 + 2 * pad - 2;
        ASSERT_EQ(y.shape(), (Shape{1, out, out, 1}));
        for (std::size_t oy = 0; oy < out; ++oy)
            for (std::size_t ox = 0; ox < out; ++ox) {
                double ref = 0;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const int iy = int(oy) + ky - int(pad), ix = int(ox) + kx - int(pad);
                        if (iy >= 0 && iy < 4 && ix >= 0 && ix < 4) ref += ramp[iy * 4 + ix];
                    }
                EXPECT_DOUBLE_EQ(y[oy * out + ox], ref);
            }
    }
}

TEST(DepthwiseConv, OutputExtentFormulaAndErrors) {
    T64 x({1, 7, 7, 1}, std::vector<double>(49, 1.0));
    auto y = depthwise_conv2d(x, T64({3, 3, 1}, std::vector<double>(9, 1.0)), T64(), 2, 1);
    EXPECT_EQ(y.dim(1), (7 + 2 - 3) / 2 + 1);
    T64 tiny({1, 1, 1, 1}, {1.0});
    EXPECT_THROW(depthwise_conv2d(tiny, T64({5, 5, 1}, std::vector<double>(25, 1.0)), T64(), 1, 0), ConfigError);
    EXPECT_THROW(depthwise_conv2d(x, T64({2, 2, 1}, std::vector<double>(4, 1.0)), T64(), 1, 0), ConfigError);
}

TEST(Elementwise, ClosedFormValues) {
    T64 zeros({3}, {0, 0, 0});
    for (auto v : exp(zeros).to_vector()) EXPECT_DOUBLE_EQ(v, 1.0);
    for (auto v : softplus(zeros).to_vector()) EXPECT_NEAR(v, std::log(2.0), 1e-15);
    for (auto v : sigmoid(T64({2}, {40.0, 1e3})).to_vector()) EXPECT_NEAR(v, 1.0, 1e-6);
    auto g = gelu(T64({3}, {0.0, 1.0, -1.0}));
    EXPECT_DOUBLE_EQ(g[0], 0.0);
    EXPECT_NEAR(g[1], 0.8413447460685429, 1e-12);
    EXPECT_NEAR(g[2], -0.15865525393145707, 1e-12);
    T64 b({3}, {1, 2, 3});
    EXPECT_EQ(elementwise(zeros, Elementwise::add, &b).values(), b.values());
    EXPECT_THROW(elementwise(zeros, Elementwise::mul, nullptr), DimensionError);
    EXPECT_THROW(add(zeros, T64({2}, {1, 2})), DimensionError);
}

TEST(LayerNorm, ExamplesFromDefinition) {
    T64 ones_g({2}, {1, 1}), zero_b({2}, {0, 0});
    auto y = layer_norm(T64({1, 2}, {3.0, 3.0}), ones_g, zero_b);
    EXPECT_DOUBLE_EQ(y[0], 0.0);
    EXPECT_DOUBLE_EQ(y[1], 0.0);

    auto z = layer_norm(T64({1, 2}, {1.0, -1.0}), ones_g, zero_b);
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    EXPECT_NEAR(z[0], expect, 1e-12);
    EXPECT_NEAR(z[1], -expect, 1e-12);

    auto c = layer_norm(T64({2, 2}, {1.0, 7.0, -2.0, 4.0}), T64({2}, {0, 0}), T64({2}, {5, 5}));
    for (auto v : c.data()) EXPECT_DOUBLE_EQ(v, 5.0);
    EXPECT_THROW(layer_norm(T64({1, 2}, {1.0, 2.0}), ones_g, zero_b, 0.0), ConfigError);
}

TEST(LayerNorm, NormalizedRowsHaveZeroMeanUnitVariance) {
    std::mt19937_64 rng(11);
    auto x = random_tensor({6, 16}, rng, -3.0, 5.0);
    auto y = layer_norm(x, T64::full({16}, 1.0), T64::full({16}, 0.0));
    for (std::size_t r = 0; r < 6; ++r) {
        double m = 0, v = 0;
        for (std::size_t i = 0; i < 16; ++i) m += y[r * 16 + i];
        m /= 16;
        for (std::size_t i = 0; i < 16; ++i) v += (y[r * 16 + i] - m) * (y[r * 16 + i] - m);
        v /= 16;
        EXPECT_NEAR(m, 0.0, 1e-6);
        EXPECT_NEAR(v, 1.0, 1e-5);
    }
}

TEST(GradCheck, LinearMapIsExact) {
    std::mt19937_64 rng(1);
    auto w = random_tensor({5, 3}, rng);
    auto rep = grad_check("linear", [&](const T64& x) { return matmul(x, w); }, random_tensor({4, 5}, rng),
                          {.tolerance = 1e-9});
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(GradCheck, GeluAtRandomPoints) {
    std::mt19937_64 rng(2);
    auto rep = grad_check("gelu", [](const T64& x) { return gelu(x); }, random_tensor({32}, rng, -3.0, 3.0));
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(GradCheck, DctMultiplierIdctChain) {
    std::mt19937_64 rng(4);
    const auto grid = FrequencyGrid::make(8, 8, FrequencyConvention::cosine);
    auto k = random_tensor({8, 8}, rng, 0.0, 1.0);
    T64 kleaf(k.shape(), k.values(), true);
    T64 xleaf = random_tensor({8, 8}, rng);
    xleaf = T64(xleaf.shape(), xleaf.values(), true);
    auto rep = grad_check(
        "dct-heat-idct", [&] { return idct2(mul_spatial(dct2(xleaf), heat_multiplier(kleaf, 1.0, grid), Layout::planar)); },
        {xleaf, kleaf});
    EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(GradCheck, NonFiniteGradientIsReportedByName) {
    auto rep = grad_check("sqrt-at-zero",
                          [](const T64& x) {
                              return detail::unary<double>(
                                  x, "bad", [](double v) { return v; },
                                  [](double, double) { return std::numeric_limits<double>::infinity(); });
                          },
                          T64({2}, {0.5, 0.25}));
    EXPECT_FALSE(rep.passed());
    EXPECT_FALSE(rep.finite);
    EXPECT_NE(rep.message.find("sqrt-at-zero"), std::string::npos);
}

TEST(GradCheck, CorruptionHookFails) {
    std::mt19937_64 rng(5);
    auto rep = grad_check("exp", [](const T64& x) { return exp(x); }, random_tensor({6}, rng), {.corrupt = 0.01});
    EXPECT_FALSE(rep.passed());
}

// Every registered primitive, 20 seeds, magnitude <= 1.
TEST(GradCheckProperty, AllPrimitivesAgreeWithCentralDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(100 + seed);
        auto x4 = random_tensor({2, 5, 5, 3}, rng);
        auto other = random_tensor({2, 5, 5, 3}, rng);
        auto w_lin = random_tensor({3, 4}, rng);
        auto b_lin = random_tensor({4}, rng);
        auto w_conv = random_tensor({3, 3, 3, 2}, rng);
        auto w_dw = random_tensor({3, 3, 3}, rng);
        auto gamma = random_tensor({3}, rng);
        auto beta = random_tensor({3}, rng);
        std::vector<std::pair<std::string, std::function<T64(const T64&)>>> ops = {
            {"add", [&](const T64& x) { return add(x, other); }},
            {"sub", [&](const T64& x) { return sub(other, x); }},
            {"mul", [&](const T64& x) { return mul(x, x); }},
            {"exp", [](const T64& x) { return exp(x); }},
            {"sigmoid", [](const T64& x) { return sigmoid(x); }},
            {"gelu", [](const T64& x) { return gelu(x); }},
            {"softplus", [](const T64& x) { return softplus(x); }},
            {"add_bias", [&](const T64& x) { return add_bias(x, gamma); }},
            {"linear", [&](const T64& x) { return linear(x, w_lin, b_lin); }},
            {"layer_norm", [&](const T64& x) { return layer_norm(x, gamma, beta); }},
            {"conv2d", [&](const T64& x) { return conv2d(x, w_conv, T64(), 2, 1); }},
            {"depthwise_conv2d", [&](const T64& x) { return depthwise_conv2d(x, w_dw, T64(), 1, 1); }},
            {"mean_spatial", [](const T64& x) { return mean_spatial(x); }},
            {"softmax_rows", [](const T64& x) { return softmax_rows(x); }},
            {"pad_crop", [](const T64& x) { return crop_spatial(pad_spatial(x, Layout::channels_last, 8, 8), Layout::channels_last, 4, 4); }},
        };
        for (auto& [name, op] : ops) {
            auto rep = grad_check(name, op, x4);
            EXPECT_TRUE(rep.passed()) << name << " seed " << seed << " err " << rep.max_rel_error;
        }
        // parameter-side gradients
        T64 wl(w_lin.shape(), w_lin.values(), true), bl(b_lin.shape(), b_lin.values(), true);
        auto rep = grad_check("linear.params", [&] { return linear(x4, wl, bl); }, {wl, bl});
        EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
        T64 wc(w_conv.shape(), w_conv.values(), true);
        rep = grad_check("conv2d.weight", [&] { return conv2d(x4, wc, T64(), 1, 1); }, {wc});
        EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
        T64 wd(w_dw.shape(), w_dw.values(), true), bd(gamma.shape(), gamma.values(), true);
        rep = grad_check("depthwise.params", [&] { return depthwise_conv2d(x4, wd, bd, 2, 1); }, {wd, bd});
        EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
        T64 g(gamma.shape(), gamma.values(), true), b(beta.shape(), beta.values(), true);
        rep = grad_check("layer_norm.affine", [&] { return layer_norm(x4, g, b); }, {g, b});
        EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
        auto m = random_tensor({4, 3}, rng);
        rep = grad_check("matmul", [&](const T64& x) { return matmul(m, x); }, random_tensor({3, 5}, rng));
        EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
        rep = grad_check("windows", [](const T64& x) { return from_windows(scale(to_windows(x, 2), 3.0), 2, 4, 4); },
                         random_tensor({2, 4, 4, 3}, rng));
        EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
        rep = grad_check("rows", [](const T64& x) {
            return slice_cols(gather_rows(concat_rows<double>({x, scale(x, 2.0)}), {0, 3, 5, 5}), 1, 3);
        }, random_tensor({3, 4}, rng));
        EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
    }
}

TEST(Tape, BackwardOfSumEqualsSumOfBackwards) {
    std::mt19937_64 rng(9);
    Parameter<double> w("w", {3, 3}, random_tensor({3, 3}, rng).values());
    auto x = random_tensor({4, 3}, rng);
    auto loss_a = [&] { return sum(gelu(linear(x, w.tensor(), T64()))); };
    auto loss_b = [&] { return sum(mul(linear(x, w.tensor(), T64()), linear(x, w.tensor(), T64()))); };

    w.zero_grad();
    loss_a().backward();
    std::vector<double> ga(w.gradient().begin(), w.gradient().end());
    w.zero_grad();
    loss_b().backward();
    std::vector<double> gb(w.gradient().begin(), w.gradient().end());
    w.zero_grad();
    add(loss_a(), loss_b()).backward();
    for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(w.gradient()[i], ga[i] + gb[i], 1e-12);
}

TEST(Tape, RepeatedPassesGiveBitIdenticalGradients) {
    std::mt19937_64 rng(10);
    Parameter<double> w("w", {3, 3, 2, 4}, random_tensor({3, 3, 2, 4}, rng).values());
    auto x = random_tensor({2, 6, 6, 2}, rng);
    auto run = [&] {
        w.zero_grad();
        sum(softplus(conv2d(x, w.tensor(), T64(), 1, 1))).backward();
        return std::vector<double>(w.gradient().begin(), w.gradient().end());
    };
    auto first = run();
    auto second = run();
    EXPECT_EQ(first, second);
}

TEST(Tape, GradientsAccumulateUntilZeroed) {
    Parameter<double> p("p", {2}, std::vector<double>{1.0, 2.0});
    sum(p.tensor()).backward();
    sum(p.tensor()).backward();
    EXPECT_EQ(p.gradient()[0], 2.0);
    p.zero_grad();
    EXPECT_EQ(p.gradient()[1], 0.0);
    EXPECT_EQ(p.gradient().size(), p.value().size());
}

TEST(Tape, NoGradGuardSkipsRecording) {
    Parameter<double> p("p", {2}, 1.0);
    NoGradGuard guard;
    auto y = exp(p.tensor());
    EXPECT_FALSE(y.requires_grad());
}
