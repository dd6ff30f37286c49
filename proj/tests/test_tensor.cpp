#include "dirmag/errors.hpp"
#include "dirmag/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace dirmag;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(-2.0f, 2.0f);
    Tensor t({r, c});
    for (float& v : t.data()) v = u(rng);
    return t;
}

} // namespace

TEST(TensorShape, ProductMustMatchData) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
    Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(TensorShape, RejectsZeroExtent) { EXPECT_THROW(Tensor({2, 0}), DimensionError); }

TEST(Matmul, IdentityTimesMatrix) {
    const Tensor id = Tensor::from_rows({{1, 0}, {0, 1}});
    const Tensor m = Tensor::from_rows({{3, 4}, {5, 6}});
    EXPECT_EQ(matmul(id, m), m);
}

TEST(Matmul, RowTimesColumn) {
    const Tensor r = matmul(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3}, {4}}));
    ASSERT_EQ(r.shape(), (std::vector<std::size_t>{1, 1}));
    EXPECT_FLOAT_EQ(r[0], 11.0f);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    std::mt19937_64 rng(11);
    for (std::size_t n : {4u, 8u}) {
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
            const Tensor c = matmul(a, b);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    double ref = 0.0;
                    for (std::size_t k = 0; k < n; ++k) ref += static_cast<double>(a(i, k)) * b(k, j);
                    // Storage is float32: the double sum rounded once to float.
                    const double stored = static_cast<float>(ref);
                    EXPECT_LE(std::fabs(c(i, j) - stored), 1e-9 * std::fabs(stored));
                    EXPECT_LE(std::fabs(c(i, j) - ref), 1e-7 * std::max(1e-30, std::fabs(ref)));
                }
            }
        }
    }
}

TEST(Softmax, SymmetricRow) {
    const Tensor s = softmax_rows(Tensor::from_rows({{0, 0}}));
    EXPECT_FLOAT_EQ(s[0], 0.5f);
    EXPECT_FLOAT_EQ(s[1], 0.5f);
}

TEST(Softmax, LargeEqualLogitsDoNotOverflow) {
    const Tensor s = softmax_rows(Tensor::from_rows({{1000, 1000}}));
    EXPECT_FLOAT_EQ(s[0], 0.5f);
    EXPECT_FLOAT_EQ(s[1], 0.5f);
}

TEST(Softmax, LogThreeGivesQuarterAndThreeQuarters) {
    const Tensor s = softmax_rows(Tensor::from_rows({{0.0f, static_cast<float>(std::log(3.0))}}));
    EXPECT_NEAR(s[0], 0.25, 1e-7);
    EXPECT_NEAR(s[1], 0.75, 1e-7);
}

TEST(Softmax, RowsSumToOneForExtremeInputs) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-1e4f, 1e4f);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor x({3, 17});
        for (float& v : x.data()) v = u(rng);
        const Tensor s = softmax_rows(x);
        for (std::size_t r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (float v : s.row(r)) {
                EXPECT_GE(v, 0.0f);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
        EXPECT_TRUE(all_finite(s.data()));
    }
}

TEST(L2Norm, Examples) {
    EXPECT_DOUBLE_EQ(l2_norm(std::vector<double>{3, 4}), 5.0);
    EXPECT_DOUBLE_EQ(l2_norm(std::vector<double>{0, 0, 0}), 0.0);
    EXPECT_DOUBLE_EQ(l2_norm(std::vector<double>{1, 1, 1, 1}), 2.0);
    const std::vector<float> f = {3.0f, 4.0f};
    EXPECT_DOUBLE_EQ(l2_norm(std::span<const float>(f)), 5.0);
}

TEST(L2Norm, AbsoluteHomogeneity) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> v(1 + trial % 40);
        for (double& x : v) x = n(rng);
        const double alpha = n(rng);
        std::vector<double> scaled = v;
        for (double& x : scaled) x *= alpha;
        const double expect = std::fabs(alpha) * l2_norm(v);
        EXPECT_NEAR(l2_norm(scaled), expect, 1e-9 * std::max(1e-300, expect));
    }
}

TEST(LayerNorm, TwoElementExample) {
    const std::vector<float> v = {1, 3}, g = {1, 1}, b = {0, 0};
    const auto out = layer_norm(v, g, b, 0.0);
    EXPECT_NEAR(out[0], -1.0, 1e-7);
    EXPECT_NEAR(out[1], 1.0, 1e-7);
}

TEST(LayerNorm, ConstantVectorWithEpsIsZero) {
    const std::vector<float> v = {2.5f, 2.5f, 2.5f}, g = {1, 1, 1}, b = {0, 0, 0};
    for (float x : layer_norm(v, g, b, 1e-5)) EXPECT_EQ(x, 0.0f);
}

TEST(LayerNorm, ThreeElementExample) {
    const std::vector<float> v = {0, 2, 4}, g = {1, 1, 1}, b = {0, 0, 0};
    const auto out = layer_norm(v, g, b, 0.0);
    EXPECT_NEAR(out[0], -1.2247, 1e-4);
    EXPECT_NEAR(out[1], 0.0, 1e-7);
    EXPECT_NEAR(out[2], 1.2247, 1e-4);
}

TEST(LayerNorm, GainAndBiasApplyElementwise) {
    const std::vector<float> v = {1, 3}, g = {2, 3}, b = {0.5f, -1};
    const auto out = layer_norm(v, g, b, 0.0);
    EXPECT_NEAR(out[0], -2.0 + 0.5, 1e-6);
    EXPECT_NEAR(out[1], 3.0 - 1.0, 1e-6);
}

TEST(LayerNorm, ZeroMeanUnitVarianceForNonConstantInput) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(5.0, 4.0);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t d = 2 + trial % 50;
        std::vector<double> v(d), g(d, 1.0), b(d, 0.0);
        for (double& x : v) x = n(rng);
        const auto out = layer_norm(std::span<const double>(v), g, b, 0.0);
        double mean = 0.0;
        for (double x : out) mean += x;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double x : out) var += (x - mean) * (x - mean);
        var /= static_cast<double>(d);
        EXPECT_LE(std::fabs(mean), 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-6);
    }
}

TEST(LayerNorm, FloatKernelIsOneRoundingOfDoubleKernel) {
    std::mt19937_64 rng(10);
    std::normal_distribution<float> n(0.0f, 3.0f);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 2 + trial % 30;
        std::vector<float> v(d), g(d), b(d);
        for (float& x : v) x = n(rng);
        for (float& x : g) x = n(rng);
        for (float& x : b) x = n(rng);
        const auto f = layer_norm(v, g, b, 1e-5);
        const std::vector<double> vd(v.begin(), v.end()), gd(g.begin(), g.end()), bd(b.begin(), b.end());
        const auto dbl = layer_norm(std::span<const double>(vd), gd, bd, 1e-5);
        for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(f[i], static_cast<float>(dbl[i]));
        const auto rf = rms_norm(v, g, 1e-5);
        const auto rd = rms_norm(std::span<const double>(vd), gd, 1e-5);
        for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(rf[i], static_cast<float>(rd[i]));
    }
}

TEST(LayerNorm, RejectsSingleElement) {
    const std::vector<float> v = {1}, g = {1}, b = {0};
    EXPECT_THROW(layer_norm(v, g, b, 1e-5), DimensionError);
}

TEST(RmsNorm, ThreeFourExample) {
    const std::vector<float> v = {3, 4}, g = {1, 1};
    const auto out = rms_norm(v, g, 0.0);
    EXPECT_NEAR(out[0], 0.8485, 1e-4);
    EXPECT_NEAR(out[1], 1.1314, 1e-4);
}

TEST(RmsNorm, ConstantVectorGivesSign) {
    const std::vector<float> g(5, 1.0f);
    for (float c : {3.5f, -0.25f}) {
        const std::vector<float> v(5, c);
        for (float x : rms_norm(v, g, 0.0)) EXPECT_FLOAT_EQ(x, c > 0 ? 1.0f : -1.0f);
    }
}

TEST(RmsNorm, ZeroVectorStaysZero) {
    const std::vector<float> v(4, 0.0f), g(4, 1.0f);
    for (float x : rms_norm(v, g, 1e-5)) EXPECT_EQ(x, 0.0f);
}

TEST(RmsNorm, NoMeanSubtraction) {
    const std::vector<float> v = {1, 2, 3}, shifted = {11, 12, 13}, g = {1, 1, 1};
    const auto a = rms_norm(v, g, 0.0), b = rms_norm(shifted, g, 0.0);
    EXPECT_GT(std::fabs(a[0] - b[0]), 0.1);
}

TEST(Gelu, ExactErfForm) {
    for (double x : {-3.0, -1.0, -0.1, 0.0, 0.5, 2.0}) {
        const double ref = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
        EXPECT_NEAR(gelu(static_cast<float>(x)), ref, 1e-6);
    }
}

TEST(Elementwise, AddRequiresSameShape) {
    EXPECT_THROW(add(Tensor({2, 2}), Tensor({4})), DimensionError);
    const Tensor s = add(Tensor::from_rows({{1, 2}}), Tensor::from_rows({{3, 4}}));
    EXPECT_EQ(s, Tensor::from_rows({{4, 6}}));
}
