// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deltamoe/gradcheck.hpp"
#include "deltamoe/ops.hpp"
#include "test_util.hpp"

namespace deltamoe {
namespace {

using testing::random_tensor;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tape<float> t(false);
    auto i2 = t.leaf(Tensor<float>::matrix({{1, 0}, {0, 1}}));
    auto a = Tensor<float>::matrix({{3, -1}, {2.5f, 7}});
    EXPECT_TRUE(t.value(matmul(t, i2, t.leaf(a))).bit_equal(a));
}

TEST(Matmul, HandExample) {
    Tape<float> t(false);
    auto c = matmul(t, t.leaf(Tensor<float>::matrix({{1, 2}, {3, 4}})), t.leaf(Tensor<float>::matrix({{0}, {1}})));
    EXPECT_EQ(t.value(c).shape(), (Shape{2, 1}));
    EXPECT_EQ(t.value(c)[0], 2.0f);
    EXPECT_EQ(t.value(c)[1], 4.0f);
}

TEST(Matmul, DimensionMismatchIsShapeError) {
    Tape<float> t(false);
    auto a = t.leaf(Tensor<float>::zeros({2, 3}));
    auto b = t.leaf(Tensor<float>::zeros({2, 3}));
    EXPECT_THROW(matmul(t, a, b), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 g(3);
    for (auto [m, k, n] : {std::tuple{1, 1, 1}, {5, 7, 3}, {17, 4, 9}, {64, 64, 128}}) {
        auto a = random_tensor<double>({std::size_t(m), std::size_t(k)}, g);
        auto b = random_tensor<double>({std::size_t(k), std::size_t(n)}, g);
        Tape<double> t(false);
        auto c = t.value(matmul(t, t.leaf(a), t.leaf(b)));
        EXPECT_LE(max_abs_diff(c, testing::naive_matmul(a, b)), 1e-12);
    }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
    std::mt19937_64 g(5);
    auto a = random_tensor<float>({5, 7}, g);
    auto b = random_tensor<float>({7, 3}, g);
    Tape<float> t;
    auto va = t.leaf(a, true);
    auto vb = t.leaf(b, true);
    t.backward(sum(t, matmul(t, va, vb)));
    const auto& ga = t.grad_ref(va);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t p = 0; p < 7; ++p) {
            float want = 0;
            for (std::size_t j = 0; j < 3; ++j) want += b.at(p, j);
            EXPECT_NEAR(ga.at(i, p), want, 1e-5f);
        }
    }
}

template <typename T>
double matmul_sum_fd(double eps) {
    std::mt19937_64 g(5);
    ParamStore<T> ps;
    ps.insert("a", random_tensor<T>({5, 7}, g));
    ps.insert("b", random_tensor<T>({7, 3}, g));
    ProbeFn<T> fn = [](Tape<T>& t, const Bound& p) { return Probe<T>{sum(t, matmul(t, p("a"), p("b"))), {}}; };
    GradCheckOptions o;
    o.eps = eps;
    return grad_check(fn, ps, {"a"}, o).max_rel_error;
}

TEST(Matmul, FiniteDifferenceAgreesInBothPrecisions) {
    EXPECT_LE(matmul_sum_fd<float>(1e-2), 1e-3);
    EXPECT_LE(matmul_sum_fd<double>(1e-4), 1e-6);
}

TEST(Silu, KnownValues) {
    Tape<double> t(false);
    auto y = t.value(silu(t, t.leaf(Tensor<double>({3}, {0.0, 10.0, 1.0}))));
    EXPECT_EQ(y[0], 0.0);
    EXPECT_LT(std::abs(y[1] - 10.0), 5e-4);
    EXPECT_NEAR(y[2], 0.731059, 1e-5);
}

TEST(Silu, FiniteForExtremeInputs) {
    Tape<float> t(false);
    auto y = t.value(silu(t, t.leaf(Tensor<float>({4}, {-1e30f, 1e30f, -88.f, 88.f}))));
    EXPECT_TRUE(y.all_finite());
    EXPECT_EQ(y[0], -0.0f);
}

TEST(Softmax, UniformForEqualLogits) {
    Tape<double> t(false);
    auto p = t.value(softmax(t, t.leaf(Tensor<double>::zeros({1, 4}))));
    for (double v : p.data()) EXPECT_EQ(v, 0.25);
}

TEST(Softmax, HandNormalizedExample) {
    Tape<double> t(false);
    auto p = t.value(softmax(t, t.leaf(Tensor<double>({1, 4}, {std::log(5.0), std::log(3.0), 0, 0}))));
    const double want[] = {0.5, 0.3, 0.1, 0.1};
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(p[i], want[i], 1e-6);
}

TEST(Softmax, ShiftInvariantRowsArePositiveAndSumToOne) {
    std::mt19937_64 g(9);
    for (int trial = 0; trial < 50; ++trial) {
        auto z = random_tensor<float>({3, 11}, g, 5.0);
        const float c = static_cast<float>(std::uniform_real_distribution<>(-30, 30)(g));
        auto zc = z;
        for (auto& v : zc.data()) v += c;
        Tape<float> t(false);
        auto p = t.value(softmax(t, t.leaf(z)));
        auto pc = t.value(softmax(t, t.leaf(zc)));
        EXPECT_LE(max_abs_diff(p, pc), 1e-7f * 8);
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < 11; ++j) {
                EXPECT_GT(p.at(r, j), 0.0f);
                s += p.at(r, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Softmax, ShiftInvarianceWithinOneE7InBinary64) {
    std::mt19937_64 g(10);
    auto z = random_tensor<double>({4, 9}, g, 3.0);
    auto zc = z;
    for (auto& v : zc.data()) v += 12.5;
    Tape<double> t(false);
    EXPECT_LE(max_abs_diff(t.value(softmax(t, t.leaf(z))), t.value(softmax(t, t.leaf(zc)))), 1e-7);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
    Tape<double> t(false);
    std::vector<TokenId> targets{0, 5, 271};
    auto l = cross_entropy(t, t.leaf(Tensor<double>::zeros({3, 272})), std::span<const TokenId>(targets));
    EXPECT_DOUBLE_EQ(t.value(l)[0], std::log(272.0));
}

TEST(CrossEntropy, SaturatedTrueClass) {
    Tape<double> t(false);
    Tensor<double> z({1, 8});
    z[7] = 20.0;
    std::vector<TokenId> target{7};
    auto l = cross_entropy(t, t.leaf(z), std::span<const TokenId>(target));
    EXPECT_LT(t.value(l)[0], 1e-6 * 8);
    EXPECT_GE(t.value(l)[0], 0.0);
}

TEST(CrossEntropy, HandExample) {
    Tape<double> t(false);
    std::vector<TokenId> target{1};
    auto l = cross_entropy(t, t.leaf(Tensor<double>({1, 4}, {std::log(5.0), std::log(3.0), 0, 0})),
                           std::span<const TokenId>(target));
    EXPECT_NEAR(t.value(l)[0], 1.20397, 1e-4);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
    Tape<double> t(false);
    std::vector<TokenId> target{4};
    EXPECT_THROW(cross_entropy(t, t.leaf(Tensor<double>::zeros({1, 4})), std::span<const TokenId>(target)), IndexError);
    target[0] = -1;
    EXPECT_THROW(cross_entropy(t, t.leaf(Tensor<double>::zeros({1, 4})), std::span<const TokenId>(target)), IndexError);
}

TEST(TopK, DistinctMaxima) {
    std::vector<double> p{0.5, 0.3, 0.1, 0.1};
    EXPECT_EQ(topk(std::span<const double>(p), 2), (std::vector<std::size_t>{0, 1}));
}

TEST(TopK, TiesGoToLowestIndex) {
    std::vector<double> p(4, 0.25);
    EXPECT_EQ(topk(std::span<const double>(p), 2), (std::vector<std::size_t>{0, 1}));
    std::vector<double> q{0.1, 0.3, 0.3, 0.3};
    EXPECT_EQ(topk(std::span<const double>(q), 2), (std::vector<std::size_t>{1, 2}));
}

TEST(TopK, MatchesFullSortOracle) {
    std::mt19937_64 g(21);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + g() % 12;
        const std::size_t k = 1 + g() % n;
        std::vector<float> p(n);
        // Coarse values force frequent ties.
        for (auto& v : p) v = static_cast<float>(g() % 5) / 4.0f;
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
        idx.resize(k);
        auto got = topk(std::span<const float>(p), k);
        std::sort(got.begin(), got.end());
        std::sort(idx.begin(), idx.end());
        EXPECT_EQ(got, idx);
    }
}

TEST(TopK, KOutOfRangeIsArgumentError) {
    std::vector<double> p{0.5, 0.5};
    EXPECT_THROW(topk(std::span<const double>(p), 0), ArgumentError);
    EXPECT_THROW(topk(std::span<const double>(p), 3), ArgumentError);
}

TEST(GradCheck, SumOfSquaresIsExact) {
    std::mt19937_64 g(1);
    ParamStore<double> ps;
    ps.insert("w", random_tensor<double>({4, 6}, g));
    ProbeFn<double> fn = [](Tape<double>& t, const Bound& p) { return Probe<double>{sum_squares(t, p("w")), {}}; };
    auto r = grad_check(fn, ps);
    EXPECT_EQ(r.checked, 24u);
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, NonFiniteLossIsNumericError) {
    ParamStore<double> ps;
    ps.insert("w", Tensor<double>::full({2}, 1e200));
    ProbeFn<double> fn = [](Tape<double>& t, const Bound& p) { return Probe<double>{sum_squares(t, p("w")), {}}; };
    EXPECT_THROW(grad_check(fn, ps), NumericError);
}

// Every differentiable kernel, randomized, binary64.
class KernelGradients : public ::testing::Test {
protected:
    std::mt19937_64 g{77};
    ParamStore<double> ps;

    double check(const ProbeFn<double>& fn) { return grad_check(fn, ps).max_rel_error; }

    // Random linear functional so the loss has no special symmetry.
    Var project(Tape<double>& t, Var y) {
        const auto n = t.value(y).size();
        if (!coeffs_.count(n)) {
            std::vector<double> c(n);
            for (auto& v : c) v = std::normal_distribution<>(0, 1)(g);
            coeffs_[n] = c;
        }
        return dot_const(t, y, std::span<const double>(coeffs_[n]));
    }

private:
    std::map<std::size_t, std::vector<double>> coeffs_;
};

TEST_F(KernelGradients, Elementwise) {
    ps.insert("a", random_tensor<double>({3, 5}, g));
    ps.insert("b", random_tensor<double>({3, 5}, g));
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{project(t, add(t, p("a"), p("b"))), {}}; }), 1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{project(t, mul(t, p("a"), p("b"))), {}}; }), 1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{project(t, scale(t, p("a"), -1.7)), {}}; }), 1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{project(t, silu(t, p("a"))), {}}; }), 1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{sum(t, p("a")), {}}; }), 1e-4);
}

TEST_F(KernelGradients, MatmulSoftmaxNorm) {
    ps.insert("x", random_tensor<double>({4, 6}, g));
    ps.insert("w", random_tensor<double>({6, 5}, g));
    ps.insert("gain", random_tensor<double>({6}, g));
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{project(t, matmul(t, p("x"), p("w"))), {}}; }), 1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) {
                  return Probe<double>{project(t, softmax(t, matmul(t, p("x"), p("w")))), {}};
              }),
              1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{project(t, rms_norm(t, p("x"), p("gain"))), {}}; }), 1e-4);
}

TEST_F(KernelGradients, EmbeddingAndCrossEntropy) {
    ps.insert("table", random_tensor<double>({10, 4}, g));
    ps.insert("w", random_tensor<double>({4, 10}, g));
    std::vector<TokenId> ids{3, 3, 7, 0, 9};
    std::vector<TokenId> targets{1, 2, 2, 9, 0};
    std::vector<double> weights{0.1, 0.0, 0.4, 0.3, 0.2};
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) {
                  auto z = matmul(t, embedding(t, p("table"), std::span<const TokenId>(ids)), p("w"));
                  return Probe<double>{cross_entropy(t, z, std::span<const TokenId>(targets), std::span<const double>(weights)), {}};
              }),
              1e-4);
}

TEST_F(KernelGradients, CausalAttention) {
    const std::size_t batch = 2, seq = 5, heads = 2, d = 6;
    ps.insert("q", random_tensor<double>({batch * seq, d}, g));
    ps.insert("k", random_tensor<double>({batch * seq, d}, g));
    ps.insert("v", random_tensor<double>({batch * seq, d}, g));
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) {
                  return Probe<double>{project(t, causal_attention(t, p("q"), p("k"), p("v"), batch, seq, heads)), {}};
              }),
              1e-4);
}

TEST_F(KernelGradients, RoutingPrimitives) {
    ps.insert("z", random_tensor<double>({6, 4}, g));
    ps.insert("x", random_tensor<double>({6, 3}, g));
    ps.insert("base", random_tensor<double>({6, 3}, g));
    std::vector<std::uint32_t> rows{5, 1, 1, 3};
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) {
                  Selection sel;
                  auto w = topk_renorm(t, softmax(t, p("z")), 2, sel);
                  return Probe<double>{project(t, w), sel.experts};
              }),
              1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) {
                  auto picked = gather_rows(t, p("x"), std::span<const std::uint32_t>(rows));
                  auto col = take_column(t, p("z"), std::span<const std::uint32_t>(rows), 2);
                  auto scaled = scale_rows(t, picked, col);
                  return Probe<double>{project(t, index_add(t, p("base"), scaled, std::span<const std::uint32_t>(rows))), {}};
              }),
              1e-4);
    EXPECT_LT(check([&](Tape<double>& t, const Bound& p) { return Probe<double>{project(t, mean_rows(t, p("z"))), {}}; }), 1e-4);
}

TEST(Tape, BackwardVisitsEachOpOnce) {
    std::mt19937_64 g(2);
    Tape<double> t;
    auto a = t.leaf(random_tensor<double>({3, 3}, g), true);
    auto b = t.leaf(random_tensor<double>({3, 3}, g), true);
    auto c = matmul(t, a, b);
    auto d = add(t, c, a);
    auto loss = sum(t, silu(t, d));
    t.backward(loss);
    EXPECT_EQ(t.num_ops(), 4u);
    EXPECT_EQ(t.backward_visits(), t.num_ops());
}

TEST(Tape, UntouchedParameterHasExactlyZeroGradient) {
    std::mt19937_64 g(2);
    Tape<double> t;
    auto a = t.leaf(random_tensor<double>({3, 3}, g), true);
    auto unused = t.leaf(random_tensor<double>({2, 2}, g), true);
    t.backward(sum_squares(t, a));
    const auto gu = t.grad(unused);
    for (double v : gu.data()) EXPECT_EQ(v, 0.0);
    EXPECT_FALSE(t.has_grad(unused));
}

TEST(Tape, OverflowRaisesNumericErrorNamingTheOp) {
    Tape<float> t;
    auto a = t.leaf(Tensor<float>::full({2, 2}, 1e30f));
    try {
        matmul(t, a, a);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
        EXPECT_EQ(e.code(), ErrorCode::numeric);
    }
}

TEST(Tape, NonFiniteLeafIsRejected) {
    Tape<float> t;
    EXPECT_THROW(t.leaf(Tensor<float>::full({1}, std::nanf(""))), NumericError);
}

TEST(Kernels, DeterministicForIdenticalInputs) {
    std::mt19937_64 g(4);
    auto a = random_tensor<float>({33, 65}, g);
    auto b = random_tensor<float>({65, 17}, g);
    Tape<float> t1(false), t2(false);
    auto c1 = t1.value(softmax(t1, matmul(t1, t1.leaf(a), t1.leaf(b))));
    auto c2 = t2.value(softmax(t2, matmul(t2, t2.leaf(a), t2.leaf(b))));
    EXPECT_TRUE(c1.bit_equal(c2));
}

}  // namespace
}  // namespace deltamoe
