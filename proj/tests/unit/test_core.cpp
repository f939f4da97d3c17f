// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "op_cases.hpp"
#include "oracles.hpp"
#include "pesc/core/errors.hpp"
#include "pesc/core/gradcheck.hpp"
#include "pesc/core/ops.hpp"
#include "pesc/core/random.hpp"

namespace pesc {
namespace {

using TD = Tensor<double>;
constexpr double kInf = std::numeric_limits<double>::infinity();

TD rand_t(Shape s, Rng &rng) { return normal_tensor<double>(std::move(s), 1.0, rng, true); }

// Runs backward on f() and compares against the test-side central
// difference.
double fd_error(const std::function<TD()> &f, const std::vector<TD> &inputs) {
    for (auto x : inputs)
        x.zero_grad();
    backward(f());
    return oracle::central_difference_error(
        [&] {
            NoGradGuard g;
            return f().item();
        },
        inputs);
}

TEST(Tensor, FromChecksLength) {
    EXPECT_THROW((void)TD::from({2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_THROW((void)TD::from({0, 2}, {}), ShapeError);
    const TD t = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(Tensor, GradHasDataShape) {
    TD x = TD::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum(mul(x, x)));
    ASSERT_TRUE(x.has_grad());
    EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Matmul, IdentityTimesMatrix) {
    const TD a = TD::from({2, 2}, {1, 0, 0, 1});
    const TD b = TD::from({2, 2}, {5, 6, 7, 8});
    const TD c = matmul(a, b);
    EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{5, 6, 7, 8}));
}

TEST(Matmul, RowTimesColumn) {
    const TD c = matmul(TD::from({1, 2}, {1, 2}), TD::from({2, 1}, {3, 4}));
    ASSERT_EQ(c.shape(), (Shape{1, 1}));
    EXPECT_EQ(c.item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        (void)matmul(TD::zeros({2, 3}), TD::zeros({4, 2}));
        FAIL() << "no throw";
    } catch (const ShapeError &e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("4x2"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    Rng rng(11);
    TD a = rand_t({3, 3}, rng), b = rand_t({3, 3}, rng);
    EXPECT_LT(fd_error([&] { return sum(matmul(a, b)); }, {a}), 1e-4);
}

TEST(Matmul, AgreesWithOracle) {
    Rng rng(5);
    const TD a = rand_t({4, 3}, rng), b = rand_t({3, 5}, rng);
    const auto ref = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
    const auto got = oracle::to_mat(matmul(a, b));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            EXPECT_NEAR(got[i][j], ref[i][j], 1e-12);
}

TEST(Softmax, Uniform) {
    const TD y = softmax(TD::from({1, 4}, {0, 0, 0, 0}), 1);
    for (double v : y.data())
        EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, NegativeInfinityMapsToZero) {
    const TD y = softmax(TD::from({1, 4}, {3.0, 2.0, -kInf, -kInf}), 1);
    EXPECT_NEAR(y[0], 0.7311, 1e-4);
    EXPECT_NEAR(y[1], 0.2689, 1e-4);
    EXPECT_EQ(y[2], 0.0);
    EXPECT_EQ(y[3], 0.0);
    const auto ref = oracle::softmax({3.0, 2.0, -kInf, -kInf});
    EXPECT_NEAR(y[0], ref[0], 1e-15);
}

TEST(Softmax, AllNegativeInfinityIsDegenerate) {
    EXPECT_THROW((void)softmax(TD::from({1, 3}, {-kInf, -kInf, -kInf}), 1), NumericError);
}

TEST(Softmax, ShiftInvariance) {
    Rng rng(3);
    const TD x = rand_t({5, 6}, rng);
    for (double c : {-7.5, 0.25, 40.0}) {
        TD shifted = x.clone();
        for (auto &v : shifted.data())
            v += c;
        const TD a = softmax(x, 1), b = softmax(shifted, 1);
        for (std::size_t i = 0; i < a.numel(); ++i)
            EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(Softmax, ConservationAlongEitherAxis) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const TD x = normal_tensor<double>({4, 7}, 5.0, rng, false);
        const TD r = softmax(x, 1);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                EXPECT_GT(r.at(i, j), 0.0);
                s += r.at(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
        const TD c = softmax(x, 0);
        for (std::size_t j = 0; j < 7; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < 4; ++i)
                s += c.at(i, j);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Softmax, InvalidAxis) { EXPECT_THROW((void)softmax(TD::zeros({2, 2}), 2), ShapeError); }

TEST(Elementwise, CrossEntropyUniformTwoClass) {
    const std::vector<int> t{0};
    EXPECT_NEAR(cross_entropy(TD::from({1, 2}, {0, 0}), t).item(), std::log(2.0), 1e-12);
}

TEST(Elementwise, CrossEntropyInvalidClass) {
    const std::vector<int> bad{2};
    EXPECT_THROW((void)cross_entropy(TD::from({1, 2}, {0, 0}), bad), IndexError);
    const std::vector<int> neg{-1};
    EXPECT_THROW((void)cross_entropy(TD::from({1, 2}, {0, 0}), neg), IndexError);
}

TEST(Elementwise, DefaultActivationPreservesOrigin) {
    EXPECT_EQ(activate(0.0, Activation::gelu), 0.0);
    EXPECT_EQ(activate(0.0f, Activation::gelu), 0.0f);
    EXPECT_NEAR(activate(1.3, Activation::gelu), oracle::gelu(1.3), 1e-15);
}

TEST(Elementwise, ActivationNamesRoundTrip) {
    for (Activation a : {Activation::gelu, Activation::silu, Activation::tanh, Activation::relu})
        EXPECT_EQ(parse_activation(activation_name(a)), a);
    EXPECT_THROW((void)parse_activation("swish2"), ConfigError);
}

TEST(Elementwise, LayerNormStandardizesRows) {
    Rng rng(8);
    const TD x = normal_tensor<double>({6, 10}, 3.0, rng, false);
    const TD y = layer_norm(x, TD::full({10}, 1.0), TD::zeros({10}));
    for (std::size_t i = 0; i < 6; ++i) {
        double m = 0.0, v = 0.0;
        for (std::size_t j = 0; j < 10; ++j)
            m += y.at(i, j);
        m /= 10;
        for (std::size_t j = 0; j < 10; ++j)
            v += (y.at(i, j) - m) * (y.at(i, j) - m);
        v /= 10;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-5);
    }
}

TEST(Elementwise, EmbeddingLookupAndRange) {
    const TD table = TD::from({3, 2}, {1, 2, 3, 4, 5, 6});
    const std::vector<int> ids{2, 0};
    const TD e = embedding(table, ids);
    EXPECT_EQ(e.at(0, 0), 5.0);
    EXPECT_EQ(e.at(1, 1), 2.0);
    const std::vector<int> bad{3};
    EXPECT_THROW((void)embedding(table, bad), IndexError);
}

TEST(Backward, SumGivesOnes) {
    TD x = TD::from({2, 3}, {1, -2, 3, 4, 0, 6}, true);
    backward(sum(x));
    for (double g : x.grad())
        EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
    TD x = TD::from({3}, {1, 2, 3}, true);
    backward(sum(mul(x, x)));
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, RepeatedCallsAccumulate) {
    TD x = TD::from({3}, {1, 2, 3}, true);
    const TD loss = sum(mul(x, x));
    backward(loss);
    backward(loss);
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{4, 8, 12}));
}

TEST(Backward, NonScalarLossIsContractError) {
    TD x = TD::from({3}, {1, 2, 3}, true);
    EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, UntrackedLossIsContractError) {
    const TD x = TD::from({3}, {1, 2, 3});
    EXPECT_THROW(backward(sum(x)), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    TD x = TD::from({3}, {1, 2, 3}, true);
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    EXPECT_FALSE(sum(x).requires_grad());
}

TEST(Graph, TopologicalAndEachNodeOnce) {
    TD x = TD::from({2, 2}, {1, 2, 3, 4}, true);
    const TD h = mul(x, x);
    const TD loss = sum(add(add(h, h), scale(h, 2.0))); // diamond on h
    const auto g = Graph<double>::build(loss);
    std::set<const Node<double> *> seen;
    for (const Node<double> *n : g.order()) {
        for (const auto &in : n->inputs)
            EXPECT_TRUE(seen.count(in.get()) == 1 || !in->requires_grad) << "input after its consumer";
        EXPECT_TRUE(seen.insert(n).second) << "node visited twice";
    }

    int calls = 0;
    Node<double> &hn = *h.node();
    auto inner = hn.backward;
    hn.backward = [&calls, inner](Node<double> &n) {
        ++calls;
        inner(n);
    };
    backward(loss);
    EXPECT_EQ(calls, 1);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0 * 2.0 * 2.0); // d/dx 4x^2
}

TEST(Determinism, SameSeedSameForward) {
    auto run = [] {
        Rng rng(42);
        const TD a = rand_t({4, 4}, rng), b = rand_t({4, 4}, rng);
        return softmax(matmul(a, b), 1);
    };
    const TD p = run(), q = run();
    for (std::size_t i = 0; i < p.numel(); ++i)
        EXPECT_EQ(p[i], q[i]);
}

TEST(FiniteDifference, SumIsExact) {
    Rng rng(1);
    const TD x = rand_t({3, 4}, rng);
    EXPECT_LT(finite_difference_check([](const TD &v) { return sum(v); }, x), 1e-9);
}

TEST(FiniteDifference, SoftmaxThenSumIsConstant) {
    Rng rng(2);
    const TD x = rand_t({3, 4}, rng);
    EXPECT_LT(finite_difference_check([](const TD &v) { return sum(softmax(v, 1)); }, x), 1e-5);
}

TEST(FiniteDifference, NonFiniteRaises) {
    const TD x = TD::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
    EXPECT_THROW((void)finite_difference_check([](const TD &v) { return sum(v); }, x), NumericError);
}

TEST(FiniteDifference, RejectsNonPositiveEps) {
    const TD x = TD::from({1}, {1.0});
    EXPECT_THROW((void)finite_difference_check([](const TD &v) { return sum(v); }, x, 0.0), ConfigError);
}

TEST(FiniteDifference, MatchesOracleFormula) {
    Rng rng(9);
    TD x = rand_t({2, 3}, rng);
    TD w = normal_tensor<double>({2, 3}, 1.0, rng, false);
    auto f = [&] { return sum(mul(activation(x, Activation::tanh), w)); };
    const std::array<TD, 1> in{x};
    const double lib = finite_difference_check(f, in).max_relative_error;
    EXPECT_NEAR(lib, fd_error(f, {x}), 1e-9);
}

// Every op, ten random inputs each, against the test-side oracle.
class OpGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradient, TenRandomInputs) {
    for (std::uint64_t trial = 0; trial < 10; ++trial)
        EXPECT_LT(oracle::op_case_error(oracle::make_op_case(GetParam(), trial)), 1e-4) << "trial " << trial;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(oracle::op_names()));

TEST(Finite, ForwardAndBackwardStayFinite) {
    Rng rng(77);
    TD x = normal_tensor<double>({6, 8}, 10.0, rng, true);
    const std::vector<int> t{1, 2, 3, 4, 5, 6};
    const TD loss = cross_entropy(softmax(x, 1), t);
    backward(loss);
    EXPECT_TRUE(all_finite<double>(x.grad()));
}

TEST(Seeds, DeriveSeedSeparatesStreams) {
    EXPECT_NE(derive_seed(0, 0), derive_seed(0, 1));
    EXPECT_NE(derive_seed(0, 1), derive_seed(1, 0));
    EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}

} // namespace
} // namespace pesc
