// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pesc/core/errors.hpp"
#include "pesc/moe/moe.hpp"

namespace pesc {
namespace {

template <typename T>
MoELayer<T> make_layer(std::size_t d, std::size_t f, std::size_t n, std::size_t k, std::size_t d2, Rng &rng,
                       bool random_up = false) {
    MoELayer<T> layer;
    layer.shared = {normal_tensor<T>({d, f}, 0.5, rng, false), normal_tensor<T>({f, d}, 0.5, rng, false)};
    for (std::size_t i = 0; i < n; ++i) {
        auto a = Adapter<T>::init(d, d2, Activation::gelu, rng, 0.5);
        if (random_up)
            a.w_up = normal_tensor<T>({d2, d}, 0.5, rng, true);
        layer.adapters.push_back(a);
    }
    layer.router = Router<T>::init(n, d, k, rng);
    return layer;
}

Tensor<float> logits_row(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor<float>::from({1, n}, std::move(v));
}

TEST(Adapter, ZeroUpIsExactIdentity) {
    Rng rng(1);
    const auto a = Adapter<float>::init(16, 4, Activation::gelu, rng, 0.25);
    for (float v : a.w_up.data())
        EXPECT_EQ(v, 0.0f);
    const auto x = normal_tensor<float>({5, 16}, 2.0, rng, false);
    const auto y = adapter_forward(x, a);
    for (std::size_t i = 0; i < x.numel(); ++i)
        EXPECT_EQ(y[i], x[i]);
}

TEST(Adapter, ZeroInputGivesZero) {
    Rng rng(2);
    auto a = Adapter<float>::init(8, 3, Activation::gelu, rng, 0.5);
    a.w_up = normal_tensor<float>({3, 8}, 1.0, rng, false);
    const auto y = adapter_forward(Tensor<float>::zeros({2, 8}), a);
    for (float v : y.data())
        EXPECT_EQ(v, 0.0f);
}

TEST(Adapter, MatchesHandComposedEvaluationExactly) {
    Rng rng(3);
    auto a = Adapter<double>::init(4, 2, Activation::gelu, rng, 1.0);
    a.w_up = normal_tensor<double>({2, 4}, 1.0, rng, false);
    const auto x = normal_tensor<double>({2, 4}, 1.0, rng, false);
    const auto got = oracle::to_mat(adapter_forward(x, a));
    const auto ref = oracle::adapter(oracle::to_mat(x), oracle::to_mat(a.w_down), oracle::to_mat(a.w_up));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            EXPECT_EQ(got[i][j], ref[i][j]);
}

TEST(Adapter, WidthMismatchAndBottleneck) {
    Rng rng(4);
    const auto a = Adapter<float>::init(8, 2, Activation::gelu, rng, 0.5);
    EXPECT_THROW((void)adapter_forward(Tensor<float>::zeros({1, 7}), a), ShapeError);
    EXPECT_THROW((void)Adapter<float>::init(8, 8, Activation::gelu, rng, 0.5), ConfigError);
    EXPECT_NO_THROW((void)Adapter<float>::init(8, 8, Activation::gelu, rng, 0.5, true));
}

TEST(Route, TopTwoOfFour) {
    const auto d = route_logits(logits_row({2.0f, 1.0f, 0.5f, 3.0f}), 2);
    EXPECT_EQ(d.expert(0, 0), 3u);
    EXPECT_EQ(d.expert(0, 1), 0u);
    EXPECT_NEAR(d.gate(0, 0), 0.7311, 1e-4);
    EXPECT_NEAR(d.gate(0, 1), 0.2689, 1e-4);
    const auto ref = oracle::softmax({3.0, 2.0});
    EXPECT_NEAR(d.gate(0, 0), ref[0], 1e-6);
    EXPECT_EQ(d.gates.at(0, 1), 0.0f);
    EXPECT_EQ(d.gates.at(0, 2), 0.0f);
}

TEST(Route, KEqualsNIsFullSoftmax) {
    const auto d = route_logits(logits_row({0.3f, -1.0f, 2.0f, 0.0f}), 4);
    for (std::size_t e = 0; e < 4; ++e)
        EXPECT_FLOAT_EQ(d.gates.at(0, e), d.probs.at(0, e));
}

TEST(Route, TiesGoToLowerIndex) {
    const auto d = route_logits(logits_row({1.0f, 1.0f, 1.0f, 1.0f}), 2);
    EXPECT_EQ(d.expert(0, 0), 0u);
    EXPECT_EQ(d.expert(0, 1), 1u);
    EXPECT_EQ(d.gate(0, 0), 0.5f);
    EXPECT_EQ(d.gate(0, 1), 0.5f);
    const auto partial = route_logits(logits_row({0.0f, 2.0f, 1.0f, 2.0f}), 2);
    EXPECT_EQ(partial.expert(0, 0), 1u);
    EXPECT_EQ(partial.expert(0, 1), 3u);
}

TEST(Route, KOutOfRange) {
    EXPECT_THROW((void)route_logits(logits_row({1.0f, 2.0f}), 3), ConfigError);
    EXPECT_THROW((void)route_logits(logits_row({1.0f, 2.0f}), 0), ConfigError);
}

TEST(Route, RouterComputesXWrT) {
    Rng rng(5);
    const auto r = Router<double>::init(4, 6, 2, rng);
    const auto x = normal_tensor<double>({3, 6}, 1.0, rng, false);
    const auto d = route(x, r);
    const auto ref = oracle::matmul(oracle::to_mat(x), oracle::transpose(oracle::to_mat(r.w_r)));
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t e = 0; e < 4; ++e)
            EXPECT_NEAR(d.logits.at(t, e), ref[t][e], 1e-12);
        EXPECT_EQ(oracle::argmax_k(ref[t], 2), (std::vector<std::size_t>{d.expert(t, 0), d.expert(t, 1)}));
    }
}

TEST(Route, GateConservationAndShiftInvariance) {
    Rng rng(6);
    const std::size_t tokens = 2000, n = 6, k = 3;
    auto logits = Tensor<float>::zeros({tokens, n});
    for (auto &v : logits.data())
        v = static_cast<float>(static_cast<int>(rng.index(40)) - 20) * 0.25f;
    auto shifted = logits.clone();
    for (auto &v : shifted.data())
        v += 4.0f;
    const auto a = route_logits(logits, k), b = route_logits(shifted, k);
    EXPECT_EQ(a.indices, b.indices);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::size_t nz = 0;
        double s = 0.0;
        for (std::size_t e = 0; e < n; ++e) {
            nz += a.gates.at(t, e) != 0.0f;
            s += a.gates.at(t, e);
            ASSERT_EQ(a.gates.at(t, e), b.gates.at(t, e));
        }
        EXPECT_EQ(nz, k);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Router, InitStdIsInverseSqrtWidth) {
    Rng rng(7);
    const auto r = Router<double>::init(64, 256, 2, rng);
    double s = 0.0;
    for (double v : r.w_r.data())
        s += v * v;
    EXPECT_NEAR(std::sqrt(s / static_cast<double>(r.w_r.numel())), 1.0 / 16.0, 0.003);
}

TEST(MoEForward, IdentityAtInitForEveryRouting) {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const auto layer = make_layer<float>(16, 32, 4 + trial % 5, 1 + trial % 3, 4, rng);
        const auto x = normal_tensor<float>({12, 16}, 1.0, rng, false);
        const auto y = layer.forward(x).y;
        const auto e = layer.shared.forward(x, Activation::gelu);
        for (std::size_t i = 0; i < y.numel(); ++i)
            EXPECT_NEAR(y[i], e[i], 1e-5);
    }
}

TEST(MoEForward, SingleExpertIsAdapterOfShared) {
    Rng rng(9);
    const auto layer = make_layer<double>(6, 10, 1, 1, 3, rng, true);
    const auto x = normal_tensor<double>({4, 6}, 1.0, rng, false);
    const auto out = layer.forward(x);
    const auto ref = oracle::adapter(
        oracle::ffn(oracle::to_mat(x), oracle::to_mat(layer.shared.w_in), oracle::to_mat(layer.shared.w_out)),
        oracle::to_mat(layer.adapters[0].w_down), oracle::to_mat(layer.adapters[0].w_up));
    const auto got = oracle::to_mat(out.y);
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_EQ(out.decision.gate(t, 0), 1.0);
        for (std::size_t c = 0; c < 6; ++c)
            EXPECT_NEAR(got[t][c], ref[t][c], 1e-12);
    }
}

TEST(MoEForward, MatchesBruteForceReference) {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.index(4);
        const std::size_t k = 1 + rng.index(std::min<std::size_t>(n, 2));
        const std::size_t tokens = 1 + rng.index(8);
        const auto layer = make_layer<double>(6, 9, n, k, 3, rng, true);
        const auto x = normal_tensor<double>({tokens, 6}, 1.0, rng, false);
        const auto got = oracle::to_mat(layer.forward(x).y);
        std::vector<oracle::Expert> ex;
        for (const auto &a : layer.adapters)
            ex.push_back({oracle::to_mat(a.w_down), oracle::to_mat(a.w_up)});
        const auto ref = oracle::brute_force_moe(oracle::to_mat(x), oracle::to_mat(layer.shared.w_in),
                                                 oracle::to_mat(layer.shared.w_out), ex,
                                                 oracle::to_mat(layer.router.w_r), k);
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t c = 0; c < 6; ++c)
                ASSERT_NEAR(got[t][c], ref[t][c], 1e-6) << "trial " << trial;
    }
}

TEST(MoEForward, SharedWeightsObservableThroughAllExperts) {
    Rng rng(11);
    auto layer = make_layer<float>(8, 16, 4, 2, 2, rng, true);
    const auto x = normal_tensor<float>({16, 8}, 1.0, rng, false);
    const auto before = layer.forward(x);
    layer.shared.w_out.data()[0] += 1.0f;
    const auto after = layer.forward(x);
    std::vector<bool> changed(4, false);
    for (std::size_t t = 0; t < 16; ++t) {
        if (before.y.at(t, 0) != after.y.at(t, 0)) {
            for (std::size_t s = 0; s < 2; ++s)
                changed[before.decision.expert(t, s)] = true;
        }
    }
    for (std::size_t t = 0; t < 16; ++t)
        EXPECT_NE(before.y.at(t, 0), after.y.at(t, 0)) << "token " << t;
    (void)changed;
}

TEST(MoEForward, FrozenSharedGetsNoGradient) {
    Rng rng(12);
    auto layer = make_layer<double>(6, 8, 4, 2, 3, rng, true);
    layer.shared.w_in.set_requires_grad(true);
    layer.shared.w_out.set_requires_grad(true);
    layer.router.w_r.set_requires_grad(true);
    layer.trainable_shared = false;
    const auto x = normal_tensor<double>({10, 6}, 1.0, rng, false);
    const auto out = layer.forward(x);
    backward(add(sum(out.y), balance_loss(out.stats, 0.01, 4)));
    auto zero = [](const Tensor<double> &t) {
        if (!t.has_grad())
            return true;
        for (double g : t.grad())
            if (g != 0.0)
                return false;
        return true;
    };
    EXPECT_TRUE(zero(layer.shared.w_in));
    EXPECT_TRUE(zero(layer.shared.w_out));
    EXPECT_FALSE(zero(layer.router.w_r));
    std::vector<bool> selected(4, false);
    for (std::size_t e : out.decision.indices)
        selected[e] = true;
    for (std::size_t e = 0; e < 4; ++e) {
        if (selected[e]) {
            EXPECT_FALSE(zero(layer.adapters[e].w_up)) << e;
            EXPECT_FALSE(zero(layer.adapters[e].w_down)) << e;
        }
    }
}

TEST(MoEForward, TrainableSharedReceivesGradient) {
    Rng rng(13);
    auto layer = make_layer<double>(6, 8, 4, 2, 3, rng, true);
    layer.shared.w_in.set_requires_grad(true);
    layer.trainable_shared = true;
    backward(sum(layer.forward(normal_tensor<double>({5, 6}, 1.0, rng, false)).y));
    ASSERT_TRUE(layer.shared.w_in.has_grad());
    double mag = 0.0;
    for (double g : layer.shared.w_in.grad())
        mag += std::abs(g);
    EXPECT_GT(mag, 0.0);
}

TEST(MoEForward, BlockGradientMatchesFiniteDifferences) {
    Rng rng(14);
    auto layer = make_layer<double>(5, 7, 4, 2, 2, rng, true);
    layer.trainable_shared = true;
    std::vector<Tensor<double>> params{layer.shared.w_in, layer.shared.w_out, layer.router.w_r};
    for (auto &a : layer.adapters) {
        params.push_back(a.w_down);
        params.push_back(a.w_up);
    }
    for (auto &p : params)
        p.set_requires_grad(true);
    const auto x = normal_tensor<double>({4, 5}, 1.0, rng, true);
    params.push_back(x);
    const auto w = normal_tensor<double>({4, 5}, 1.0, rng, false);
    auto loss = [&] {
        const auto out = layer.forward(x);
        return add(sum(mul(out.y, w)), balance_loss(out.stats, 0.01, 4));
    };
    backward(loss());
    const double err = oracle::central_difference_error(
        [&] {
            NoGradGuard g;
            return loss().item();
        },
        params);
    EXPECT_LT(err, 1e-4);
}

TEST(DispatchStats, SumsToOneAndCountsSlots) {
    Rng rng(15);
    const auto layer = make_layer<float>(8, 8, 5, 2, 2, rng);
    const auto out = layer.forward(normal_tensor<float>({40, 8}, 1.0, rng, false));
    double sf = 0.0, sp = 0.0;
    std::vector<double> counts(5, 0.0);
    for (std::size_t e : out.decision.indices)
        counts[e] += 1.0;
    for (std::size_t e = 0; e < 5; ++e) {
        EXPECT_GE(out.stats.f[e], 0.0);
        EXPECT_GE(out.stats.p[e], 0.0f);
        EXPECT_DOUBLE_EQ(out.stats.f[e], counts[e] / 80.0);
        sf += out.stats.f[e];
        sp += out.stats.p[e];
    }
    EXPECT_NEAR(sf, 1.0, 1e-6);
    EXPECT_NEAR(sp, 1.0, 1e-6);
}

TEST(DispatchStats, MaskedProbsSelectable) {
    const auto d = route_logits(Tensor<float>::from({2, 3}, {3.0f, 1.0f, 0.0f, 0.0f, 2.0f, 1.0f}), 1);
    const auto masked = dispatch_stats(d, ProbSource::masked);
    EXPECT_FLOAT_EQ(masked.p[0], 0.5f);
    EXPECT_FLOAT_EQ(masked.p[1], 0.5f);
    EXPECT_FLOAT_EQ(masked.p[2], 0.0f);
    const auto full = dispatch_stats(d, ProbSource::full);
    EXPECT_GT(full.p[2], 0.0f);
    EXPECT_EQ(parse_prob_source(prob_source_name(ProbSource::masked)), ProbSource::masked);
}

DispatchStats<double> stats_of(std::vector<double> f, std::vector<double> p) {
    DispatchStats<double> s;
    s.f = std::move(f);
    const std::size_t n = p.size();
    s.p = Tensor<double>::from({n}, std::move(p));
    s.tokens = 1;
    s.k = 1;
    return s;
}

TEST(BalanceLoss, UniformIsAlpha) {
    const std::vector<double> u(8, 0.125);
    EXPECT_NEAR(balance_loss(stats_of(u, u), 0.01, 8).item(), 0.01, 1e-12);
    EXPECT_NEAR(balance_loss(stats_of(u, u), 0.01, 8).item(), oracle::balance(u, u, 0.01), 1e-15);
}

TEST(BalanceLoss, OneHotIsAlphaTimesN) {
    std::vector<double> h(8, 0.0);
    h[3] = 1.0;
    EXPECT_NEAR(balance_loss(stats_of(h, h), 0.01, 8).item(), 0.08, 1e-12);
}

TEST(BalanceLoss, HandExample) {
    const std::vector<double> f{0.5, 0.5, 0, 0}, p{0.4, 0.4, 0.1, 0.1};
    EXPECT_NEAR(balance_loss(stats_of(f, p), 0.01, 4).item(), 0.016, 1e-12);
    EXPECT_NEAR(oracle::balance(f, p, 0.01), 0.016, 1e-15);
}

TEST(BalanceLoss, UniformIsTheMinimumWhenFEqualsP) {
    Rng rng(16);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v(6);
        double s = 0.0;
        for (auto &x : v) {
            x = rng.uniform(0.01, 1.0);
            s += x;
        }
        for (auto &x : v)
            x /= s;
        EXPECT_GT(balance_loss(stats_of(v, v), 0.01, 6).item(), 0.01);
    }
}

TEST(BalanceLoss, GradientOnlyThroughP) {
    auto s = stats_of({0.5, 0.25, 0.25}, {0.2, 0.3, 0.5});
    Tensor<double> p = s.p;
    p.set_requires_grad(true);
    backward(balance_loss(s, 0.1, 3));
    EXPECT_NEAR(p.grad()[0], 0.1 * 3 * 0.5, 1e-12);
    EXPECT_NEAR(p.grad()[1], 0.1 * 3 * 0.25, 1e-12);
}

TEST(BalanceLoss, MismatchedN) { EXPECT_THROW((void)balance_loss(stats_of({1, 0}, {1, 0}), 0.01, 3), ShapeError); }

} // namespace
} // namespace pesc
