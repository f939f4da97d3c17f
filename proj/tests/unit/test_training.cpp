// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pesc/core/errors.hpp"
#include "pesc/training/trainer.hpp"

namespace pesc {
namespace {

DenseConfig tiny() {
    DenseConfig c;
    c.d_model = 32;
    c.d_ffn = 64;
    c.n_layers = 2;
    c.max_seq_len = 32;
    c.seed = 4;
    return c;
}

TrainConfig quick(std::size_t steps, double lr = 3e-3) {
    TrainConfig t;
    t.steps = steps;
    t.learning_rate = lr;
    t.seq_len = 16;
    t.batch_size = 4;
    t.eval_windows = 8;
    t.seed = 3;
    return t;
}

CraftConfig craft_cfg(CraftMode mode = CraftMode::pesc) {
    CraftConfig c;
    c.n_experts = 4;
    c.k = 2;
    c.adapter_dim = 8;
    c.mode = mode;
    return c;
}

const CorpusSplit &data() {
    static const CorpusSplit d = make_split(CorpusKind::mixed, 20000, 2000, 1);
    return d;
}

std::vector<float> values_of(const std::vector<NamedParam<float>> &params, ParamCategory cat) {
    std::vector<float> out;
    for (const auto &p : params)
        if (p.category == cat)
            out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

TEST(Schedule, LinearWarmupThenConstant) {
    TrainConfig c;
    c.learning_rate = 0.3;
    c.steps = 100;
    c.warmup_ratio = 0.03;
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.1);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 1), 0.2);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 2), 0.3);
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 99), 0.3);
    c.warmup_ratio = 0.0;
    EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.3);
}

TEST(AdamW, MatchesHandComputedUpdates) {
    auto w = Tensor<float>::from({2}, {1.0f, -2.0f}, true);
    AdamW opt({w}, 0.9, 0.999, 1e-8, 0.1);
    const double g[2][2] = {{0.5, -1.0}, {0.25, 2.0}};
    double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 2; ++t) {
        w.zero_grad();
        const auto coef =
            Tensor<float>::from({2}, {static_cast<float>(g[t - 1][0]), static_cast<float>(g[t - 1][1])});
        backward(sum(mul(w, coef)));
        opt.step(0.01);
        for (int j = 0; j < 2; ++j) {
            m[j] = 0.9 * m[j] + 0.1 * g[t - 1][j];
            v[j] = 0.999 * v[j] + 0.001 * g[t - 1][j] * g[t - 1][j];
            const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
            ref[j] -= 0.01 * mh / (std::sqrt(vh) + 1e-8) + 0.01 * 0.1 * ref[j];
        }
        EXPECT_NEAR(w[0], ref[0], 1e-6);
        EXPECT_NEAR(w[1], ref[1], 1e-6);
    }
    EXPECT_EQ(opt.step_count(), 2u);
}

TEST(AdamW, SkipsParametersWithoutGradient) {
    auto a = Tensor<float>::from({1}, {1.0f}, true);
    auto b = Tensor<float>::from({1}, {1.0f}, true);
    AdamW opt({a, b}, 0.9, 0.999, 1e-8, 0.5);
    backward(mul(a, a));
    opt.step(0.1);
    EXPECT_NE(a[0], 1.0f);
    EXPECT_EQ(b[0], 1.0f);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
    auto model = DenseModel<float>::init(tiny());
    const auto before = parameter_fingerprint(model.parameters());
    auto cfg = quick(5, 0.0);
    const auto rec = train(model, CorpusSplit{data().train, {}}, cfg);
    EXPECT_EQ(rec.steps.size(), 5u);
    EXPECT_EQ(parameter_fingerprint(model.parameters()), before);
}

TEST(Trainer, ZeroStepsIsANoOp) {
    auto model = DenseModel<float>::init(tiny());
    const auto before = parameter_fingerprint(model.parameters());
    const auto rec = train(model, CorpusSplit{data().train, {}}, quick(0));
    EXPECT_TRUE(rec.steps.empty());
    EXPECT_EQ(parameter_fingerprint(model.parameters()), before);
}

TEST(Trainer, FrozenSharedUnchangedWhileAdaptersMove) {
    auto sparse = craft(DenseModel<float>::init(tiny()), craft_cfg());
    const auto params = sparse.parameters();
    const auto shared = values_of(params, ParamCategory::shared_ffn);
    const auto attention = values_of(params, ParamCategory::attention);
    const auto adapters = values_of(params, ParamCategory::adapter);
    const auto router = values_of(params, ParamCategory::router);
    (void)train(sparse, CorpusSplit{data().train, {}}, quick(20));
    const auto after = sparse.parameters();
    EXPECT_EQ(values_of(after, ParamCategory::shared_ffn), shared);
    EXPECT_EQ(values_of(after, ParamCategory::attention), attention);
    EXPECT_NE(values_of(after, ParamCategory::adapter), adapters);
    EXPECT_NE(values_of(after, ParamCategory::router), router);
    bool up_moved = false;
    for (const auto &layer : sparse.pesc_layers())
        for (const auto &a : layer.adapters)
            for (float v : a.w_up.data())
                up_moved |= v != 0.0f;
    EXPECT_TRUE(up_moved);
}

TEST(Trainer, TrainableSharedMoves) {
    auto cfg = craft_cfg();
    cfg.trainable_shared = true;
    auto sparse = craft(DenseModel<float>::init(tiny()), cfg);
    const auto shared = values_of(sparse.parameters(), ParamCategory::shared_ffn);
    (void)train(sparse, CorpusSplit{data().train, {}}, quick(5));
    EXPECT_NE(values_of(sparse.parameters(), ParamCategory::shared_ffn), shared);
}

TEST(Trainer, LossDecreases) {
    auto model = DenseModel<float>::init(tiny());
    const auto rec = train(model, data(), quick(200));
    ASSERT_EQ(rec.steps.size(), 200u);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        head += rec.steps[i].cross_entropy;
        tail += rec.steps[190 + i].cross_entropy;
    }
    EXPECT_LT(tail, head * 0.8);
    ASSERT_TRUE(rec.heldout_perplexity.has_value());
    EXPECT_LT(*rec.heldout_perplexity, 256.0);
}

TEST(Trainer, Deterministic) {
    auto sa = craft(DenseModel<float>::init(tiny()), craft_cfg());
    auto sb = craft(DenseModel<float>::init(tiny()), craft_cfg());
    const auto ra = train(sa, data(), quick(10));
    const auto rb = train(sb, data(), quick(10));
    EXPECT_EQ(parameter_fingerprint(sa.parameters()), parameter_fingerprint(sb.parameters()));
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(ra.steps[i].cross_entropy, rb.steps[i].cross_entropy);
        EXPECT_EQ(ra.steps[i].f, rb.steps[i].f);
    }
    EXPECT_EQ(ra.heldout_perplexity, rb.heldout_perplexity);
}

TEST(Trainer, TrainabilityPartition) {
    const auto dense = DenseModel<float>::init(tiny());
    const TrainConfig cfg;
    TrainConfig open = cfg;
    open.train_non_ffn = true;
    const auto pesc = craft(dense, craft_cfg());
    auto shared_cfg = craft_cfg();
    shared_cfg.trainable_shared = true;
    const auto pesc_shared = craft(dense, shared_cfg);
    const auto full = craft(dense, craft_cfg(CraftMode::full));
    using C = ParamCategory;
    for (C c : {C::embedding, C::attention, C::norm, C::output, C::dense_ffn})
        EXPECT_TRUE(is_trainable(c, dense, cfg));
    EXPECT_TRUE(is_trainable(C::adapter, pesc, cfg));
    EXPECT_TRUE(is_trainable(C::router, pesc, cfg));
    EXPECT_FALSE(is_trainable(C::shared_ffn, pesc, cfg));
    EXPECT_TRUE(is_trainable(C::shared_ffn, pesc_shared, cfg));
    EXPECT_FALSE(is_trainable(C::expert_ffn, pesc, cfg));
    EXPECT_TRUE(is_trainable(C::expert_ffn, full, cfg));
    EXPECT_TRUE(is_trainable(C::router, full, cfg));
    for (C c : {C::embedding, C::attention, C::norm, C::output}) {
        EXPECT_FALSE(is_trainable(c, pesc, cfg));
        EXPECT_TRUE(is_trainable(c, pesc, open));
    }
}

TEST(Trainer, TrainableCountFollowsPartition) {
    auto sparse = craft(DenseModel<float>::init(tiny()), craft_cfg());
    const auto report = param_report(sparse);
    Trainer<SparseModel<float>> t(sparse, quick(1));
    EXPECT_EQ(t.trainable_count(), report.pesc_trainable);
}

TEST(Trainer, DivergenceReportsStep) {
    auto model = DenseModel<float>::init(tiny());
    Trainer<DenseModel<float>> t(model, quick(10));
    Rng rng(1);
    const auto batch = sample_batch(data().train, 4, 16, rng);
    (void)t.step(batch);
    model.ffns()[0].w_in.data()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        (void)t.step(batch);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError &e) {
        EXPECT_EQ(e.step(), 1u);
    }
}

TEST(Trainer, RejectsBadConfigs) {
    auto model = DenseModel<float>::init(tiny());
    auto cfg = quick(1);
    cfg.seq_len = 64;
    EXPECT_THROW((Trainer<DenseModel<float>>(model, cfg)), ConfigError);
    EXPECT_THROW((void)train(model, CorpusSplit{}, quick(1)), DataError);
}

TEST(Trainer, BalanceTermRecordedOnlyForSparse) {
    auto dense = DenseModel<float>::init(tiny());
    auto sparse = craft(dense, craft_cfg());
    const auto rd = train(dense, CorpusSplit{data().train, {}}, quick(2));
    const auto rs = train(sparse, CorpusSplit{data().train, {}}, quick(2));
    EXPECT_EQ(rd.steps[0].balance, 0.0);
    EXPECT_TRUE(rd.steps[0].f.empty());
    EXPECT_GT(rs.steps[0].balance, 0.0);
    ASSERT_EQ(rs.steps[0].f.size(), 2u);
    EXPECT_NEAR(std::accumulate(rs.steps[0].f[0].begin(), rs.steps[0].f[0].end(), 0.0), 1.0, 1e-9);
    auto none = quick(2);
    none.alpha = 0.0;
    auto s2 = craft(dense, craft_cfg());
    EXPECT_EQ(train(s2, CorpusSplit{data().train, {}}, none).steps[0].balance, 0.0);
}

TEST(Evaluate, DispatchStdOfUniformIsZero) {
    EXPECT_EQ(mean_dispatch_std({{0.25, 0.25, 0.25, 0.25}}), 0.0);
    EXPECT_NEAR(mean_dispatch_std({{0.5, 0.5, 0, 0}, {0.25, 0.25, 0.25, 0.25}}), 0.125, 1e-12);
    EXPECT_NEAR(mean_dispatch_std({{0.5, 0.5, 0, 0}}), oracle::stddev({0.5, 0.5, 0, 0}), 1e-15);
}

TEST(Evaluate, SparseMatchesDenseAtCraftTime) {
    const auto dense = DenseModel<float>::init(tiny());
    const auto sparse = craft(dense, craft_cfg());
    const auto a = evaluate(dense, data().heldout, 16, 8);
    const auto b = evaluate(sparse, data().heldout, 16, 8);
    EXPECT_NEAR(a.cross_entropy, b.cross_entropy, 1e-5);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_NEAR(a.perplexity, std::exp(a.cross_entropy), 1e-9 * a.perplexity);
    EXPECT_EQ(b.f.size(), 2u);
}

TEST(Corpus, DeterministicAndTagged) {
    for (CorpusKind kind : {CorpusKind::mixed, CorpusKind::skewed, CorpusKind::subset_tagged}) {
        const auto a = make_corpus(kind, 5000, 9), b = make_corpus(kind, 5000, 9);
        EXPECT_EQ(a.tokens, b.tokens);
        EXPECT_EQ(a.tags, b.tags);
        ASSERT_EQ(a.size(), 5000u);
        ASSERT_EQ(a.tags.size(), a.tokens.size());
        EXPECT_EQ(a.subsets, subset_names());
        for (std::size_t i = 0; i < a.size(); ++i) {
            ASSERT_GE(a.tokens[i], 0);
            ASSERT_LT(a.tokens[i], 256);
            ASSERT_GE(a.tags[i], 0);
            ASSERT_LT(a.tags[i], 3);
        }
        EXPECT_NE(make_corpus(kind, 5000, 10).tokens, a.tokens);
    }
}

TEST(Corpus, SubsetTaggedIsContiguous) {
    const auto c = make_corpus(CorpusKind::subset_tagged, 9000, 2);
    std::size_t changes = 0;
    for (std::size_t i = 1; i < c.size(); ++i)
        changes += c.tags[i] != c.tags[i - 1];
    EXPECT_EQ(changes, 2u);
    std::size_t total = 0;
    for (int t = 0; t < 3; ++t) {
        const auto f = c.filter(t);
        total += f.size();
        for (int tag : f.tags)
            ASSERT_EQ(tag, t);
    }
    EXPECT_EQ(total, c.size());
}

TEST(Corpus, SkewedIsDominatedByArithmetic) {
    const auto c = make_corpus(CorpusKind::skewed, 20000, 3);
    const auto m = make_corpus(CorpusKind::mixed, 20000, 3);
    EXPECT_GT(c.filter(0).size(), c.size() / 2);
    EXPECT_GT(c.filter(0).size(), m.filter(0).size());
}

TEST(Corpus, SplitStreamsDiffer) {
    const auto &d = data();
    EXPECT_EQ(d.train.size(), 20000u);
    EXPECT_EQ(d.heldout.size(), 2000u);
    const auto prefix = d.train.slice(0, 2000);
    EXPECT_NE(prefix.tokens, d.heldout.tokens);
}

TEST(Corpus, BatchesAreShiftedWindows) {
    Rng rng(4);
    const auto b = sample_batch(data().train, 3, 10, rng);
    ASSERT_EQ(b.inputs.size(), 30u);
    ASSERT_EQ(b.targets.size(), 30u);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t t = 0; t + 1 < 10; ++t)
            EXPECT_EQ(b.targets[r * 10 + t], b.inputs[r * 10 + t + 1]);
    const auto seq = sequential_batches(data().heldout, 2, 10, 5);
    std::size_t windows = 0;
    for (const auto &s : seq)
        windows += s.batch;
    EXPECT_EQ(windows, 5u);
    EXPECT_EQ(seq[0].inputs[0], data().heldout.tokens[0]);
    EXPECT_EQ(seq[0].inputs[10], data().heldout.tokens[10]);
    EXPECT_EQ(seq[0].targets[9], data().heldout.tokens[10]);
}

TEST(Corpus, EverySubLanguageIsLearnable) {
    for (int tag = 0; tag < 3; ++tag) {
        const auto subset = data().train.filter(tag);
        const auto held = data().heldout.filter(tag);
        auto model = DenseModel<float>::init(tiny());
        const double before = evaluate(model, held, 16, 16).cross_entropy;
        (void)train(model, CorpusSplit{subset, {}}, quick(150));
        const double after = evaluate(model, held, 16, 16).cross_entropy;
        EXPECT_LT(after, 0.7 * before) << subset_names()[static_cast<std::size_t>(tag)];
    }
}

TEST(Gap, ZeroStepsGivesZeroGap) {
    const auto dense = DenseModel<float>::init(tiny());
    const auto r = approximation_gap(dense, data(), quick(0), craft_cfg());
    ASSERT_TRUE(r.full.ok);
    ASSERT_TRUE(r.pesc.ok);
    ASSERT_TRUE(r.train_gap && r.heldout_gap);
    EXPECT_NEAR(*r.train_gap, 0.0, 1e-6);
    EXPECT_NEAR(*r.heldout_gap, 0.0, 1e-6);
}

TEST(Gap, NonNegativeAfterTraining) {
    const auto dense = DenseModel<float>::init(tiny());
    const auto r = approximation_gap(dense, data(), quick(10), craft_cfg());
    ASSERT_TRUE(r.train_gap && r.heldout_gap);
    EXPECT_GE(*r.train_gap, 0.0);
    EXPECT_GE(*r.heldout_gap, 0.0);
    EXPECT_EQ(*r.train_gap, std::abs(r.full.final_train_loss - r.pesc.final_train_loss));
    EXPECT_EQ(r.full.ce_curve.size(), 10u);
    const nlohmann::json j = r;
    EXPECT_TRUE(j.contains("train_gap"));
}

} // namespace
} // namespace pesc
