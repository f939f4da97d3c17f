// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/cli/verify.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <sstream>

#include "pesc/core/gradcheck.hpp"
#include "pesc/crafting/craft.hpp"
#include "pesc/io/checkpoint.hpp"

namespace pesc {

namespace {

using TensorD = Tensor<double>;

constexpr double kGradTolerance = 1e-4;

std::string num(double v) {
    std::ostringstream ss;
    ss.precision(3);
    ss << v;
    return ss.str();
}

// Reduces an arbitrary output to a scalar with fixed random weights so the
// gradient is not trivially constant.
TensorD weighted_sum(const TensorD &y, const TensorD &w) { return sum(mul(y, w)); }

struct OpCase {
    std::string name;
    // Returns the inputs to perturb and the scalar function of them.
    std::function<std::pair<std::vector<TensorD>, std::function<TensorD()>>(Rng &)> make;
};

std::vector<OpCase> op_cases() {
    std::vector<OpCase> cases;
    auto w_like = [](const Shape &s, Rng &rng) { return normal_tensor<double>(s, 1.0, rng, false); };
    cases.push_back({"matmul", [=](Rng &rng) {
                         TensorD a = normal_tensor<double>({3, 4}, 1.0, rng), b = normal_tensor<double>({4, 2}, 1.0, rng);
                         TensorD w = w_like({3, 2}, rng);
                         return std::pair{std::vector{a, b}, std::function<TensorD()>([=] { return weighted_sum(matmul(a, b), w); })};
                     }});
    cases.push_back({"matmul_nt", [=](Rng &rng) {
                         TensorD a = normal_tensor<double>({3, 4}, 1.0, rng), b = normal_tensor<double>({5, 4}, 1.0, rng);
                         TensorD w = w_like({3, 5}, rng);
                         return std::pair{std::vector{a, b}, std::function<TensorD()>([=] { return weighted_sum(matmul_nt(a, b), w); })};
                     }});
    cases.push_back({"add_mul_scale", [=](Rng &rng) {
                         TensorD a = normal_tensor<double>({2, 3}, 1.0, rng), b = normal_tensor<double>({2, 3}, 1.0, rng);
                         TensorD w = w_like({2, 3}, rng);
                         return std::pair{std::vector{a, b},
                                          std::function<TensorD()>([=] { return weighted_sum(scale(mul(add(a, b), a), 0.7), w); })};
                     }});
    for (Activation act : {Activation::gelu, Activation::silu, Activation::tanh, Activation::relu}) {
        cases.push_back({"activation_" + activation_name(act), [=](Rng &rng) {
                             TensorD x = normal_tensor<double>({3, 4}, 1.0, rng);
                             TensorD w = w_like({3, 4}, rng);
                             return std::pair{std::vector{x},
                                              std::function<TensorD()>([=] { return weighted_sum(activation(x, act), w); })};
                         }});
    }
    cases.push_back({"mean_rows", [=](Rng &rng) {
                         TensorD x = normal_tensor<double>({4, 3}, 1.0, rng);
                         TensorD w = w_like({3}, rng);
                         return std::pair{std::vector{x}, std::function<TensorD()>([=] { return weighted_sum(mean_rows(x), w); })};
                     }});
    for (std::size_t axis : {0, 1}) {
        cases.push_back({"softmax_axis" + std::to_string(axis), [=](Rng &rng) {
                             TensorD x = normal_tensor<double>({3, 4}, 1.0, rng);
                             TensorD w = w_like({3, 4}, rng);
                             return std::pair{std::vector{x},
                                              std::function<TensorD()>([=] { return weighted_sum(softmax(x, axis), w); })};
                         }});
    }
    cases.push_back({"top_k_softmax", [=](Rng &rng) {
                         TensorD x = normal_tensor<double>({4, 5}, 1.0, rng);
                         TensorD w = w_like({4, 5}, rng);
                         return std::pair{std::vector{x}, std::function<TensorD()>([=] { return weighted_sum(top_k_softmax(x, 2), w); })};
                     }});
    cases.push_back({"layer_norm", [=](Rng &rng) {
                         TensorD x = normal_tensor<double>({3, 5}, 1.0, rng);
                         TensorD g = normal_tensor<double>({5}, 1.0, rng), b = normal_tensor<double>({5}, 1.0, rng);
                         TensorD w = w_like({3, 5}, rng);
                         return std::pair{std::vector{x, g, b},
                                          std::function<TensorD()>([=] { return weighted_sum(layer_norm(x, g, b), w); })};
                     }});
    cases.push_back({"embedding", [=](Rng &rng) {
                         TensorD table = normal_tensor<double>({6, 3}, 1.0, rng);
                         TensorD w = w_like({4, 3}, rng);
                         return std::pair{std::vector{table}, std::function<TensorD()>([=] {
                                              const std::array<int, 4> ids{1, 4, 1, 5};
                                              return weighted_sum(embedding(table, std::span<const int>(ids)), w);
                                          })};
                     }});
    cases.push_back({"gather_scale_scatter", [=](Rng &rng) {
                         TensorD x = normal_tensor<double>({5, 3}, 1.0, rng);
                         TensorD g = normal_tensor<double>({5, 2}, 1.0, rng);
                         TensorD w = w_like({5, 3}, rng);
                         return std::pair{std::vector{x, g}, std::function<TensorD()>([=] {
                                              const std::vector<std::size_t> r0{0, 2, 3}, r1{1, 2, 4};
                                              const std::vector<std::size_t> f0{0, 4, 6}, f1{3, 5, 9};
                                              const std::array<TensorD, 2> parts{scale_rows(gather_rows(x, r0), take(g, f0)),
                                                                                 scale_rows(gather_rows(x, r1), take(g, f1))};
                                              const std::array<std::vector<std::size_t>, 2> rows{r0, r1};
                                              return weighted_sum(scatter_add_rows<double>(parts, rows, 5), w);
                                          })};
                     }});
    cases.push_back({"cross_entropy", [=](Rng &rng) {
                         TensorD x = normal_tensor<double>({3, 5}, 1.0, rng);
                         return std::pair{std::vector{x}, std::function<TensorD()>([=] {
                                              const std::array<int, 3> t{4, 0, 2};
                                              return cross_entropy(x, std::span<const int>(t));
                                          })};
                     }});
    cases.push_back({"causal_attention", [=](Rng &rng) {
                         TensorD q = normal_tensor<double>({6, 4}, 1.0, rng), k = normal_tensor<double>({6, 4}, 1.0, rng),
                                 v = normal_tensor<double>({6, 4}, 1.0, rng);
                         TensorD w = w_like({6, 4}, rng);
                         return std::pair{std::vector{q, k, v},
                                          std::function<TensorD()>([=] { return weighted_sum(causal_attention(q, k, v, 2, 3), w); })};
                     }});
    return cases;
}

CheckResult check_op_gradients(std::uint64_t seed) {
    CheckResult r{"gradients.ops", true, ""};
    double worst = 0.0;
    std::string worst_op;
    for (const OpCase &c : op_cases()) {
        for (std::uint64_t trial = 0; trial < 3; ++trial) {
            Rng rng(derive_seed(seed, trial));
            auto [inputs, f] = c.make(rng);
            const double err = finite_difference_check(f, inputs).max_relative_error;
            if (err > worst) {
                worst = err;
                worst_op = c.name;
            }
        }
    }
    r.passed = worst < kGradTolerance;
    r.detail = "max relative error " + num(worst) + " (" + worst_op + ")";
    return r;
}

DenseConfig tiny_dense(std::uint64_t seed) {
    DenseConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.d_ffn = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 4;
    cfg.seed = seed;
    return cfg;
}

CheckResult check_block_gradients(std::uint64_t seed) {
    CheckResult r{"gradients.pesc_block", true, ""};
    const auto dense = DenseModel<double>::init(tiny_dense(seed));
    CraftConfig cc;
    cc.n_experts = 4;
    cc.k = 2;
    cc.adapter_dim = 4;
    cc.trainable_shared = true;
    cc.router_seed = seed;
    auto sparse = craft(dense, cc);
    Rng rng(derive_seed(seed, 77));
    for (auto &a : sparse.pesc_layers()[0].adapters) {
        for (auto &v : a.w_up.data())
            v = rng.normal(0.0, 0.3);
    }
    std::vector<TensorD> inputs;
    for (const auto &p : sparse.parameters())
        inputs.push_back(p.tensor);
    const std::vector<int> tokens{3, 7, 1, 12};
    const std::vector<int> targets{7, 1, 12, 5};
    auto loss = [&] {
        const auto out = sparse.forward(tokens, 1);
        TensorD total = cross_entropy(out.logits, std::span<const int>(targets));
        for (const auto &s : out.stats)
            total = add(total, balance_loss(s, 0.01, s.n()));
        return total;
    };
    const double err = finite_difference_check(loss, inputs).max_relative_error;
    r.passed = err < kGradTolerance;
    r.detail = "max relative error " + num(err) + " over " + std::to_string(inputs.size()) + " tensors";
    return r;
}

void corrupt(SparseModel<float> &sparse) {
    if (sparse.mode() == CraftMode::pesc)
        sparse.pesc_layers()[0].adapters[0].w_up.data()[0] = 0.1f;
    else
        sparse.full_layers()[0].experts[0].w_out.data()[0] += 0.1f;
}

CheckResult identity_result(const std::string &name, const DenseModel<float> &dense, const SparseModel<float> &sparse,
                            const IdentityCheck &check) {
    CheckResult r{name, true, ""};
    try {
        r.detail = "max deviation " + num(verify_identity(dense, sparse, check));
    } catch (const IdentityViolation &e) {
        r.passed = false;
        r.detail = e.what();
    }
    return r;
}

std::vector<CheckResult> check_identity(const VerifyOptions &opts) {
    std::vector<CheckResult> out;
    DenseConfig dc;
    dc.n_layers = 2;
    for (std::size_t n : {4, 8}) {
        for (std::uint64_t s = 0; s < 5; ++s) {
            dc.seed = derive_seed(opts.seed, s);
            const auto dense = DenseModel<float>::init(dc);
            CraftConfig cc;
            cc.n_experts = n;
            cc.k = 2;
            cc.adapter_dim = 16;
            cc.router_seed = s;
            auto sparse = craft(dense, cc);
            if (opts.inject_fault)
                corrupt(sparse);
            IdentityCheck check;
            check.trials = 5;
            check.seed = s;
            auto r = identity_result("identity.n" + std::to_string(n) + ".seed" + std::to_string(s), dense, sparse, check);
            out.push_back(std::move(r));
        }
    }
    return out;
}

CheckResult check_router(std::uint64_t seed) {
    CheckResult r{"router.contract", true, ""};
    constexpr std::size_t tokens = 10000, n = 8, k = 2;
    Rng rng(derive_seed(seed, 0x2047));
    Tensor<float> logits = Tensor<float>::zeros({tokens, n});
    Tensor<float> shifted = Tensor<float>::zeros({tokens, n});
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        logits[i] = static_cast<float>(static_cast<int>(rng.index(64)) - 32) / 8.0f;
        shifted[i] = logits[i] + 3.0f;
    }
    const auto a = route_logits(logits, k);
    const auto b = route_logits(shifted, k);
    std::size_t bad_count = 0, bad_sum = 0;
    for (std::size_t t = 0; t < tokens; ++t) {
        std::size_t nz = 0;
        double s = 0.0;
        for (std::size_t e = 0; e < n; ++e) {
            const float g = a.gates.data()[t * n + e];
            nz += g != 0.0f;
            s += g;
        }
        bad_count += nz != k;
        bad_sum += std::abs(s - 1.0) > 1e-6;
    }
    const bool shift_exact = a.indices == b.indices &&
                             std::equal(a.gates.data().begin(), a.gates.data().end(), b.gates.data().begin());
    const auto tie = route_logits(Tensor<float>::full({1, 4}, 1.5f), 2);
    const bool tie_ok = tie.expert(0, 0) == 0 && tie.expert(0, 1) == 1 && tie.gate(0, 0) == 0.5f && tie.gate(0, 1) == 0.5f;
    r.passed = bad_count == 0 && bad_sum == 0 && shift_exact && tie_ok;
    r.detail = std::to_string(bad_count) + " tokens with wrong gate count, " + std::to_string(bad_sum) +
               " with gate sum off, shift invariance " + (shift_exact ? "exact" : "broken") + ", ties " +
               (tie_ok ? "ok" : "wrong");
    return r;
}

CheckResult check_balance() {
    CheckResult r{"balance.values", true, ""};
    auto loss = [](std::vector<double> f, std::vector<float> p, float alpha) {
        DispatchStats<float> s;
        s.f = std::move(f);
        s.p = Tensor<float>::from({p.size()}, p);
        s.tokens = 1;
        s.k = 1;
        return balance_loss(s, alpha, s.n()).item();
    };
    const double uniform = loss(std::vector<double>(8, 0.125), std::vector<float>(8, 0.125f), 0.01f);
    const double onehot = loss({1, 0, 0, 0, 0, 0, 0, 0}, {1, 0, 0, 0, 0, 0, 0, 0}, 0.01f);
    const double example = loss({0.5, 0.5, 0, 0}, {0.4f, 0.4f, 0.1f, 0.1f}, 0.01f);
    r.passed = std::abs(uniform - 0.01) < 1e-7 && std::abs(onehot - 0.08) < 1e-7 && std::abs(example - 0.016) < 1e-7;
    r.detail = "uniform " + num(uniform) + ", one-hot " + num(onehot) + ", example " + num(example);
    return r;
}

CheckResult check_param_inequality() {
    CheckResult r{"params.inequality", true, ""};
    DenseConfig dc;
    dc.n_layers = 1;
    const auto dense = DenseModel<float>::init(dc);
    std::size_t failures = 0, configs = 0;
    for (std::size_t n : {4, 8, 16}) {
        for (std::size_t d2 : {8, 16, 32}) {
            CraftConfig cc;
            cc.n_experts = n;
            cc.adapter_dim = d2;
            const auto rep = param_report(craft(dense, cc));
            ++configs;
            failures += !rep.inequality_holds();
        }
    }
    r.passed = failures == 0;
    r.detail = std::to_string(configs - failures) + "/" + std::to_string(configs) + " configs satisfy the inequality";
    return r;
}

CheckResult round_trip(const std::string &name, const Checkpoint &ck) {
    CheckResult r{name, true, ""};
    const auto first = encode_checkpoint(ck);
    const Checkpoint reloaded = decode_checkpoint(first);
    Checkpoint rebuilt = ck.kind == "dense" ? to_checkpoint(dense_from_checkpoint(reloaded))
                                            : to_checkpoint(sparse_from_checkpoint(reloaded));
    rebuilt.meta = reloaded.meta;
    r.passed = encode_checkpoint(rebuilt) == first && reloaded.tensors == ck.tensors;
    r.detail = std::to_string(first.size()) + " bytes, " + std::to_string(ck.tensors.size()) + " tensors";
    return r;
}

template <typename F>
CheckResult guarded(const std::string &name, F &&f) {
    try {
        return f();
    } catch (const std::exception &e) {
        return {name, false, std::string("threw: ") + e.what()};
    }
}

} // namespace

std::vector<CheckResult> run_verify(const VerifyOptions &opts) {
    std::vector<CheckResult> out;
    out.push_back(guarded("gradients.ops", [&] { return check_op_gradients(opts.seed); }));
    out.push_back(guarded("gradients.pesc_block", [&] { return check_block_gradients(opts.seed); }));
    try {
        for (auto &r : check_identity(opts))
            out.push_back(std::move(r));
    } catch (const std::exception &e) {
        out.push_back({"identity", false, std::string("threw: ") + e.what()});
    }
    out.push_back(guarded("router.contract", [&] { return check_router(opts.seed); }));
    out.push_back(guarded("balance.values", [] { return check_balance(); }));
    out.push_back(guarded("params.inequality", [] { return check_param_inequality(); }));
    out.push_back(guarded("checkpoint.round_trip", [&] {
        DenseConfig dc;
        dc.n_layers = 1;
        dc.seed = opts.seed;
        const auto dense = DenseModel<float>::init(dc);
        CheckResult a = round_trip("checkpoint.round_trip", to_checkpoint(dense));
        CheckResult b = round_trip("checkpoint.round_trip", to_checkpoint(craft(dense, CraftConfig{})));
        return CheckResult{"checkpoint.round_trip", a.passed && b.passed, "dense " + a.detail + "; sparse " + b.detail};
    }));
    if (opts.checkpoint) {
        out.push_back(guarded("checkpoint.file", [&] { return round_trip("checkpoint.file", load_checkpoint(*opts.checkpoint)); }));
        out.push_back(guarded("checkpoint.identity", [&] {
            const Checkpoint ck = load_checkpoint(*opts.checkpoint);
            if (ck.kind != "dense")
                return CheckResult{"checkpoint.identity", true, "skipped: " + ck.kind + " checkpoint"};
            const auto dense = dense_from_checkpoint(ck);
            CraftConfig cc;
            cc.adapter_dim = std::min<std::size_t>(cc.adapter_dim, dense.config().d_model - 1);
            auto sparse = craft(dense, cc);
            if (opts.inject_fault)
                corrupt(sparse);
            IdentityCheck check;
            check.seq_len = std::min(check.seq_len, dense.config().max_seq_len);
            return identity_result("checkpoint.identity", dense, sparse, check);
        }));
    }
    return out;
}

} // namespace pesc
