// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/moe/moe.hpp"

#include <cmath>

namespace pesc {

namespace {

/// Per-expert token rows and flat gate positions for one routing decision.
struct ExpertAssignment {
    std::vector<std::vector<std::size_t>> rows;
    std::vector<std::vector<std::size_t>> gate_pos;
};

template <typename T>
ExpertAssignment assign(const RouterDecision<T> &d) {
    ExpertAssignment a;
    a.rows.resize(d.n);
    a.gate_pos.resize(d.n);
    for (std::size_t t = 0; t < d.tokens; ++t) {
        for (std::size_t s = 0; s < d.k; ++s) {
            const std::size_t e = d.expert(t, s);
            a.rows[e].push_back(t);
            a.gate_pos[e].push_back(t * d.n + e);
        }
    }
    return a;
}

/// Mixes per-expert outputs: y_t = sum over selected e of gate(t, e) * expert_fn(e, rows).
template <typename T, typename ExpertFn>
Tensor<T> mix(const Tensor<T> &input, const RouterDecision<T> &decision, ExpertFn &&expert_fn) {
    const ExpertAssignment a = assign(decision);
    std::vector<Tensor<T>> parts;
    std::vector<std::vector<std::size_t>> rows;
    for (std::size_t e = 0; e < decision.n; ++e) {
        if (a.rows[e].empty())
            continue;
        const Tensor<T> xe = gather_rows(input, std::span<const std::size_t>(a.rows[e]));
        const Tensor<T> ge = take(decision.gates, std::span<const std::size_t>(a.gate_pos[e]));
        parts.push_back(scale_rows(expert_fn(e, xe), ge));
        rows.push_back(a.rows[e]);
    }
    return scatter_add_rows(std::span<const Tensor<T>>(parts), std::span<const std::vector<std::size_t>>(rows),
                            decision.tokens);
}

} // namespace

template <typename T>
Adapter<T> Adapter<T>::init(std::size_t d_model, std::size_t adapter_dim, Activation act, Rng &rng,
                            double down_std, bool allow_wide) {
    if (adapter_dim == 0)
        throw ConfigError("adapter_dim must be >= 1");
    if (!allow_wide && adapter_dim >= d_model)
        throw ConfigError("adapter_dim=" + std::to_string(adapter_dim) + " must be smaller than d_model=" +
                          std::to_string(d_model));
    Adapter<T> a;
    a.w_down = normal_tensor<T>({d_model, adapter_dim}, down_std, rng);
    a.w_up = Tensor<T>::zeros({adapter_dim, d_model}, true);
    a.act = act;
    return a;
}

template <typename T>
Tensor<T> Adapter<T>::forward(const Tensor<T> &x) const {
    if (x.rank() != 2 || x.cols() != w_down.dim(0))
        throw ShapeError("adapter: input " + shape_str(x.shape()) + " does not have width " +
                         std::to_string(w_down.dim(0)));
    return add(matmul(activation(matmul(x, w_down), act), w_up), x);
}

template <typename T>
Router<T> Router<T>::init(std::size_t n_experts, std::size_t d_model, std::size_t k, Rng &rng) {
    if (k == 0 || k > n_experts)
        throw ConfigError("router: k=" + std::to_string(k) + " must satisfy 1 <= k <= n=" + std::to_string(n_experts));
    Router<T> r;
    r.w_r = normal_tensor<T>({n_experts, d_model}, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
    r.k = k;
    return r;
}

template <typename T>
RouterDecision<T> route_logits(const Tensor<T> &logits, std::size_t k) {
    if (logits.rank() != 2)
        throw ShapeError("route: logits must be 2-D, got " + shape_str(logits.shape()));
    RouterDecision<T> d;
    d.tokens = logits.dim(0);
    d.n = logits.dim(1);
    d.k = k;
    if (k == 0 || k > d.n)
        throw ConfigError("route: k=" + std::to_string(k) + " must satisfy 1 <= k <= n=" + std::to_string(d.n));
    d.logits = logits;
    d.indices.resize(d.tokens * k);
    const auto ld = logits.data();
    for (std::size_t t = 0; t < d.tokens; ++t)
        top_k_indices(ld.subspan(t * d.n, d.n), k, std::span<std::size_t>(d.indices).subspan(t * k, k));
    d.gates = top_k_softmax(logits, k);
    d.probs = softmax(logits, 1);
    return d;
}

template <typename T>
RouterDecision<T> route(const Tensor<T> &x, const Router<T> &router) {
    return route_logits(matmul_nt(x, router.w_r), router.k);
}

ProbSource parse_prob_source(std::string_view name) {
    if (name == "full")
        return ProbSource::full;
    if (name == "masked")
        return ProbSource::masked;
    throw ConfigError("unknown balance probability source '" + std::string(name) + "' (expected full or masked)");
}

std::string prob_source_name(ProbSource p) { return p == ProbSource::full ? "full" : "masked"; }

template <typename T>
DispatchStats<T> dispatch_stats(const RouterDecision<T> &decision, ProbSource source) {
    DispatchStats<T> s;
    s.tokens = decision.tokens;
    s.k = decision.k;
    s.f.assign(decision.n, 0.0);
    for (std::size_t e : decision.indices)
        s.f[e] += 1.0;
    const double slots = static_cast<double>(decision.tokens * decision.k);
    for (double &v : s.f)
        v /= slots;
    s.p = mean_rows(source == ProbSource::full ? decision.probs : decision.gates);
    return s;
}

template <typename T>
Tensor<T> balance_loss(const DispatchStats<T> &stats, T alpha, std::size_t n) {
    if (n != stats.n() || stats.p.numel() != n)
        throw ShapeError("balance_loss: n=" + std::to_string(n) + " but statistics cover " +
                         std::to_string(stats.n()) + " experts");
    std::vector<T> f(stats.f.begin(), stats.f.end());
    const Tensor<T> ft = Tensor<T>::from({n}, std::move(f));
    return scale(sum(mul(ft, stats.p)), alpha * static_cast<T>(n));
}

template <typename T>
MoEOutput<T> MoELayer<T>::forward(const Tensor<T> &x, ProbSource source) const {
    MoEOutput<T> out;
    out.decision = route(x, router);
    out.stats = dispatch_stats(out.decision, source);
    // A frozen shared FFN must not receive gradient even if its tensors
    // were flagged requires_grad elsewhere.
    const Tensor<T> shared_out = trainable_shared
                                     ? shared.forward(x, act)
                                     : FeedForward<T>{shared.w_in.detach(), shared.w_out.detach()}.forward(x, act);
    out.y = mix(shared_out, out.decision,
                [this](std::size_t e, const Tensor<T> &rows) { return adapters[e].forward(rows); });
    return out;
}

template <typename T>
MoELayer<T> MoELayer<T>::clone() const {
    MoELayer<T> m;
    m.shared = shared.clone();
    for (const auto &a : adapters)
        m.adapters.push_back(a.clone());
    m.router = router.clone();
    m.trainable_shared = trainable_shared;
    m.act = act;
    return m;
}

template <typename T>
MoEOutput<T> UpcycledMoELayer<T>::forward(const Tensor<T> &x, ProbSource source) const {
    MoEOutput<T> out;
    out.decision = route(x, router);
    out.stats = dispatch_stats(out.decision, source);
    out.y = mix(x, out.decision,
                [this](std::size_t e, const Tensor<T> &rows) { return experts[e].forward(rows, act); });
    return out;
}

template <typename T>
UpcycledMoELayer<T> UpcycledMoELayer<T>::clone() const {
    UpcycledMoELayer<T> m;
    for (const auto &e : experts)
        m.experts.push_back(e.clone());
    m.router = router.clone();
    m.act = act;
    return m;
}

template struct Adapter<float>;
template struct Adapter<double>;
template struct Router<float>;
template struct Router<double>;
template struct MoELayer<float>;
template struct MoELayer<double>;
template struct UpcycledMoELayer<float>;
template struct UpcycledMoELayer<double>;
template RouterDecision<float> route_logits(const Tensor<float> &, std::size_t);
template RouterDecision<double> route_logits(const Tensor<double> &, std::size_t);
template RouterDecision<float> route(const Tensor<float> &, const Router<float> &);
template RouterDecision<double> route(const Tensor<double> &, const Router<double> &);
template DispatchStats<float> dispatch_stats(const RouterDecision<float> &, ProbSource);
template DispatchStats<double> dispatch_stats(const RouterDecision<double> &, ProbSource);
template Tensor<float> balance_loss(const DispatchStats<float> &, float, std::size_t);
template Tensor<double> balance_loss(const DispatchStats<double> &, double, std::size_t);

} // namespace pesc
