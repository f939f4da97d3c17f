// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "pesc/core/ops.hpp"
#include "pesc/core/random.hpp"
#include "pesc/model/dense.hpp"

namespace pesc {

/// Bottleneck adapter: sigma(x W_down) W_up + x. Created with W_up = 0, which
/// makes it an exact identity map.
template <typename T>
struct Adapter {
    Tensor<T> w_down; // d_model x adapter_dim
    Tensor<T> w_up;   // adapter_dim x d_model
    Activation act = Activation::gelu;

    /// `allow_wide` lifts the adapter_dim < d_model bottleneck requirement.
    static Adapter init(std::size_t d_model, std::size_t adapter_dim, Activation act, Rng &rng, double down_std,
                        bool allow_wide = false);

    [[nodiscard]] Tensor<T> forward(const Tensor<T> &x) const;
    [[nodiscard]] std::size_t parameter_count() const { return w_down.numel() + w_up.numel(); }
    [[nodiscard]] Adapter clone() const { return {w_down.clone(), w_up.clone(), act}; }
};

template <typename T>
Tensor<T> adapter_forward(const Tensor<T> &x, const Adapter<T> &a) {
    return a.forward(x);
}

/// Linear gate producing n logits per token; keeps the k largest.
template <typename T>
struct Router {
    Tensor<T> w_r; // n_experts x d_model
    std::size_t k = 2;

    /// Normal weights with standard deviation d_model^-1/2.
    static Router init(std::size_t n_experts, std::size_t d_model, std::size_t k, Rng &rng);

    [[nodiscard]] std::size_t n_experts() const { return w_r.dim(0); }
    [[nodiscard]] Router clone() const { return {w_r.clone(), k}; }
};

template <typename T>
struct RouterDecision {
    std::size_t tokens = 0;
    std::size_t n = 0;
    std::size_t k = 0;
    /// tokens x k selected experts, highest logit first.
    std::vector<std::size_t> indices;
    Tensor<T> logits; // tokens x n
    Tensor<T> gates;  // tokens x n, softmax over the kept logits, exactly 0 elsewhere
    Tensor<T> probs;  // tokens x n, softmax over all logits

    [[nodiscard]] std::size_t expert(std::size_t token, std::size_t slot) const { return indices[token * k + slot]; }
    [[nodiscard]] T gate(std::size_t token, std::size_t slot) const {
        return gates.data()[token * n + expert(token, slot)];
    }
};

/// KeepTopK + softmax applied to precomputed logits [tokens x n].
template <typename T>
RouterDecision<T> route_logits(const Tensor<T> &logits, std::size_t k);

/// logits = x W_r^T, then KeepTopK + softmax.
template <typename T>
RouterDecision<T> route(const Tensor<T> &x, const Router<T> &router);

/// Which router distribution feeds the balance statistic p.
enum class ProbSource { full, masked };

[[nodiscard]] ProbSource parse_prob_source(std::string_view name);
[[nodiscard]] std::string prob_source_name(ProbSource p);

template <typename T>
struct DispatchStats {
    /// Fraction of the tokens*k dispatch slots assigned to each expert.
    std::vector<double> f;
    /// Mean router probability per expert over the batch; differentiable.
    Tensor<T> p;
    std::size_t tokens = 0;
    std::size_t k = 0;

    [[nodiscard]] std::size_t n() const { return f.size(); }
};

template <typename T>
DispatchStats<T> dispatch_stats(const RouterDecision<T> &decision, ProbSource source);

/// alpha * n * sum_i f_i p_i. Gradient flows through p only.
template <typename T>
Tensor<T> balance_loss(const DispatchStats<T> &stats, T alpha, std::size_t n);

template <typename T>
struct MoEOutput {
    Tensor<T> y;
    DispatchStats<T> stats;
    RouterDecision<T> decision;
};

/// Parameter-efficient MoE layer: one shared FFN evaluated once per token,
/// followed by the selected experts' adapters, mixed by the gate values.
template <typename T>
struct MoELayer {
    FeedForward<T> shared;
    std::vector<Adapter<T>> adapters;
    Router<T> router;
    bool trainable_shared = false;
    Activation act = Activation::gelu;

    [[nodiscard]] std::size_t n_experts() const { return adapters.size(); }
    [[nodiscard]] MoEOutput<T> forward(const Tensor<T> &x, ProbSource source = ProbSource::full) const;
    [[nodiscard]] MoELayer clone() const;
};

/// Full sparsity crafting: n independent FFN copies, routed the same way.
template <typename T>
struct UpcycledMoELayer {
    std::vector<FeedForward<T>> experts;
    Router<T> router;
    Activation act = Activation::gelu;

    [[nodiscard]] std::size_t n_experts() const { return experts.size(); }
    [[nodiscard]] MoEOutput<T> forward(const Tensor<T> &x, ProbSource source = ProbSource::full) const;
    [[nodiscard]] UpcycledMoELayer clone() const;
};

template <typename T>
MoEOutput<T> moe_forward(const Tensor<T> &x, const MoELayer<T> &layer) {
    return layer.forward(x);
}

extern template struct Adapter<float>;
extern template struct Adapter<double>;
extern template struct Router<float>;
extern template struct Router<double>;
extern template struct MoELayer<float>;
extern template struct MoELayer<double>;
extern template struct UpcycledMoELayer<float>;
extern template struct UpcycledMoELayer<double>;

} // namespace pesc
