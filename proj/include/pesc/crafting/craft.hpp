// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include <nlohmann/json.hpp>

#include "pesc/model/dense.hpp"
#include "pesc/moe/moe.hpp"

namespace pesc {

enum class CraftMode { pesc, full };

[[nodiscard]] CraftMode parse_craft_mode(std::string_view name);
[[nodiscard]] std::string craft_mode_name(CraftMode m);

struct CraftConfig {
    std::size_t n_experts = 8;
    std::size_t k = 2;
    std::size_t adapter_dim = 16;
    CraftMode mode = CraftMode::pesc;
    bool trainable_shared = false;
    std::uint64_t router_seed = 0;
    /// Permits adapter_dim >= d_model. Only the approximation-gap experiment
    /// needs this (full-width adapters).
    bool allow_wide_adapter = false;

    void validate(const DenseConfig &dense) const;
    bool operator==(const CraftConfig &) const = default;
};

void to_json(nlohmann::json &j, const CraftConfig &c);
void from_json(const nlohmann::json &j, CraftConfig &c);

template <typename T>
using RouteObserver = std::function<void(std::size_t layer, const RouterDecision<T> &)>;

template <typename T>
struct SparseForward {
    Tensor<T> logits;
    std::vector<DispatchStats<T>> stats; // one per block
};

/// Dense backbone with every FFN replaced by an MoE layer. In PESC mode the
/// layers share one FFN copy plus adapters; in full mode each expert owns an
/// FFN copy.
template <typename T>
class SparseModel {
public:
    SparseModel(DenseConfig dense_cfg, CraftConfig craft_cfg, Backbone<T> backbone, std::vector<MoELayer<T>> pesc,
                std::vector<UpcycledMoELayer<T>> full);

    [[nodiscard]] SparseForward<T> forward(std::span<const int> tokens, std::size_t batch = 1,
                                           ProbSource source = ProbSource::full,
                                           const RouteObserver<T> &observer = {}) const;

    [[nodiscard]] const DenseConfig &dense_config() const noexcept { return dense_cfg_; }
    [[nodiscard]] const CraftConfig &craft_config() const noexcept { return craft_cfg_; }
    [[nodiscard]] CraftMode mode() const noexcept { return craft_cfg_.mode; }
    [[nodiscard]] std::size_t n_layers() const noexcept { return backbone_.blocks.size(); }

    [[nodiscard]] Backbone<T> &backbone() noexcept { return backbone_; }
    [[nodiscard]] const Backbone<T> &backbone() const noexcept { return backbone_; }
    [[nodiscard]] std::vector<MoELayer<T>> &pesc_layers() noexcept { return pesc_; }
    [[nodiscard]] const std::vector<MoELayer<T>> &pesc_layers() const noexcept { return pesc_; }
    [[nodiscard]] std::vector<UpcycledMoELayer<T>> &full_layers() noexcept { return full_; }
    [[nodiscard]] const std::vector<UpcycledMoELayer<T>> &full_layers() const noexcept { return full_; }

    [[nodiscard]] std::vector<NamedParam<T>> parameters() const;
    [[nodiscard]] SparseModel clone() const;

private:
    DenseConfig dense_cfg_;
    CraftConfig craft_cfg_;
    Backbone<T> backbone_;
    std::vector<MoELayer<T>> pesc_;
    std::vector<UpcycledMoELayer<T>> full_;
};

/// Replaces every FFN of `dense` with an MoE layer initialized from it. The
/// source model is not modified and shares no storage with the result.
template <typename T>
SparseModel<T> craft(const DenseModel<T> &dense, const CraftConfig &cfg);

/// Dense model equivalent to the sparse model's starting point: its backbone
/// with the shared FFN (PESC) or expert 0 (full mode) in each block.
template <typename T>
DenseModel<T> extract_dense(const SparseModel<T> &sparse);

struct BlockParams {
    std::size_t shared = 0;          // |theta_o|
    std::size_t adapters = 0;        // sum_i |omega_i|
    std::size_t router = 0;          // |W_r|
    std::size_t full_equivalent = 0; // n * |theta_o|
    [[nodiscard]] bool pesc_is_smaller() const { return adapters + shared < full_equivalent; }
};

struct ParamReport {
    std::string model_kind; // dense | pesc | full
    std::size_t n_experts = 0;
    std::size_t k = 0;
    std::uint64_t combinations = 0; // C(n, k)
    std::size_t shared_total = 0;
    std::size_t adapter_total = 0;
    std::size_t router_total = 0;
    std::size_t full_equivalent_total = 0;
    std::size_t dense_ffn_total = 0;
    std::size_t non_ffn_total = 0;
    std::size_t total = 0;
    std::size_t pesc_trainable = 0; // adapters + routers (+ shared when trainable)
    std::size_t full_trainable = 0; // n FFN copies + routers
    std::vector<BlockParams> blocks;

    /// sum |omega_i| + |theta_o| < n |theta_o| in every block.
    [[nodiscard]] bool inequality_holds() const;
};

void to_json(nlohmann::json &j, const ParamReport &r);

[[nodiscard]] std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

template <typename T>
ParamReport param_report(const SparseModel<T> &model);
template <typename T>
ParamReport param_report(const DenseModel<T> &model);

struct IdentityCheck {
    std::size_t trials = 20;
    double tolerance = 1e-5;
    std::size_t seq_len = 64;
    std::uint64_t seed = 0;
};

/// Max absolute logit deviation between `dense` and `sparse` over random
/// token sequences. Throws IdentityViolation (carrying the trial seed) when
/// the deviation reaches the tolerance.
template <typename T>
double verify_identity(const DenseModel<T> &dense, const SparseModel<T> &sparse, const IdentityCheck &check = {});

/// FNV-1a over the raw bytes of every parameter, in order.
template <typename T>
[[nodiscard]] std::uint64_t parameter_fingerprint(const std::vector<NamedParam<T>> &params);

extern template class SparseModel<float>;
extern template class SparseModel<double>;

} // namespace pesc
