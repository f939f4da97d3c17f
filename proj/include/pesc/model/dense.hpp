// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pesc/core/ops.hpp"
#include "pesc/core/random.hpp"
#include "pesc/core/tensor.hpp"

namespace pesc {

struct DenseConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 64;
    std::size_t d_ffn = 256;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t max_seq_len = 128;
    std::uint64_t seed = 0;
    Activation activation = Activation::gelu;

    void validate() const;
    bool operator==(const DenseConfig &) const = default;
};

void to_json(nlohmann::json &j, const DenseConfig &c);
void from_json(const nlohmann::json &j, DenseConfig &c);

/// Which part of the network a parameter belongs to. Training modes decide
/// trainability per category.
enum class ParamCategory {
    embedding,
    attention,
    norm,
    output,
    dense_ffn,
    shared_ffn,
    adapter,
    router,
    expert_ffn,
};

[[nodiscard]] const char *category_name(ParamCategory c) noexcept;
[[nodiscard]] bool is_ffn_category(ParamCategory c) noexcept;

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
    ParamCategory category;
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;

    [[nodiscard]] Tensor<T> forward(const Tensor<T> &x) const { return layer_norm(x, gamma, beta); }
};

/// The FFN block F: sigma(x W_in) W_out, bias-free.
template <typename T>
struct FeedForward {
    Tensor<T> w_in;  // d_model x d_ffn
    Tensor<T> w_out; // d_ffn x d_model

    [[nodiscard]] Tensor<T> forward(const Tensor<T> &x, Activation act) const {
        return matmul(activation(matmul(x, w_in), act), w_out);
    }
    [[nodiscard]] std::size_t parameter_count() const { return w_in.numel() + w_out.numel(); }
    [[nodiscard]] FeedForward clone() const { return {w_in.clone(), w_out.clone()}; }
};

template <typename T>
struct SelfAttention {
    Tensor<T> wq, wk, wv, wo; // each d_model x d_model

    [[nodiscard]] Tensor<T> forward(const Tensor<T> &x, std::size_t n_heads, std::size_t seq_len) const;
};

/// Everything in a block except the FFN: two norms and attention.
template <typename T>
struct BlockCore {
    LayerNormParams<T> ln_attn;
    SelfAttention<T> attn;
    LayerNormParams<T> ln_ffn;
};

/// Embeddings, per-block non-FFN parts and the output head. Shared verbatim
/// between the dense model and any model crafted from it.
template <typename T>
struct Backbone {
    Tensor<T> tok_emb; // vocab x d_model
    Tensor<T> pos_emb; // max_seq_len x d_model
    std::vector<BlockCore<T>> blocks;
    LayerNormParams<T> ln_final;
    Tensor<T> w_out; // d_model x vocab

    static Backbone init(const DenseConfig &cfg, Rng &rng);

    /// Runs the pre-norm residual stack. `ffn(layer, x)` evaluates the FFN
    /// slot of block `layer` on the normalized input x.
    Tensor<T> forward(const DenseConfig &cfg, std::span<const int> tokens, std::size_t batch,
                      const std::function<Tensor<T>(std::size_t, const Tensor<T> &)> &ffn) const;

    [[nodiscard]] Backbone clone() const;
    void append_parameters(std::vector<NamedParam<T>> &out) const;
};

template <typename T>
class DenseModel {
public:
    static DenseModel init(const DenseConfig &cfg);

    /// Logits [batch*seq_len x vocab] for `batch` sequences stacked in `tokens`.
    [[nodiscard]] Tensor<T> forward(std::span<const int> tokens, std::size_t batch = 1) const;

    [[nodiscard]] const DenseConfig &config() const noexcept { return config_; }
    [[nodiscard]] Backbone<T> &backbone() noexcept { return backbone_; }
    [[nodiscard]] const Backbone<T> &backbone() const noexcept { return backbone_; }
    [[nodiscard]] std::vector<FeedForward<T>> &ffns() noexcept { return ffns_; }
    [[nodiscard]] const std::vector<FeedForward<T>> &ffns() const noexcept { return ffns_; }

    /// Parameters in a fixed, reproducible order.
    [[nodiscard]] std::vector<NamedParam<T>> parameters() const;
    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] DenseModel clone() const;

    DenseModel(DenseConfig cfg, Backbone<T> backbone, std::vector<FeedForward<T>> ffns);

private:
    DenseConfig config_;
    Backbone<T> backbone_;
    std::vector<FeedForward<T>> ffns_;
};

/// Checks token ids and sequence length against the config.
void validate_tokens(const DenseConfig &cfg, std::span<const int> tokens, std::size_t batch);

extern template struct Backbone<float>;
extern template struct Backbone<double>;
extern template class DenseModel<float>;
extern template class DenseModel<double>;

} // namespace pesc
