// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/model/dense.hpp"

#include <cmath>

namespace pesc {

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
LayerNormParams<T> make_norm(std::size_t d) {
    return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
}

template <typename T>
LayerNormParams<T> clone_norm(const LayerNormParams<T> &n) {
    return {n.gamma.clone(), n.beta.clone()};
}

} // namespace

void DenseConfig::validate() const {
    auto positive = [](std::size_t v, const char *name) {
        if (v < 1)
            throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(d_ffn, "d_ffn");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0)
        throw ConfigError("d_model=" + std::to_string(d_model) + " is not divisible by n_heads=" +
                          std::to_string(n_heads));
}

void to_json(nlohmann::json &j, const DenseConfig &c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"d_ffn", c.d_ffn},
                       {"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"max_seq_len", c.max_seq_len},
                       {"seed", c.seed},             {"activation", activation_name(c.activation)}};
}

void from_json(const nlohmann::json &j, DenseConfig &c) {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("d_model").get_to(c.d_model);
    j.at("d_ffn").get_to(c.d_ffn);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("max_seq_len").get_to(c.max_seq_len);
    j.at("seed").get_to(c.seed);
    c.activation = parse_activation(j.at("activation").get<std::string>());
}

const char *category_name(ParamCategory c) noexcept {
    switch (c) {
    case ParamCategory::embedding:
        return "embedding";
    case ParamCategory::attention:
        return "attention";
    case ParamCategory::norm:
        return "norm";
    case ParamCategory::output:
        return "output";
    case ParamCategory::dense_ffn:
        return "dense_ffn";
    case ParamCategory::shared_ffn:
        return "shared_ffn";
    case ParamCategory::adapter:
        return "adapter";
    case ParamCategory::router:
        return "router";
    case ParamCategory::expert_ffn:
        return "expert_ffn";
    }
    return "?";
}

bool is_ffn_category(ParamCategory c) noexcept {
    return c == ParamCategory::dense_ffn || c == ParamCategory::shared_ffn || c == ParamCategory::adapter ||
           c == ParamCategory::router || c == ParamCategory::expert_ffn;
}

void validate_tokens(const DenseConfig &cfg, std::span<const int> tokens, std::size_t batch) {
    if (batch == 0 || tokens.empty() || tokens.size() % batch != 0)
        throw ShapeError("token buffer of length " + std::to_string(tokens.size()) + " does not split into " +
                         std::to_string(batch) + " sequences");
    const std::size_t len = tokens.size() / batch;
    if (len > cfg.max_seq_len)
        throw ShapeError("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw IndexError("token " + std::to_string(t) + " outside vocabulary of size " +
                             std::to_string(cfg.vocab_size));
}

template <typename T>
Tensor<T> SelfAttention<T>::forward(const Tensor<T> &x, std::size_t n_heads, std::size_t seq_len) const {
    const Tensor<T> q = matmul(x, wq);
    const Tensor<T> k = matmul(x, wk);
    const Tensor<T> v = matmul(x, wv);
    return matmul(causal_attention(q, k, v, n_heads, seq_len), wo);
}

template <typename T>
Backbone<T> Backbone<T>::init(const DenseConfig &cfg, Rng &rng) {
    const std::size_t d = cfg.d_model;
    const double resid_std = kInitStd / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    Backbone<T> b;
    b.tok_emb = normal_tensor<T>({cfg.vocab_size, d}, kInitStd, rng);
    b.pos_emb = normal_tensor<T>({cfg.max_seq_len, d}, kInitStd, rng);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        BlockCore<T> blk;
        blk.ln_attn = make_norm<T>(d);
        blk.attn.wq = normal_tensor<T>({d, d}, kInitStd, rng);
        blk.attn.wk = normal_tensor<T>({d, d}, kInitStd, rng);
        blk.attn.wv = normal_tensor<T>({d, d}, kInitStd, rng);
        blk.attn.wo = normal_tensor<T>({d, d}, resid_std, rng);
        blk.ln_ffn = make_norm<T>(d);
        b.blocks.push_back(std::move(blk));
    }
    b.ln_final = make_norm<T>(d);
    b.w_out = normal_tensor<T>({d, cfg.vocab_size}, kInitStd, rng);
    return b;
}

template <typename T>
Tensor<T> Backbone<T>::forward(const DenseConfig &cfg, std::span<const int> tokens, std::size_t batch,
                               const std::function<Tensor<T>(std::size_t, const Tensor<T> &)> &ffn) const {
    validate_tokens(cfg, tokens, batch);
    const std::size_t len = tokens.size() / batch;
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i)
        positions[i] = static_cast<int>(i % len);
    Tensor<T> h = add(embedding(tok_emb, tokens), embedding(pos_emb, std::span<const int>(positions)));
    for (std::size_t layer = 0; layer < blocks.size(); ++layer) {
        const BlockCore<T> &blk = blocks[layer];
        h = add(h, blk.attn.forward(blk.ln_attn.forward(h), cfg.n_heads, len));
        h = add(h, ffn(layer, blk.ln_ffn.forward(h)));
    }
    return matmul(ln_final.forward(h), w_out);
}

template <typename T>
Backbone<T> Backbone<T>::clone() const {
    Backbone<T> b;
    b.tok_emb = tok_emb.clone();
    b.pos_emb = pos_emb.clone();
    for (const auto &blk : blocks) {
        BlockCore<T> c;
        c.ln_attn = clone_norm(blk.ln_attn);
        c.attn = {blk.attn.wq.clone(), blk.attn.wk.clone(), blk.attn.wv.clone(), blk.attn.wo.clone()};
        c.ln_ffn = clone_norm(blk.ln_ffn);
        b.blocks.push_back(std::move(c));
    }
    b.ln_final = clone_norm(ln_final);
    b.w_out = w_out.clone();
    return b;
}

template <typename T>
void Backbone<T>::append_parameters(std::vector<NamedParam<T>> &out) const {
    out.push_back({"tok_emb", tok_emb, ParamCategory::embedding});
    out.push_back({"pos_emb", pos_emb, ParamCategory::embedding});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        const auto &blk = blocks[i];
        out.push_back({p + "ln_attn.gamma", blk.ln_attn.gamma, ParamCategory::norm});
        out.push_back({p + "ln_attn.beta", blk.ln_attn.beta, ParamCategory::norm});
        out.push_back({p + "attn.wq", blk.attn.wq, ParamCategory::attention});
        out.push_back({p + "attn.wk", blk.attn.wk, ParamCategory::attention});
        out.push_back({p + "attn.wv", blk.attn.wv, ParamCategory::attention});
        out.push_back({p + "attn.wo", blk.attn.wo, ParamCategory::attention});
        out.push_back({p + "ln_ffn.gamma", blk.ln_ffn.gamma, ParamCategory::norm});
        out.push_back({p + "ln_ffn.beta", blk.ln_ffn.beta, ParamCategory::norm});
    }
    out.push_back({"ln_final.gamma", ln_final.gamma, ParamCategory::norm});
    out.push_back({"ln_final.beta", ln_final.beta, ParamCategory::norm});
    out.push_back({"w_out", w_out, ParamCategory::output});
}

template <typename T>
DenseModel<T>::DenseModel(DenseConfig cfg, Backbone<T> backbone, std::vector<FeedForward<T>> ffns)
    : config_(std::move(cfg)), backbone_(std::move(backbone)), ffns_(std::move(ffns)) {
    if (ffns_.size() != config_.n_layers || backbone_.blocks.size() != config_.n_layers)
        throw ConfigError("dense model needs one block and one FFN per layer");
}

template <typename T>
DenseModel<T> DenseModel<T>::init(const DenseConfig &cfg) {
    cfg.validate();
    Rng backbone_rng(derive_seed(cfg.seed, 0));
    Backbone<T> backbone = Backbone<T>::init(cfg, backbone_rng);
    const double resid_std = kInitStd / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    std::vector<FeedForward<T>> ffns;
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        Rng rng(derive_seed(cfg.seed, 1 + i));
        FeedForward<T> f;
        f.w_in = normal_tensor<T>({cfg.d_model, cfg.d_ffn}, kInitStd, rng);
        f.w_out = normal_tensor<T>({cfg.d_ffn, cfg.d_model}, resid_std, rng);
        ffns.push_back(std::move(f));
    }
    return DenseModel<T>(cfg, std::move(backbone), std::move(ffns));
}

template <typename T>
Tensor<T> DenseModel<T>::forward(std::span<const int> tokens, std::size_t batch) const {
    return backbone_.forward(config_, tokens, batch, [this](std::size_t layer, const Tensor<T> &x) {
        return ffns_[layer].forward(x, config_.activation);
    });
}

template <typename T>
std::vector<NamedParam<T>> DenseModel<T>::parameters() const {
    std::vector<NamedParam<T>> out;
    backbone_.append_parameters(out);
    for (std::size_t i = 0; i < ffns_.size(); ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".ffn.";
        out.push_back({p + "w_in", ffns_[i].w_in, ParamCategory::dense_ffn});
        out.push_back({p + "w_out", ffns_[i].w_out, ParamCategory::dense_ffn});
    }
    return out;
}

template <typename T>
std::size_t DenseModel<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto &p : parameters())
        n += p.tensor.numel();
    return n;
}

template <typename T>
DenseModel<T> DenseModel<T>::clone() const {
    std::vector<FeedForward<T>> ffns;
    for (const auto &f : ffns_)
        ffns.push_back(f.clone());
    return DenseModel<T>(config_, backbone_.clone(), std::move(ffns));
}

template struct SelfAttention<float>;
template struct SelfAttention<double>;
template struct Backbone<float>;
template struct Backbone<double>;
template class DenseModel<float>;
template class DenseModel<double>;

} // namespace pesc
