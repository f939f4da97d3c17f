// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/crafting/craft.hpp"

#include <cmath>
#include <cstring>

namespace pesc {

CraftMode parse_craft_mode(std::string_view name) {
    if (name == "pesc")
        return CraftMode::pesc;
    if (name == "full" || name == "full-crafting")
        return CraftMode::full;
    throw ConfigError("unknown craft mode '" + std::string(name) + "' (expected pesc or full)");
}

std::string craft_mode_name(CraftMode m) { return m == CraftMode::pesc ? "pesc" : "full"; }

void CraftConfig::validate(const DenseConfig &dense) const {
    if (n_experts < 1)
        throw ConfigError("n_experts must be >= 1");
    if (k < 1 || k > n_experts)
        throw ConfigError("k=" + std::to_string(k) + " must satisfy 1 <= k <= n_experts=" + std::to_string(n_experts));
    if (adapter_dim < 1)
        throw ConfigError("adapter_dim must be >= 1");
    if (mode == CraftMode::pesc && !allow_wide_adapter && adapter_dim >= dense.d_model)
        throw ConfigError("adapter_dim=" + std::to_string(adapter_dim) + " must be smaller than d_model=" +
                          std::to_string(dense.d_model));
}

void to_json(nlohmann::json &j, const CraftConfig &c) {
    j = nlohmann::json{{"n_experts", c.n_experts},
                       {"k", c.k},
                       {"adapter_dim", c.adapter_dim},
                       {"mode", craft_mode_name(c.mode)},
                       {"trainable_shared", c.trainable_shared},
                       {"router_seed", c.router_seed},
                       {"allow_wide_adapter", c.allow_wide_adapter}};
}

void from_json(const nlohmann::json &j, CraftConfig &c) {
    j.at("n_experts").get_to(c.n_experts);
    j.at("k").get_to(c.k);
    j.at("adapter_dim").get_to(c.adapter_dim);
    c.mode = parse_craft_mode(j.at("mode").get<std::string>());
    j.at("trainable_shared").get_to(c.trainable_shared);
    j.at("router_seed").get_to(c.router_seed);
    j.at("allow_wide_adapter").get_to(c.allow_wide_adapter);
}

template <typename T>
SparseModel<T>::SparseModel(DenseConfig dense_cfg, CraftConfig craft_cfg, Backbone<T> backbone,
                            std::vector<MoELayer<T>> pesc, std::vector<UpcycledMoELayer<T>> full)
    : dense_cfg_(std::move(dense_cfg)), craft_cfg_(std::move(craft_cfg)), backbone_(std::move(backbone)),
      pesc_(std::move(pesc)), full_(std::move(full)) {
    const std::size_t expected = dense_cfg_.n_layers;
    const bool ok = craft_cfg_.mode == CraftMode::pesc ? (pesc_.size() == expected && full_.empty())
                                                        : (full_.size() == expected && pesc_.empty());
    if (!ok || backbone_.blocks.size() != expected)
        throw ConfigError("sparse model needs exactly one MoE layer of the configured mode per block");
}

template <typename T>
SparseForward<T> SparseModel<T>::forward(std::span<const int> tokens, std::size_t batch, ProbSource source,
                                         const RouteObserver<T> &observer) const {
    SparseForward<T> out;
    out.stats.reserve(n_layers());
    out.logits = backbone_.forward(dense_cfg_, tokens, batch, [&](std::size_t layer, const Tensor<T> &x) {
        MoEOutput<T> res = craft_cfg_.mode == CraftMode::pesc ? pesc_[layer].forward(x, source)
                                                              : full_[layer].forward(x, source);
        if (observer)
            observer(layer, res.decision);
        out.stats.push_back(std::move(res.stats));
        return res.y;
    });
    return out;
}

template <typename T>
std::vector<NamedParam<T>> SparseModel<T>::parameters() const {
    std::vector<NamedParam<T>> out;
    backbone_.append_parameters(out);
    for (std::size_t i = 0; i < n_layers(); ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".moe.";
        if (craft_cfg_.mode == CraftMode::pesc) {
            const MoELayer<T> &m = pesc_[i];
            out.push_back({p + "shared.w_in", m.shared.w_in, ParamCategory::shared_ffn});
            out.push_back({p + "shared.w_out", m.shared.w_out, ParamCategory::shared_ffn});
            for (std::size_t e = 0; e < m.adapters.size(); ++e) {
                const std::string a = p + "adapters." + std::to_string(e) + ".";
                out.push_back({a + "w_down", m.adapters[e].w_down, ParamCategory::adapter});
                out.push_back({a + "w_up", m.adapters[e].w_up, ParamCategory::adapter});
            }
            out.push_back({p + "router.w_r", m.router.w_r, ParamCategory::router});
        } else {
            const UpcycledMoELayer<T> &m = full_[i];
            for (std::size_t e = 0; e < m.experts.size(); ++e) {
                const std::string x = p + "experts." + std::to_string(e) + ".";
                out.push_back({x + "w_in", m.experts[e].w_in, ParamCategory::expert_ffn});
                out.push_back({x + "w_out", m.experts[e].w_out, ParamCategory::expert_ffn});
            }
            out.push_back({p + "router.w_r", m.router.w_r, ParamCategory::router});
        }
    }
    return out;
}

template <typename T>
SparseModel<T> SparseModel<T>::clone() const {
    std::vector<MoELayer<T>> pesc;
    std::vector<UpcycledMoELayer<T>> full;
    for (const auto &m : pesc_)
        pesc.push_back(m.clone());
    for (const auto &m : full_)
        full.push_back(m.clone());
    return SparseModel<T>(dense_cfg_, craft_cfg_, backbone_.clone(), std::move(pesc), std::move(full));
}

template <typename T>
SparseModel<T> craft(const DenseModel<T> &dense, const CraftConfig &cfg) {
    const DenseConfig &dc = dense.config();
    dc.validate();
    cfg.validate(dc);
    const double down_std = 1.0 / std::sqrt(static_cast<double>(dc.d_model));
    std::vector<MoELayer<T>> pesc;
    std::vector<UpcycledMoELayer<T>> full;
    for (std::size_t i = 0; i < dc.n_layers; ++i) {
        Rng rng(derive_seed(cfg.router_seed, i));
        Router<T> router = Router<T>::init(cfg.n_experts, dc.d_model, cfg.k, rng);
        const FeedForward<T> &source = dense.ffns()[i];
        if (cfg.mode == CraftMode::pesc) {
            MoELayer<T> m;
            m.shared = source.clone();
            m.shared.w_in.set_requires_grad(cfg.trainable_shared);
            m.shared.w_out.set_requires_grad(cfg.trainable_shared);
            m.trainable_shared = cfg.trainable_shared;
            m.act = dc.activation;
            for (std::size_t e = 0; e < cfg.n_experts; ++e)
                m.adapters.push_back(
                    Adapter<T>::init(dc.d_model, cfg.adapter_dim, dc.activation, rng, down_std, cfg.allow_wide_adapter));
            m.router = std::move(router);
            pesc.push_back(std::move(m));
        } else {
            UpcycledMoELayer<T> m;
            for (std::size_t e = 0; e < cfg.n_experts; ++e)
                m.experts.push_back(source.clone());
            m.router = std::move(router);
            m.act = dc.activation;
            full.push_back(std::move(m));
        }
    }
    return SparseModel<T>(dc, cfg, dense.backbone().clone(), std::move(pesc), std::move(full));
}

template <typename T>
DenseModel<T> extract_dense(const SparseModel<T> &sparse) {
    std::vector<FeedForward<T>> ffns;
    for (std::size_t i = 0; i < sparse.n_layers(); ++i) {
        FeedForward<T> f = sparse.mode() == CraftMode::pesc ? sparse.pesc_layers()[i].shared.clone()
                                                           : sparse.full_layers()[i].experts.front().clone();
        f.w_in.set_requires_grad(true);
        f.w_out.set_requires_grad(true);
        ffns.push_back(std::move(f));
    }
    return DenseModel<T>(sparse.dense_config(), sparse.backbone().clone(), std::move(ffns));
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
    if (k > n)
        return 0;
    k = std::min(k, n - k);
    std::uint64_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i)
        r = r * (n - k + i) / i;
    return r;
}

bool ParamReport::inequality_holds() const {
    if (blocks.empty())
        return false;
    for (const auto &b : blocks)
        if (!b.pesc_is_smaller())
            return false;
    return true;
}

void to_json(nlohmann::json &j, const ParamReport &r) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto &b : r.blocks)
        blocks.push_back({{"shared", b.shared},
                          {"adapters", b.adapters},
                          {"router", b.router},
                          {"full_equivalent", b.full_equivalent},
                          {"pesc_smaller_than_full", b.pesc_is_smaller()}});
    j = nlohmann::json{{"model_kind", r.model_kind},
                       {"n_experts", r.n_experts},
                       {"k", r.k},
                       {"expert_combinations", r.combinations},
                       {"shared_total", r.shared_total},
                       {"adapter_total", r.adapter_total},
                       {"router_total", r.router_total},
                       {"full_equivalent_total", r.full_equivalent_total},
                       {"dense_ffn_total", r.dense_ffn_total},
                       {"non_ffn_total", r.non_ffn_total},
                       {"total", r.total},
                       {"pesc_trainable", r.pesc_trainable},
                       {"full_trainable", r.full_trainable},
                       {"inequality_holds", r.inequality_holds()},
                       {"blocks", blocks}};
}

template <typename T>
ParamReport param_report(const SparseModel<T> &model) {
    const CraftConfig &cc = model.craft_config();
    ParamReport r;
    r.model_kind = craft_mode_name(cc.mode);
    r.n_experts = cc.n_experts;
    r.k = cc.k;
    r.combinations = binomial(cc.n_experts, cc.k);
    for (std::size_t i = 0; i < model.n_layers(); ++i) {
        BlockParams b;
        if (cc.mode == CraftMode::pesc) {
            const MoELayer<T> &m = model.pesc_layers()[i];
            b.shared = m.shared.parameter_count();
            for (const auto &a : m.adapters)
                b.adapters += a.parameter_count();
            b.router = m.router.w_r.numel();
        } else {
            const UpcycledMoELayer<T> &m = model.full_layers()[i];
            b.shared = m.experts.front().parameter_count();
            b.router = m.router.w_r.numel();
        }
        b.full_equivalent = cc.n_experts * b.shared;
        r.shared_total += b.shared;
        r.adapter_total += b.adapters;
        r.router_total += b.router;
        r.full_equivalent_total += b.full_equivalent;
        r.blocks.push_back(b);
    }
    std::vector<NamedParam<T>> backbone;
    model.backbone().append_parameters(backbone);
    for (const auto &p : backbone)
        r.non_ffn_total += p.tensor.numel();
    r.pesc_trainable = r.adapter_total + r.router_total + (cc.trainable_shared ? r.shared_total : 0);
    r.full_trainable = r.full_equivalent_total + r.router_total;
    for (const auto &p : model.parameters())
        r.total += p.tensor.numel();
    return r;
}

template <typename T>
ParamReport param_report(const DenseModel<T> &model) {
    ParamReport r;
    r.model_kind = "dense";
    for (const auto &f : model.ffns()) {
        r.dense_ffn_total += f.parameter_count();
        BlockParams b;
        b.shared = f.parameter_count();
        r.blocks.push_back(b);
    }
    std::vector<NamedParam<T>> backbone;
    model.backbone().append_parameters(backbone);
    for (const auto &p : backbone)
        r.non_ffn_total += p.tensor.numel();
    r.total = r.non_ffn_total + r.dense_ffn_total;
    return r;
}

template <typename T>
double verify_identity(const DenseModel<T> &dense, const SparseModel<T> &sparse, const IdentityCheck &check) {
    if (!(dense.config() == sparse.dense_config()))
        throw ConfigError("verify_identity: dense and sparse models have different architectures");
    const DenseConfig &cfg = dense.config();
    const std::size_t len = std::min(check.seq_len, cfg.max_seq_len);
    NoGradGuard no_grad;
    double worst = 0.0;
    std::uint64_t worst_seed = 0;
    for (std::size_t trial = 0; trial < check.trials; ++trial) {
        const std::uint64_t seed = derive_seed(check.seed, trial);
        Rng rng(seed);
        std::vector<int> tokens(len);
        for (int &t : tokens)
            t = static_cast<int>(rng.index(cfg.vocab_size));
        const Tensor<T> a = dense.forward(tokens);
        const Tensor<T> b = sparse.forward(tokens).logits;
        double dev = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i)
            dev = std::max(dev, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        if (!std::isfinite(dev))
            dev = std::numeric_limits<double>::infinity();
        if (dev > worst || trial == 0) {
            worst = dev;
            worst_seed = seed;
        }
    }
    if (worst >= check.tolerance)
        throw IdentityViolation(worst_seed, worst, check.tolerance);
    return worst;
}

template <typename T>
std::uint64_t parameter_fingerprint(const std::vector<NamedParam<T>> &params) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto &p : params) {
        for (char c : p.name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        const auto data = p.tensor.data();
        const auto *bytes = reinterpret_cast<const unsigned char *>(data.data());
        for (std::size_t i = 0; i < data.size_bytes(); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

template class SparseModel<float>;
template class SparseModel<double>;
template SparseModel<float> craft(const DenseModel<float> &, const CraftConfig &);
template SparseModel<double> craft(const DenseModel<double> &, const CraftConfig &);
template DenseModel<float> extract_dense(const SparseModel<float> &);
template DenseModel<double> extract_dense(const SparseModel<double> &);
template ParamReport param_report(const SparseModel<float> &);
template ParamReport param_report(const SparseModel<double> &);
template ParamReport param_report(const DenseModel<float> &);
template ParamReport param_report(const DenseModel<double> &);
template double verify_identity(const DenseModel<float> &, const SparseModel<float> &, const IdentityCheck &);
template double verify_identity(const DenseModel<double> &, const SparseModel<double> &, const IdentityCheck &);
template std::uint64_t parameter_fingerprint(const std::vector<NamedParam<float>> &);
template std::uint64_t parameter_fingerprint(const std::vector<NamedParam<double>> &);

} // namespace pesc
