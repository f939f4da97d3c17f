// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/training/trainer.hpp"

#include <cmath>

namespace pesc {

namespace {

struct ForwardPass {
    Tensor<float> logits;
    std::vector<DispatchStats<float>> stats;
};

ForwardPass run_forward(const DenseModel<float> &model, std::span<const int> tokens, std::size_t batch,
                        ProbSource) {
    return {model.forward(tokens, batch), {}};
}

ForwardPass run_forward(const SparseModel<float> &model, std::span<const int> tokens, std::size_t batch,
                        ProbSource source) {
    SparseForward<float> out = model.forward(tokens, batch, source);
    return {std::move(out.logits), std::move(out.stats)};
}

std::size_t max_seq_len(const DenseModel<float> &m) { return m.config().max_seq_len; }
std::size_t max_seq_len(const SparseModel<float> &m) { return m.dense_config().max_seq_len; }

bool non_ffn_trainable(ParamCategory c, const TrainConfig &cfg) { return !is_ffn_category(c) && cfg.train_non_ffn; }

} // namespace

BalanceReduce parse_balance_reduce(std::string_view name) {
    if (name == "sum")
        return BalanceReduce::sum;
    if (name == "mean")
        return BalanceReduce::mean;
    throw ConfigError("unknown balance reduction '" + std::string(name) + "' (expected sum or mean)");
}

std::string balance_reduce_name(BalanceReduce r) { return r == BalanceReduce::sum ? "sum" : "mean"; }

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate must be a finite non-negative number");
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
        throw ConfigError("alpha must be a finite non-negative number");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0))
        throw ConfigError("warmup_ratio must lie in [0, 1)");
    if (batch_size < 1 || seq_len < 1)
        throw ConfigError("batch_size and seq_len must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("optimizer betas must lie in [0, 1)");
    if (!(eps > 0.0))
        throw ConfigError("optimizer eps must be positive");
    if (!(weight_decay >= 0.0))
        throw ConfigError("weight_decay must be non-negative");
    if (eval_windows < 1)
        throw ConfigError("eval_windows must be >= 1");
}

void to_json(nlohmann::json &j, const TrainConfig &c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate},
                       {"alpha", c.alpha},
                       {"steps", c.steps},
                       {"batch_size", c.batch_size},
                       {"seq_len", c.seq_len},
                       {"warmup_ratio", c.warmup_ratio},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"eps", c.eps},
                       {"weight_decay", c.weight_decay},
                       {"seed", c.seed},
                       {"balance_reduce", balance_reduce_name(c.balance_reduce)},
                       {"balance_probs", prob_source_name(c.balance_probs)},
                       {"train_non_ffn", c.train_non_ffn},
                       {"eval_windows", c.eval_windows}};
}

double scheduled_lr(const TrainConfig &cfg, std::size_t step) {
    const auto warmup = static_cast<std::size_t>(std::floor(cfg.warmup_ratio * static_cast<double>(cfg.steps)));
    if (warmup == 0 || step + 1 >= warmup)
        return cfg.learning_rate;
    return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

void to_json(nlohmann::json &j, const StepRecord &r) {
    j = nlohmann::json{{"step", r.step}, {"lr", r.lr}, {"cross_entropy", r.cross_entropy}, {"balance", r.balance},
                       {"f", r.f}};
}

AdamW::AdamW(std::vector<Tensor<float>> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const auto &p : params_) {
        m_.emplace_back(p.numel(), 0.0f);
        v_.emplace_back(p.numel(), 0.0f);
    }
}

void AdamW::zero_grad() {
    for (auto &p : params_)
        p.zero_grad();
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto b1 = static_cast<float>(beta1_);
    const auto b2 = static_cast<float>(beta2_);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<float>(eps_);
    const auto decay = static_cast<float>(lr * weight_decay_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor<float> &p = params_[i];
        if (!p.has_grad())
            continue;
        const auto g = p.grad();
        auto w = p.data();
        auto &m = m_[i];
        auto &v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1.0f - b1) * g[j];
            v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
            const float update = step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
            w[j] -= update + decay * w[j];
        }
    }
}

bool is_trainable(ParamCategory category, const DenseModel<float> &, const TrainConfig &) {
    (void)category;
    return true;
}

bool is_trainable(ParamCategory category, const SparseModel<float> &model, const TrainConfig &cfg) {
    switch (category) {
    case ParamCategory::adapter:
    case ParamCategory::router:
        return true;
    case ParamCategory::shared_ffn:
        return model.craft_config().trainable_shared;
    case ParamCategory::expert_ffn:
        return model.mode() == CraftMode::full;
    case ParamCategory::dense_ffn:
        return false;
    default:
        return non_ffn_trainable(category, cfg);
    }
}

template <typename Model>
Trainer<Model>::Trainer(Model &model, TrainConfig cfg)
    : model_(model), cfg_(std::move(cfg)), optimizer_({}, cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay) {
    cfg_.validate();
    if (cfg_.seq_len > max_seq_len(model_))
        throw ConfigError("seq_len=" + std::to_string(cfg_.seq_len) + " exceeds the model's max_seq_len=" +
                          std::to_string(max_seq_len(model_)));
    std::vector<Tensor<float>> trainable;
    for (auto &p : model_.parameters()) {
        const bool on = is_trainable(p.category, model_, cfg_);
        Tensor<float> t = p.tensor;
        t.set_requires_grad(on);
        t.zero_grad();
        if (on) {
            trainable_count_ += t.numel();
            trainable.push_back(t);
        }
    }
    optimizer_ = AdamW(std::move(trainable), cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay);
}

template <typename Model>
StepRecord Trainer<Model>::step(const Batch &batch) {
    StepRecord rec;
    rec.step = step_;
    rec.lr = scheduled_lr(cfg_, step_);
    optimizer_.zero_grad();

    ForwardPass fwd = run_forward(model_, batch.inputs, batch.batch, cfg_.balance_probs);
    const Tensor<float> ce = cross_entropy(fwd.logits, batch.targets);
    Tensor<float> total = ce;
    if (cfg_.alpha > 0.0 && !fwd.stats.empty()) {
        Tensor<float> balance;
        for (const auto &s : fwd.stats) {
            const Tensor<float> term = balance_loss(s, static_cast<float>(cfg_.alpha), s.n());
            balance = balance.defined() ? add(balance, term) : term;
        }
        if (cfg_.balance_reduce == BalanceReduce::mean)
            balance = scale(balance, 1.0f / static_cast<float>(fwd.stats.size()));
        rec.balance = balance.item();
        total = add(ce, balance);
    }
    rec.cross_entropy = ce.item();
    if (!std::isfinite(rec.cross_entropy) || !std::isfinite(total.item()))
        throw DivergenceError(step_, "non-finite loss");
    for (const auto &s : fwd.stats)
        rec.f.push_back(s.f);

    if (total.requires_grad())
        backward(total);
    optimizer_.step(rec.lr);
    ++step_;
    return rec;
}

template <typename Model>
StepRecord train_step(Model &model, const Batch &batch, const TrainConfig &cfg) {
    Trainer<Model> trainer(model, cfg);
    return trainer.step(batch);
}

template <typename Model>
TrainRecord train(Model &model, const CorpusSplit &data, const TrainConfig &cfg) {
    cfg.validate();
    if (data.train.size() == 0)
        throw DataError("training corpus is empty");
    TrainRecord record;
    if (cfg.steps > 0) {
        Trainer<Model> trainer(model, cfg);
        Rng sampler(derive_seed(cfg.seed, 0xBA7C4));
        record.steps.reserve(cfg.steps);
        for (std::size_t s = 0; s < cfg.steps; ++s)
            record.steps.push_back(trainer.step(sample_batch(data.train, cfg.batch_size, cfg.seq_len, sampler)));
    }
    if (data.heldout.size() > cfg.seq_len)
        record.heldout_perplexity = evaluate(model, data.heldout, cfg.seq_len, cfg.eval_windows).perplexity;
    return record;
}

template <typename Model>
EvalResult evaluate(const Model &model, const TaggedCorpus &corpus, std::size_t seq_len, std::size_t max_windows,
                    std::size_t batch) {
    NoGradGuard no_grad;
    EvalResult res;
    double total = 0.0;
    std::vector<std::vector<double>> slots;
    std::vector<double> slot_totals;
    for (const Batch &b : sequential_batches(corpus, batch, seq_len, max_windows)) {
        ForwardPass fwd = run_forward(model, b.inputs, b.batch, ProbSource::full);
        const double ce = cross_entropy(fwd.logits, b.targets).item();
        total += ce * static_cast<double>(b.targets.size());
        res.tokens += b.targets.size();
        slots.resize(fwd.stats.size());
        slot_totals.resize(fwd.stats.size(), 0.0);
        for (std::size_t l = 0; l < fwd.stats.size(); ++l) {
            const auto &s = fwd.stats[l];
            const double n_slots = static_cast<double>(s.tokens * s.k);
            slots[l].resize(s.f.size(), 0.0);
            for (std::size_t e = 0; e < s.f.size(); ++e)
                slots[l][e] += s.f[e] * n_slots;
            slot_totals[l] += n_slots;
        }
    }
    res.cross_entropy = total / static_cast<double>(res.tokens);
    res.perplexity = std::exp(res.cross_entropy);
    for (std::size_t l = 0; l < slots.size(); ++l) {
        for (double &v : slots[l])
            v /= slot_totals[l];
    }
    res.f = std::move(slots);
    return res;
}

double mean_dispatch_std(const std::vector<std::vector<double>> &f) {
    if (f.empty())
        return 0.0;
    double acc = 0.0;
    for (const auto &block : f) {
        double mean = 0.0;
        for (double v : block)
            mean += v;
        mean /= static_cast<double>(block.size());
        double var = 0.0;
        for (double v : block)
            var += (v - mean) * (v - mean);
        acc += std::sqrt(var / static_cast<double>(block.size()));
    }
    return acc / static_cast<double>(f.size());
}

void to_json(nlohmann::json &j, const GapReport &r) {
    auto run = [](const GapRun &g) {
        nlohmann::json out{{"ok", g.ok}};
        if (g.ok) {
            out["final_train_loss"] = g.final_train_loss;
            out["final_heldout_loss"] = g.final_heldout_loss;
        } else {
            out["error"] = g.error;
        }
        return out;
    };
    j = nlohmann::json{{"full", run(r.full)}, {"pesc", run(r.pesc)}};
    j["train_gap"] = r.train_gap ? nlohmann::json(*r.train_gap) : nlohmann::json(nullptr);
    j["heldout_gap"] = r.heldout_gap ? nlohmann::json(*r.heldout_gap) : nlohmann::json(nullptr);
}

GapReport approximation_gap(const DenseModel<float> &dense, const CorpusSplit &data, const TrainConfig &cfg,
                            const CraftConfig &craft_cfg) {
    auto run_mode = [&](CraftMode mode) {
        GapRun run;
        try {
            CraftConfig cc = craft_cfg;
            cc.mode = mode;
            SparseModel<float> model = craft(dense, cc);
            const TrainRecord rec = train(model, CorpusSplit{data.train, {}}, cfg);
            for (const auto &s : rec.steps)
                run.ce_curve.push_back(s.cross_entropy);
            run.final_train_loss = evaluate(model, data.train, cfg.seq_len, cfg.eval_windows).cross_entropy;
            if (data.heldout.size() > cfg.seq_len)
                run.final_heldout_loss = evaluate(model, data.heldout, cfg.seq_len, cfg.eval_windows).cross_entropy;
            run.ok = true;
        } catch (const DivergenceError &e) {
            run.error = e.what();
        }
        return run;
    };
    GapReport report;
    report.full = run_mode(CraftMode::full);
    report.pesc = run_mode(CraftMode::pesc);
    if (report.full.ok && report.pesc.ok) {
        report.train_gap = std::abs(report.full.final_train_loss - report.pesc.final_train_loss);
        report.heldout_gap = std::abs(report.full.final_heldout_loss - report.pesc.final_heldout_loss);
    }
    return report;
}

template class Trainer<DenseModel<float>>;
template class Trainer<SparseModel<float>>;
template StepRecord train_step(DenseModel<float> &, const Batch &, const TrainConfig &);
template StepRecord train_step(SparseModel<float> &, const Batch &, const TrainConfig &);
template TrainRecord train(DenseModel<float> &, const CorpusSplit &, const TrainConfig &);
template TrainRecord train(SparseModel<float> &, const CorpusSplit &, const TrainConfig &);
template EvalResult evaluate(const DenseModel<float> &, const TaggedCorpus &, std::size_t, std::size_t, std::size_t);
template EvalResult evaluate(const SparseModel<float> &, const TaggedCorpus &, std::size_t, std::size_t, std::size_t);

} // namespace pesc
