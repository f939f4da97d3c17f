// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pesc/crafting/craft.hpp"
#include "pesc/model/dense.hpp"
#include "pesc/training/corpus.hpp"

namespace pesc {

enum class BalanceReduce { sum, mean };

[[nodiscard]] BalanceReduce parse_balance_reduce(std::string_view name);
[[nodiscard]] std::string balance_reduce_name(BalanceReduce r);

struct TrainConfig {
    double learning_rate = 2e-4;
    double alpha = 1e-2;
    std::size_t steps = 2000;
    std::size_t batch_size = 8;
    std::size_t seq_len = 64;
    double warmup_ratio = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    BalanceReduce balance_reduce = BalanceReduce::sum;
    ProbSource balance_probs = ProbSource::full;
    /// Also train embeddings, attention, norms and the output head.
    bool train_non_ffn = false;
    /// Held-out windows used for the final evaluation.
    std::size_t eval_windows = 64;

    void validate() const;
};

void to_json(nlohmann::json &j, const TrainConfig &c);

/// Learning rate at 0-based `step`: linear warmup over floor(warmup_ratio * steps)
/// steps (lr * (step + 1) / warmup), then constant.
[[nodiscard]] double scheduled_lr(const TrainConfig &cfg, std::size_t step);

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double cross_entropy = 0.0;
    double balance = 0.0;
    std::vector<std::vector<double>> f; // per block
};

struct TrainRecord {
    std::vector<StepRecord> steps;
    std::optional<double> heldout_perplexity;
};

void to_json(nlohmann::json &j, const StepRecord &r);

/// AdamW with decoupled weight decay over a fixed parameter list. Parameters
/// that received no gradient in a step are left untouched.
class AdamW {
public:
    AdamW(std::vector<Tensor<float>> params, double beta1, double beta2, double eps, double weight_decay);

    void step(double lr);
    void zero_grad();
    [[nodiscard]] std::size_t step_count() const noexcept { return t_; }

private:
    std::vector<Tensor<float>> params_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::size_t t_ = 0;
};

/// Which parameter categories a model of this kind updates.
[[nodiscard]] bool is_trainable(ParamCategory category, const DenseModel<float> &model, const TrainConfig &cfg);
[[nodiscard]] bool is_trainable(ParamCategory category, const SparseModel<float> &model, const TrainConfig &cfg);

/// Owns the optimizer state for one training run. Construction sets
/// requires_grad on exactly the trainable parameters of the model.
template <typename Model>
class Trainer {
public:
    Trainer(Model &model, TrainConfig cfg);

    /// Forward, loss assembly, backward and one AdamW update.
    StepRecord step(const Batch &batch);

    [[nodiscard]] std::size_t steps_done() const noexcept { return step_; }
    [[nodiscard]] std::size_t trainable_count() const noexcept { return trainable_count_; }

private:
    Model &model_;
    TrainConfig cfg_;
    AdamW optimizer_;
    std::size_t step_ = 0;
    std::size_t trainable_count_ = 0;
};

/// One step with fresh optimizer state.
template <typename Model>
StepRecord train_step(Model &model, const Batch &batch, const TrainConfig &cfg);

/// Runs cfg.steps steps on batches sampled from data.train with a sampler
/// seeded from cfg.seed, then evaluates held-out perplexity when
/// data.heldout is non-empty.
template <typename Model>
TrainRecord train(Model &model, const CorpusSplit &data, const TrainConfig &cfg);

struct EvalResult {
    double cross_entropy = 0.0;
    double perplexity = 0.0;
    std::size_t tokens = 0;
    std::vector<std::vector<double>> f; // per block dispatch fractions (sparse only)
};

template <typename Model>
EvalResult evaluate(const Model &model, const TaggedCorpus &corpus, std::size_t seq_len, std::size_t max_windows,
                    std::size_t batch = 8);

/// Population standard deviation of each block's f, averaged over blocks.
[[nodiscard]] double mean_dispatch_std(const std::vector<std::vector<double>> &f);

struct GapRun {
    bool ok = false;
    std::string error;
    double final_train_loss = 0.0;
    double final_heldout_loss = 0.0;
    std::vector<double> ce_curve;
};

struct GapReport {
    GapRun full;
    GapRun pesc;
    /// |full - pesc| in final train / held-out loss; only set when both runs succeed.
    std::optional<double> train_gap;
    std::optional<double> heldout_gap;
};

void to_json(nlohmann::json &j, const GapReport &r);

/// Trains a full-crafting model and a PESC model from the same dense source
/// under identical data and seeds and measures the loss gap between them.
/// `craft_cfg.mode` is ignored; both modes are crafted from it.
GapReport approximation_gap(const DenseModel<float> &dense, const CorpusSplit &data, const TrainConfig &cfg,
                            const CraftConfig &craft_cfg);

extern template class Trainer<DenseModel<float>>;
extern template class Trainer<SparseModel<float>>;

} // namespace pesc
