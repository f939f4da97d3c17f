// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/cli/app.hpp"

#include <fstream>
#include <ostream>

#include <CLI11.hpp>

#include "pesc/analytics/routing.hpp"
#include "pesc/cli/verify.hpp"
#include "pesc/core/errors.hpp"
#include "pesc/io/checkpoint.hpp"

namespace pesc {

namespace {

// Enum-valued options arrive as strings and are parsed after CLI11 is done.
struct EnumText {
    std::string activation = "gelu";
    std::string mode = "pesc";
    std::string corpus = "mixed";
    std::string balance_reduce = "sum";
    std::string balance_probs = "full";
};

void register_options(CLI::App &app, RunConfig &c, EnumText &e) {
    const std::string model = "Dense model";
    app.add_option("--vocab_size", c.dense.vocab_size)->group(model);
    app.add_option("--d_model", c.dense.d_model)->group(model);
    app.add_option("--d_ffn", c.dense.d_ffn)->group(model);
    app.add_option("--n_layers", c.dense.n_layers)->group(model);
    app.add_option("--n_heads", c.dense.n_heads)->group(model);
    app.add_option("--max_seq_len", c.dense.max_seq_len)->group(model);
    app.add_option("--init_seed", c.dense.seed, "Seed of the dense initializer")->group(model);
    app.add_option("--activation", e.activation, "gelu, silu, tanh or relu")->group(model);

    const std::string crafting = "Crafting";
    app.add_option("--n_experts", c.craft.n_experts)->group(crafting);
    app.add_option("--k", c.craft.k, "Experts per token")->group(crafting);
    app.add_option("--adapter_dim", c.craft.adapter_dim)->group(crafting);
    app.add_option("--mode", e.mode, "pesc or full")->group(crafting);
    app.add_flag("--trainable_shared", c.craft.trainable_shared, "Train the shared FFN too")->group(crafting);
    app.add_option("--router_seed", c.craft.router_seed)->group(crafting);
    app.add_flag("--allow_wide_adapter", c.craft.allow_wide_adapter, "Permit adapter_dim >= d_model")
        ->group(crafting);

    const std::string training = "Training";
    app.add_option("--learning_rate", c.train.learning_rate)->group(training);
    app.add_option("--alpha", c.train.alpha, "Balance loss coefficient")->group(training);
    app.add_option("--steps", c.train.steps)->group(training);
    app.add_option("--batch_size", c.train.batch_size)->group(training);
    app.add_option("--seq_len", c.train.seq_len)->group(training);
    app.add_option("--warmup_ratio", c.train.warmup_ratio)->group(training);
    app.add_option("--beta1", c.train.beta1)->group(training);
    app.add_option("--beta2", c.train.beta2)->group(training);
    app.add_option("--eps", c.train.eps)->group(training);
    app.add_option("--weight_decay", c.train.weight_decay)->group(training);
    app.add_option("--seed", c.train.seed, "Batch sampling seed")->group(training);
    app.add_option("--balance_reduce", e.balance_reduce, "sum or mean over blocks")->group(training);
    app.add_option("--balance_probs", e.balance_probs, "full or masked router softmax for p")->group(training);
    app.add_flag("--train_non_ffn", c.train.train_non_ffn, "Also train embeddings, attention and norms")
        ->group(training);
    app.add_option("--eval_windows", c.train.eval_windows)->group(training);

    const std::string data = "Data";
    app.add_option("--corpus", e.corpus, "mixed, skewed or subset-tagged")->group(data);
    app.add_option("--corpus_size", c.corpus_size)->group(data);
    app.add_option("--heldout_size", c.heldout_size)->group(data);
    app.add_option("--corpus_seed", c.corpus_seed)->group(data);

    const std::string io = "Files";
    app.add_option("--in", c.in, "Input checkpoint")->group(io);
    app.add_option("--out", c.out, "Output path")->group(io);
    app.add_option("--records", c.records, "Per-step JSON-lines record path")->group(io);

    const std::string misc = "Checks";
    app.add_option("--layer", c.layer, "Block analyzed by `analyze`")->group(misc);
    app.add_option("--identity_trials", c.identity_trials)->group(misc);
    app.add_option("--identity_tol", c.identity_tol)->group(misc);
    app.add_option("--expect_mode", c.expect_mode, "dense, pesc or full; checked against the checkpoint")
        ->group(misc);
    app.add_flag("--inject_fault", c.inject_fault, "Corrupt one adapter weight before identity checks")
        ->group(misc);
}

void apply_enums(RunConfig &c, const EnumText &e) {
    c.dense.activation = parse_activation(e.activation);
    c.craft.mode = parse_craft_mode(e.mode);
    c.corpus = parse_corpus_kind(e.corpus);
    c.train.balance_reduce = parse_balance_reduce(e.balance_reduce);
    c.train.balance_probs = parse_prob_source(e.balance_probs);
    if (!c.expect_mode.empty() && c.expect_mode != "dense" && c.expect_mode != "pesc" && c.expect_mode != "full")
        throw ConfigError("expect_mode must be dense, pesc or full");
    if (c.corpus_size == 0 || c.heldout_size == 0)
        throw ConfigError("corpus_size and heldout_size must be positive");
    if (!(c.identity_tol > 0.0))
        throw ConfigError("identity_tol must be positive");
    if (c.identity_trials == 0)
        throw ConfigError("identity_trials must be >= 1");
    c.train.validate();
}

void require(const std::string &value, const std::string &flag) {
    if (value.empty())
        throw ConfigError("missing required option --" + flag);
}

std::string records_path(const RunConfig &c) { return c.records.empty() ? c.out + ".records.jsonl" : c.records; }

void write_text(const std::string &path, const std::string &text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f)
        throw IoError(path, "cannot open for writing");
    f << text;
    f.flush();
    if (!f)
        throw IoError(path, "write failed");
}

void write_records(const std::string &path, const TrainRecord &rec) {
    std::string text;
    for (const auto &s : rec.steps)
        text += nlohmann::json(s).dump() + "\n";
    write_text(path, text);
}

std::string model_mode(const Checkpoint &ck) {
    if (ck.kind == "dense")
        return "dense";
    return craft_mode_name(ck.config.at("craft").get<CraftConfig>().mode);
}

nlohmann::json train_summary(const RunConfig &c, const TrainRecord &rec, const EvalResult &heldout) {
    nlohmann::json j{{"steps", rec.steps.size()},
                     {"train", c.train},
                     {"corpus", {{"kind", corpus_kind_name(c.corpus)}, {"size", c.corpus_size},
                                 {"heldout_size", c.heldout_size}, {"seed", c.corpus_seed}}},
                     {"heldout_cross_entropy", heldout.cross_entropy},
                     {"heldout_perplexity", heldout.perplexity}};
    if (!rec.steps.empty()) {
        j["first_cross_entropy"] = rec.steps.front().cross_entropy;
        j["final_cross_entropy"] = rec.steps.back().cross_entropy;
    }
    if (!heldout.f.empty()) {
        j["heldout_f"] = heldout.f;
        j["heldout_f_std"] = mean_dispatch_std(heldout.f);
    }
    return j;
}

CorpusSplit load_data(const RunConfig &c) {
    return make_split(c.corpus, c.corpus_size, c.heldout_size, c.corpus_seed);
}

int cmd_pretrain(const RunConfig &c, std::ostream &out) {
    require(c.out, "out");
    c.dense.validate();
    if (c.train.seq_len > c.dense.max_seq_len)
        throw ConfigError("seq_len exceeds max_seq_len");
    const CorpusSplit data = load_data(c);
    DenseModel<float> model = DenseModel<float>::init(c.dense);
    const double untrained = evaluate(model, data.heldout, c.train.seq_len, c.train.eval_windows).perplexity;
    const TrainRecord rec = train(model, CorpusSplit{data.train, {}}, c.train);
    const EvalResult heldout = evaluate(model, data.heldout, c.train.seq_len, c.train.eval_windows);

    Checkpoint ck = to_checkpoint(model);
    ck.meta = {{"command", "pretrain"}, {"steps", rec.steps.size()}};
    save_checkpoint(ck, c.out);
    write_records(records_path(c), rec);
    nlohmann::json summary = train_summary(c, rec, heldout);
    summary["untrained_heldout_perplexity"] = untrained;
    write_text(c.out + ".summary.json", summary.dump(2) + "\n");
    out << summary.dump(2) << "\n";
    return 0;
}

int cmd_craft(const RunConfig &c, std::ostream &out) {
    require(c.in, "in");
    require(c.out, "out");
    const DenseModel<float> dense = dense_from_checkpoint(load_checkpoint(c.in));
    c.craft.validate(dense.config());
    const SparseModel<float> sparse = craft(dense, c.craft);
    const ParamReport report = param_report(sparse);
    nlohmann::json j = report;
    j["inequality_holds"] = report.inequality_holds();
    out << j.dump(2) << "\n";

    IdentityCheck check;
    check.trials = c.identity_trials;
    check.tolerance = c.identity_tol;
    check.seq_len = std::min(check.seq_len, dense.config().max_seq_len);
    const double deviation = verify_identity(dense, sparse, check);
    out << "identity: max deviation " << deviation << " over " << check.trials << " sequences (tolerance "
        << check.tolerance << ")\n";

    Checkpoint ck = to_checkpoint(sparse);
    ck.meta = {{"command", "craft"}, {"identity_deviation", deviation}};
    save_checkpoint(ck, c.out);
    write_text(c.out + ".params.json", j.dump(2) + "\n");
    return 0;
}

template <typename Model>
int train_and_save(Model &model, const RunConfig &c, const std::string &mode, std::ostream &out) {
    const CorpusSplit data = load_data(c);
    const TrainRecord rec = train(model, CorpusSplit{data.train, {}}, c.train);
    const EvalResult heldout = evaluate(model, data.heldout, c.train.seq_len, c.train.eval_windows);
    Checkpoint ck = to_checkpoint(model);
    ck.meta = {{"command", "train"}, {"mode", mode}, {"steps", rec.steps.size()}};
    save_checkpoint(ck, c.out);
    write_records(records_path(c), rec);
    nlohmann::json summary = train_summary(c, rec, heldout);
    summary["mode"] = mode;
    write_text(c.out + ".summary.json", summary.dump(2) + "\n");
    out << summary.dump(2) << "\n";
    return 0;
}

int cmd_train(const RunConfig &c, std::ostream &out) {
    require(c.in, "in");
    require(c.out, "out");
    const Checkpoint ck = load_checkpoint(c.in);
    const std::string mode = model_mode(ck);
    if (!c.expect_mode.empty() && c.expect_mode != mode)
        throw ConfigError("checkpoint holds a " + mode + " model, expected " + c.expect_mode);
    if (ck.kind == "dense") {
        DenseModel<float> model = dense_from_checkpoint(ck);
        return train_and_save(model, c, mode, out);
    }
    SparseModel<float> model = sparse_from_checkpoint(ck);
    return train_and_save(model, c, mode, out);
}

int cmd_analyze(const RunConfig &c, std::ostream &out) {
    require(c.in, "in");
    require(c.out, "out");
    const SparseModel<float> model = sparse_from_checkpoint(load_checkpoint(c.in));
    if (c.layer >= model.n_layers())
        throw ConfigError("layer " + std::to_string(c.layer) + " out of range");
    const TaggedCorpus corpus = make_corpus(c.corpus, c.heldout_size, derive_seed(c.corpus_seed, 0x4E1D));
    const RoutingProfile prof =
        profile_routing(model, corpus, c.layer, std::min(c.train.seq_len, model.dense_config().max_seq_len));
    export_profile(prof, c.out);
    nlohmann::json j{{"layer", prof.layer},
                     {"subsets", prof.subsets},
                     {"tokens", prof.tokens},
                     {"max_first_choice_deviation", prof.max_first_deviation()},
                     {"csv", c.out},
                     {"sidecar", sidecar_path(c.out).string()}};
    out << j.dump(2) << "\n";
    return 0;
}

int cmd_verify(const RunConfig &c, std::ostream &out) {
    VerifyOptions opts;
    if (!c.in.empty())
        opts.checkpoint = c.in;
    opts.inject_fault = c.inject_fault;
    opts.seed = c.dense.seed;
    std::size_t failed = 0;
    for (const CheckResult &r : run_verify(opts)) {
        out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
        failed += !r.passed;
    }
    out << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << "\n";
    return failed == 0 ? 0 : 2;
}

int cmd_report(const RunConfig &c, std::ostream &out) {
    ParamReport report;
    if (!c.in.empty()) {
        const Checkpoint ck = load_checkpoint(c.in);
        report = ck.kind == "dense" ? param_report(dense_from_checkpoint(ck)) : param_report(sparse_from_checkpoint(ck));
    } else {
        c.dense.validate();
        c.craft.validate(c.dense);
        report = param_report(craft(DenseModel<float>::init(c.dense), c.craft));
    }
    nlohmann::json j = report;
    j["inequality_holds"] = report.inequality_holds();
    if (!c.out.empty())
        write_text(c.out, j.dump(2) + "\n");
    out << j.dump(2) << "\n";
    return 0;
}

int cmd_gap(const RunConfig &c, std::ostream &out) {
    require(c.in, "in");
    require(c.out, "out");
    const DenseModel<float> dense = dense_from_checkpoint(load_checkpoint(c.in));
    CraftConfig pesc_cfg = c.craft;
    pesc_cfg.mode = CraftMode::pesc;
    pesc_cfg.validate(dense.config());
    const GapReport report = approximation_gap(dense, load_data(c), c.train, c.craft);
    nlohmann::json j = report;
    j["craft"] = c.craft;
    j["train"] = c.train;
    write_text(c.out, j.dump(2) + "\n");
    out << j.dump(2) << "\n";
    return report.full.ok && report.pesc.ok ? 0 : 2;
}

} // namespace

void to_json(nlohmann::json &j, const RunConfig &c) {
    j = nlohmann::json{{"dense", c.dense},
                       {"craft", c.craft},
                       {"train", c.train},
                       {"corpus", corpus_kind_name(c.corpus)},
                       {"corpus_size", c.corpus_size},
                       {"heldout_size", c.heldout_size},
                       {"corpus_seed", c.corpus_seed},
                       {"in", c.in},
                       {"out", c.out},
                       {"records", c.records},
                       {"layer", c.layer},
                       {"identity_trials", c.identity_trials},
                       {"identity_tol", c.identity_tol},
                       {"expect_mode", c.expect_mode},
                       {"inject_fault", c.inject_fault}};
}

int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
    CLI::App app{"Sparsity crafting toolkit: dense transformer to parameter-efficient MoE", "pesc"};
    app.set_config("--config", "", "Key = value config file; flags override it");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1);

    RunConfig cfg;
    EnumText text;
    register_options(app, cfg, text);

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"pretrain", "Train the dense baseline and write a dense checkpoint"},
        {"craft", "Convert a dense checkpoint into a sparse one and check identity"},
        {"train", "Train a dense or sparse checkpoint"},
        {"analyze", "Per-subset routing profile of a sparse checkpoint"},
        {"verify", "Run the built-in invariant suite"},
        {"report", "Parameter accounting for a checkpoint or a config"},
        {"gap", "Train full and PESC crafting from one dense checkpoint and compare"},
    };
    for (const auto &[name, help] : commands)
        app.add_subcommand(name, help)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? 0 : 1;
    }

    try {
        apply_enums(cfg, text);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "pretrain")
            return cmd_pretrain(cfg, out);
        if (cmd == "craft")
            return cmd_craft(cfg, out);
        if (cmd == "train")
            return cmd_train(cfg, out);
        if (cmd == "analyze")
            return cmd_analyze(cfg, out);
        if (cmd == "verify")
            return cmd_verify(cfg, out);
        if (cmd == "report")
            return cmd_report(cfg, out);
        return cmd_gap(cfg, out);
    } catch (const Error &e) {
        err << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const nlohmann::json::exception &e) {
        err << "error: malformed JSON: " << e.what() << "\n";
        return 1;
    }
}

} // namespace pesc
