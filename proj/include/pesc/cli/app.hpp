// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "pesc/crafting/craft.hpp"
#include "pesc/training/corpus.hpp"
#include "pesc/training/trainer.hpp"

namespace pesc {

/// Everything a command can be configured with. Keys in a config file use
/// the same names as the long flags.
struct RunConfig {
    DenseConfig dense;
    CraftConfig craft;
    TrainConfig train;

    CorpusKind corpus = CorpusKind::mixed;
    std::size_t corpus_size = 200000;
    std::size_t heldout_size = 20000;
    std::uint64_t corpus_seed = 0;

    std::string in;
    std::string out;
    std::string records; // defaults to <out>.records.jsonl

    std::size_t layer = 0;
    std::size_t identity_trials = 20;
    double identity_tol = 1e-5;
    std::string expect_mode; // empty, dense, pesc or full
    bool inject_fault = false;
};

void to_json(nlohmann::json &j, const RunConfig &c);

/// Entry point of the `pesc` binary. Returns the process exit code:
/// 0 success, 1 invalid input, 2 numeric or identity failure, 3 I/O failure.
int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err);

} // namespace pesc
