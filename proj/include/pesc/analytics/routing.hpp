// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pesc/crafting/craft.hpp"
#include "pesc/training/corpus.hpp"

namespace pesc {

/// Per-subset expert assignment counts at one layer. Proportions are derived
/// from the counts and normalized within each subset.
struct RoutingProfile {
    std::size_t layer = 0;
    std::size_t n_experts = 0;
    std::size_t k = 0;
    std::vector<std::string> subsets;
    std::vector<std::uint64_t> tokens;                    // per subset
    std::vector<std::vector<std::uint64_t>> topk_counts;  // every routing slot
    std::vector<std::vector<std::uint64_t>> first_counts; // highest-ranked expert
    std::vector<std::vector<std::uint64_t>> second_counts;

    /// Combined over the k slots, normalized by k * tokens.
    [[nodiscard]] std::vector<double> top2(std::size_t subset) const;
    [[nodiscard]] std::vector<double> first(std::size_t subset) const;
    [[nodiscard]] std::vector<double> second(std::size_t subset) const;
    /// Slot proportions over all subsets together.
    [[nodiscard]] std::vector<double> overall_load() const;
    /// Largest |first(s)[e] - 1/n| over all subsets and experts.
    [[nodiscard]] double max_first_deviation() const;

    bool operator==(const RoutingProfile &) const = default;
};

void to_json(nlohmann::json &j, const RoutingProfile &p);
void from_json(const nlohmann::json &j, RoutingProfile &p);

/// Runs inference over consecutive windows of the corpus and records every
/// token's ranked expert choices at `layer`. First and second choice rank all
/// n experts by router logit; with a single expert both are that expert.
[[nodiscard]] RoutingProfile profile_routing(const SparseModel<float> &model, const TaggedCorpus &corpus,
                                             std::size_t layer, std::size_t seq_len = 64, std::size_t batch = 8);

/// Where export_profile puts the JSON sidecar for a CSV path.
[[nodiscard]] std::filesystem::path sidecar_path(const std::filesystem::path &csv);

/// CSV (subset, expert, top2_prop, first_prop, second_prop) plus a JSON
/// sidecar holding the counts and metadata.
void export_profile(const RoutingProfile &profile, const std::filesystem::path &csv);
[[nodiscard]] RoutingProfile import_profile(const std::filesystem::path &csv);

} // namespace pesc
