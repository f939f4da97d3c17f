// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/analytics/routing.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pesc/core/errors.hpp"

namespace pesc {

namespace {

std::vector<double> normalize(const std::vector<std::uint64_t> &counts, double total) {
    std::vector<double> out(counts.size(), 0.0);
    if (total <= 0.0)
        return out;
    for (std::size_t e = 0; e < counts.size(); ++e)
        out[e] = static_cast<double>(counts[e]) / total;
    return out;
}

std::string fixed(double v) {
    std::array<char, 32> buf{};
    std::snprintf(buf.data(), buf.size(), "%.10f", v);
    return buf.data();
}

std::vector<std::string> split_csv(const std::string &line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
        out.push_back(cell);
    return out;
}

} // namespace

std::vector<double> RoutingProfile::top2(std::size_t s) const {
    return normalize(topk_counts.at(s), static_cast<double>(tokens.at(s) * k));
}

std::vector<double> RoutingProfile::first(std::size_t s) const {
    return normalize(first_counts.at(s), static_cast<double>(tokens.at(s)));
}

std::vector<double> RoutingProfile::second(std::size_t s) const {
    return normalize(second_counts.at(s), static_cast<double>(tokens.at(s)));
}

std::vector<double> RoutingProfile::overall_load() const {
    std::vector<std::uint64_t> total(n_experts, 0);
    std::uint64_t n_tokens = 0;
    for (std::size_t s = 0; s < subsets.size(); ++s) {
        n_tokens += tokens[s];
        for (std::size_t e = 0; e < n_experts; ++e)
            total[e] += topk_counts[s][e];
    }
    return normalize(total, static_cast<double>(n_tokens * k));
}

double RoutingProfile::max_first_deviation() const {
    double worst = 0.0;
    const double uniform = 1.0 / static_cast<double>(n_experts);
    for (std::size_t s = 0; s < subsets.size(); ++s) {
        if (tokens[s] == 0)
            continue;
        for (double v : first(s))
            worst = std::max(worst, std::abs(v - uniform));
    }
    return worst;
}

void to_json(nlohmann::json &j, const RoutingProfile &p) {
    j = nlohmann::json{{"layer", p.layer},
                       {"n_experts", p.n_experts},
                       {"k", p.k},
                       {"subsets", p.subsets},
                       {"tokens", p.tokens},
                       {"topk_counts", p.topk_counts},
                       {"first_counts", p.first_counts},
                       {"second_counts", p.second_counts},
                       {"normalization", "per-subset"},
                       {"overall_load", p.overall_load()}};
}

void from_json(const nlohmann::json &j, RoutingProfile &p) {
    j.at("layer").get_to(p.layer);
    j.at("n_experts").get_to(p.n_experts);
    j.at("k").get_to(p.k);
    j.at("subsets").get_to(p.subsets);
    j.at("tokens").get_to(p.tokens);
    j.at("topk_counts").get_to(p.topk_counts);
    j.at("first_counts").get_to(p.first_counts);
    j.at("second_counts").get_to(p.second_counts);
}

RoutingProfile profile_routing(const SparseModel<float> &model, const TaggedCorpus &corpus, std::size_t layer,
                               std::size_t seq_len, std::size_t batch) {
    if (layer >= model.n_layers())
        throw IndexError("layer " + std::to_string(layer) + " out of range for a model with " +
                         std::to_string(model.n_layers()) + " blocks");
    if (corpus.tags.size() != corpus.tokens.size())
        throw DataError("corpus has " + std::to_string(corpus.tokens.size()) + " tokens but " +
                        std::to_string(corpus.tags.size()) + " tags");
    for (std::size_t i = 0; i < corpus.tags.size(); ++i) {
        const int tag = corpus.tags[i];
        if (tag < 0 || static_cast<std::size_t>(tag) >= corpus.subsets.size())
            throw DataError("unknown subset tag " + std::to_string(tag) + " at token " + std::to_string(i));
    }
    if (seq_len == 0 || batch == 0)
        throw ConfigError("seq_len and batch must be >= 1");
    if (corpus.size() < seq_len)
        throw DataError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than one window of " +
                        std::to_string(seq_len));

    const CraftConfig &cc = model.craft_config();
    RoutingProfile prof;
    prof.layer = layer;
    prof.n_experts = cc.n_experts;
    prof.k = cc.k;
    prof.subsets = corpus.subsets;
    const std::size_t n_sub = corpus.subsets.size();
    prof.tokens.assign(n_sub, 0);
    prof.topk_counts.assign(n_sub, std::vector<std::uint64_t>(cc.n_experts, 0));
    prof.first_counts = prof.topk_counts;
    prof.second_counts = prof.topk_counts;

    NoGradGuard no_grad;
    const std::size_t windows = corpus.size() / seq_len;
    const std::size_t ranked = std::min<std::size_t>(2, cc.n_experts);
    std::vector<std::size_t> rank(ranked);
    std::size_t offset = 0; // corpus index of the current batch's first token
    const RouteObserver<float> observer = [&](std::size_t l, const RouterDecision<float> &d) {
        if (l != layer)
            return;
        const auto logits = d.logits.data();
        for (std::size_t t = 0; t < d.tokens; ++t) {
            const auto subset = static_cast<std::size_t>(corpus.tags[offset + t]);
            ++prof.tokens[subset];
            for (std::size_t s = 0; s < d.k; ++s)
                ++prof.topk_counts[subset][d.expert(t, s)];
            top_k_indices<float>(logits.subspan(t * d.n, d.n), ranked, rank);
            ++prof.first_counts[subset][rank[0]];
            ++prof.second_counts[subset][rank[ranked - 1]];
        }
    };
    std::vector<int> tokens;
    for (std::size_t w = 0; w < windows; w += batch) {
        const std::size_t b = std::min(batch, windows - w);
        offset = w * seq_len;
        tokens.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(offset),
                      corpus.tokens.begin() + static_cast<std::ptrdiff_t>(offset + b * seq_len));
        (void)model.forward(tokens, b, ProbSource::full, observer);
    }
    return prof;
}

std::filesystem::path sidecar_path(const std::filesystem::path &csv) {
    std::filesystem::path out = csv;
    out += ".json";
    return out;
}

void export_profile(const RoutingProfile &profile, const std::filesystem::path &csv) {
    std::ofstream out(csv, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError(csv.string(), "cannot open for writing");
    out << "subset,expert,top2_prop,first_prop,second_prop\n";
    for (std::size_t s = 0; s < profile.subsets.size(); ++s) {
        const auto top = profile.top2(s);
        const auto first = profile.first(s);
        const auto second = profile.second(s);
        for (std::size_t e = 0; e < profile.n_experts; ++e)
            out << profile.subsets[s] << ',' << e << ',' << fixed(top[e]) << ',' << fixed(first[e]) << ','
                << fixed(second[e]) << '\n';
    }
    out.flush();
    if (!out)
        throw IoError(csv.string(), "write failed");

    const auto meta = sidecar_path(csv);
    std::ofstream side(meta, std::ios::binary | std::ios::trunc);
    if (!side)
        throw IoError(meta.string(), "cannot open for writing");
    side << nlohmann::json(profile).dump(2) << '\n';
    side.flush();
    if (!side)
        throw IoError(meta.string(), "write failed");
}

RoutingProfile import_profile(const std::filesystem::path &csv) {
    const auto meta = sidecar_path(csv);
    std::ifstream side(meta, std::ios::binary);
    if (!side)
        throw IoError(meta.string(), "cannot open for reading");
    RoutingProfile prof;
    try {
        prof = nlohmann::json::parse(side).get<RoutingProfile>();
    } catch (const nlohmann::json::exception &e) {
        throw DataError(meta.string() + ": malformed profile metadata: " + e.what());
    }

    std::ifstream in(csv, std::ios::binary);
    if (!in)
        throw IoError(csv.string(), "cannot open for reading");
    std::string line;
    std::getline(in, line);
    if (line != "subset,expert,top2_prop,first_prop,second_prop")
        throw DataError(csv.string() + ": unexpected CSV header '" + line + "'");
    std::size_t rows = 0;
    for (std::size_t s = 0; s < prof.subsets.size(); ++s) {
        const auto top = prof.top2(s);
        const auto first = prof.first(s);
        const auto second = prof.second(s);
        for (std::size_t e = 0; e < prof.n_experts; ++e, ++rows) {
            if (!std::getline(in, line))
                throw DataError(csv.string() + ": truncated after " + std::to_string(rows) + " rows");
            const auto cells = split_csv(line);
            if (cells.size() != 5 || cells[0] != prof.subsets[s] || cells[1] != std::to_string(e) ||
                cells[2] != fixed(top[e]) || cells[3] != fixed(first[e]) || cells[4] != fixed(second[e]))
                throw DataError(csv.string() + ": row " + std::to_string(rows + 1) +
                                " disagrees with the sidecar counts");
        }
    }
    while (std::getline(in, line)) {
        if (!line.empty())
            throw DataError(csv.string() + ": unexpected trailing rows");
    }
    return prof;
}

} // namespace pesc
