// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "pesc/core/random.hpp"

namespace pesc {

enum class CorpusKind {
    mixed,         // records from all sub-languages, uniformly interleaved
    skewed,        // interleaved, but dominated by the arithmetic sub-language
    subset_tagged, // one contiguous block per sub-language
};

[[nodiscard]] CorpusKind parse_corpus_kind(std::string_view name);
[[nodiscard]] std::string corpus_kind_name(CorpusKind k);

/// Byte-level token stream where every token carries the id of the
/// sub-language that produced it.
struct TaggedCorpus {
    std::vector<int> tokens;
    std::vector<int> tags;
    std::vector<std::string> subsets;

    [[nodiscard]] std::size_t size() const noexcept { return tokens.size(); }
    [[nodiscard]] TaggedCorpus slice(std::size_t begin, std::size_t end) const;
    /// Only the tokens of one subset, in order.
    [[nodiscard]] TaggedCorpus filter(int tag) const;
};

/// Sub-languages in tag order: arithmetic, code, prose.
[[nodiscard]] const std::vector<std::string> &subset_names();

[[nodiscard]] TaggedCorpus make_corpus(CorpusKind kind, std::size_t size, std::uint64_t seed);

struct CorpusSplit {
    TaggedCorpus train;
    TaggedCorpus heldout;
};

/// Train stream from `seed`, held-out stream of the same kind from an
/// independent seed.
[[nodiscard]] CorpusSplit make_split(CorpusKind kind, std::size_t train_size, std::size_t heldout_size,
                                     std::uint64_t seed);

struct Batch {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::size_t batch = 0;
    std::size_t seq_len = 0;
};

/// Random windows of seq_len + 1 tokens.
[[nodiscard]] Batch sample_batch(const TaggedCorpus &corpus, std::size_t batch, std::size_t seq_len, Rng &rng);

/// Consecutive non-overlapping windows starting at token 0, up to max_windows.
[[nodiscard]] std::vector<Batch> sequential_batches(const TaggedCorpus &corpus, std::size_t batch,
                                                    std::size_t seq_len, std::size_t max_windows);

} // namespace pesc
