// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/training/corpus.hpp"

#include <array>

#include "pesc/core/errors.hpp"

namespace pesc {

namespace {

constexpr int kArithmetic = 0;
constexpr int kCode = 1;
constexpr int kProse = 2;

std::string arithmetic_record(Rng &rng) {
    const int a = static_cast<int>(rng.index(50));
    const int b = static_cast<int>(rng.index(50));
    switch (rng.index(3)) {
    case 0:
        return std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(a + b) + ";";
    case 1:
        return std::to_string(a) + "-" + std::to_string(b) + "=" + std::to_string(a - b) + ";";
    default:
        return std::to_string(a % 10) + "*" + std::to_string(b % 10) + "=" + std::to_string((a % 10) * (b % 10)) +
               ";";
    }
}

char ident(Rng &rng) {
    static constexpr std::string_view names = "abcfgixyz";
    return names[rng.index(names.size())];
}

std::string code_expr(Rng &rng, int depth) {
    const std::size_t choice = depth > 0 ? rng.index(4) : 0;
    switch (choice) {
    case 1:
        return std::string(1, ident(rng)) + "(" + code_expr(rng, depth - 1) + ")";
    case 2:
        return std::string(1, ident(rng)) + "[" + code_expr(rng, depth - 1) + "]";
    case 3:
        return code_expr(rng, depth - 1) + "+" + code_expr(rng, depth - 1);
    default:
        return std::string(1, ident(rng));
    }
}

std::string code_stmt(Rng &rng, int depth) {
    if (depth > 0 && rng.index(3) == 0) {
        std::string body;
        const std::size_t n = 1 + rng.index(2);
        for (std::size_t i = 0; i < n; ++i)
            body += code_stmt(rng, depth - 1);
        return "if(" + code_expr(rng, 1) + "<" + code_expr(rng, 1) + "){" + body + "}";
    }
    return std::string(1, ident(rng)) + "=" + code_expr(rng, 2) + ";";
}

std::string code_record(Rng &rng) { return code_stmt(rng, 2); }

/// Fixed word-level Markov chain; the transition table never depends on the
/// corpus seed so every corpus speaks the same language.
struct ProseModel {
    static constexpr std::array<std::string_view, 24> words = {
        "the",  "a",    "cat",  "dog",   "sees", "runs",  "over", "under", "big",  "small", "red",  "old",
        "tree", "house", "park", "river", "and",  "then",  "slowly", "eats", "bird", "with", "green", "sleeps"};
    std::array<std::array<std::size_t, 3>, words.size()> next{};

    ProseModel() {
        Rng rng(0x70e5e5ull);
        for (auto &succ : next)
            for (auto &s : succ)
                s = rng.index(words.size());
    }
};

std::string prose_record(Rng &rng) {
    static const ProseModel model;
    std::size_t w = rng.index(2); // "the" or "a"
    const std::size_t len = 4 + rng.index(6);
    std::string out;
    for (std::size_t i = 0; i < len; ++i) {
        if (i)
            out += ' ';
        out += model.words[w];
        w = model.next[w][rng.index(3)];
    }
    return out + ".";
}

std::string record(int subset, Rng &rng) {
    switch (subset) {
    case kArithmetic:
        return arithmetic_record(rng);
    case kCode:
        return code_record(rng);
    default:
        return prose_record(rng);
    }
}

void append(TaggedCorpus &c, const std::string &text, int tag, std::size_t limit) {
    for (char ch : text) {
        if (c.tokens.size() >= limit)
            return;
        c.tokens.push_back(static_cast<unsigned char>(ch));
        c.tags.push_back(tag);
    }
    if (c.tokens.size() < limit) {
        c.tokens.push_back('\n');
        c.tags.push_back(tag);
    }
}

} // namespace

CorpusKind parse_corpus_kind(std::string_view name) {
    if (name == "mixed")
        return CorpusKind::mixed;
    if (name == "skewed")
        return CorpusKind::skewed;
    if (name == "subset-tagged" || name == "subset_tagged")
        return CorpusKind::subset_tagged;
    throw ConfigError("unknown corpus kind '" + std::string(name) + "' (expected mixed, skewed or subset-tagged)");
}

std::string corpus_kind_name(CorpusKind k) {
    switch (k) {
    case CorpusKind::mixed:
        return "mixed";
    case CorpusKind::skewed:
        return "skewed";
    case CorpusKind::subset_tagged:
        return "subset-tagged";
    }
    return "?";
}

const std::vector<std::string> &subset_names() {
    static const std::vector<std::string> names = {"arithmetic", "code", "prose"};
    return names;
}

TaggedCorpus TaggedCorpus::slice(std::size_t begin, std::size_t end) const {
    TaggedCorpus out;
    out.subsets = subsets;
    end = std::min(end, size());
    begin = std::min(begin, end);
    out.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(begin),
                      tokens.begin() + static_cast<std::ptrdiff_t>(end));
    out.tags.assign(tags.begin() + static_cast<std::ptrdiff_t>(begin), tags.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

TaggedCorpus TaggedCorpus::filter(int tag) const {
    TaggedCorpus out;
    out.subsets = subsets;
    for (std::size_t i = 0; i < size(); ++i) {
        if (tags[i] == tag) {
            out.tokens.push_back(tokens[i]);
            out.tags.push_back(tag);
        }
    }
    return out;
}

TaggedCorpus make_corpus(CorpusKind kind, std::size_t size, std::uint64_t seed) {
    if (size == 0)
        throw ConfigError("corpus size must be positive");
    Rng rng(derive_seed(seed, 0xC0FFEE));
    TaggedCorpus c;
    c.subsets = subset_names();
    c.tokens.reserve(size);
    c.tags.reserve(size);
    if (kind == CorpusKind::subset_tagged) {
        const std::size_t n = c.subsets.size();
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t limit = s + 1 == n ? size : size * (s + 1) / n;
            while (c.tokens.size() < limit)
                append(c, record(static_cast<int>(s), rng), static_cast<int>(s), limit);
        }
        return c;
    }
    const std::array<double, 3> weights = kind == CorpusKind::skewed ? std::array<double, 3>{0.8, 0.1, 0.1}
                                                                     : std::array<double, 3>{1.0 / 3, 1.0 / 3, 1.0 / 3};
    while (c.tokens.size() < size) {
        const double u = rng.uniform();
        const int subset = u < weights[0] ? kArithmetic : (u < weights[0] + weights[1] ? kCode : kProse);
        append(c, record(subset, rng), subset, size);
    }
    return c;
}

CorpusSplit make_split(CorpusKind kind, std::size_t train_size, std::size_t heldout_size, std::uint64_t seed) {
    return {make_corpus(kind, train_size, seed), make_corpus(kind, heldout_size, derive_seed(seed, 0x4E1D)),};
}

Batch sample_batch(const TaggedCorpus &corpus, std::size_t batch, std::size_t seq_len, Rng &rng) {
    if (corpus.size() < seq_len + 1)
        throw DataError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than a window of " +
                        std::to_string(seq_len + 1));
    Batch b;
    b.batch = batch;
    b.seq_len = seq_len;
    b.inputs.reserve(batch * seq_len);
    b.targets.reserve(batch * seq_len);
    const std::size_t span = corpus.size() - seq_len;
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t start = rng.index(span);
        for (std::size_t t = 0; t < seq_len; ++t) {
            b.inputs.push_back(corpus.tokens[start + t]);
            b.targets.push_back(corpus.tokens[start + t + 1]);
        }
    }
    return b;
}

std::vector<Batch> sequential_batches(const TaggedCorpus &corpus, std::size_t batch, std::size_t seq_len,
                                      std::size_t max_windows) {
    if (corpus.size() < seq_len + 1)
        throw DataError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than a window of " +
                        std::to_string(seq_len + 1));
    const std::size_t available = (corpus.size() - 1) / seq_len;
    const std::size_t windows = std::min(available, max_windows);
    std::vector<Batch> out;
    for (std::size_t w = 0; w < windows;) {
        Batch b;
        b.seq_len = seq_len;
        for (; b.batch < batch && w < windows; ++b.batch, ++w) {
            const std::size_t start = w * seq_len;
            for (std::size_t t = 0; t < seq_len; ++t) {
                b.inputs.push_back(corpus.tokens[start + t]);
                b.targets.push_back(corpus.tokens[start + t + 1]);
            }
        }
        out.push_back(std::move(b));
    }
    return out;
}

} // namespace pesc
