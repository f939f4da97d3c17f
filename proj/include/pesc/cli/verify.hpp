// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace pesc {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct VerifyOptions {
    /// Also round-trip this checkpoint and, for a dense one, check identity
    /// of a model crafted from it.
    std::optional<std::filesystem::path> checkpoint;
    /// Corrupt one W_up entry before the identity checks.
    bool inject_fault = false;
    std::uint64_t seed = 0;
};

/// Built-in invariant suite. Never throws for a failing check; the failure
/// is recorded in the result instead.
[[nodiscard]] std::vector<CheckResult> run_verify(const VerifyOptions &opts);

} // namespace pesc
