// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pesc/crafting/craft.hpp"

namespace pesc {

// Layout:
//   "PESCCKPT"            8 bytes
//   version               u32 little-endian
//   header_len            u64 little-endian
//   header                header_len bytes of JSON
//   payload               float32 little-endian tensors in manifest order
inline constexpr std::string_view kCheckpointMagic = "PESCCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;

    bool operator==(const CheckpointTensor &) const = default;
};

struct Checkpoint {
    std::string kind; // "dense" or "sparse"
    nlohmann::json config;
    /// Free-form provenance (command, steps, ...). Not interpreted on load.
    nlohmann::json meta = nlohmann::json::object();
    std::vector<CheckpointTensor> tensors;

    [[nodiscard]] const CheckpointTensor *find(std::string_view name) const;
};

[[nodiscard]] std::vector<std::uint8_t> encode_checkpoint(const Checkpoint &ckpt);
/// `origin` names the source in error messages.
[[nodiscard]] Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string &origin = "<memory>");

/// Writes through a temporary file in the same directory and renames it.
void save_checkpoint(const Checkpoint &ckpt, const std::filesystem::path &path);
[[nodiscard]] Checkpoint load_checkpoint(const std::filesystem::path &path);

[[nodiscard]] Checkpoint to_checkpoint(const DenseModel<float> &model);
[[nodiscard]] Checkpoint to_checkpoint(const SparseModel<float> &model);

/// Rebuilds the model from the header config and overwrites every parameter.
/// The tensor set must match the model's parameters exactly.
[[nodiscard]] DenseModel<float> dense_from_checkpoint(const Checkpoint &ckpt);
[[nodiscard]] SparseModel<float> sparse_from_checkpoint(const Checkpoint &ckpt);

} // namespace pesc
