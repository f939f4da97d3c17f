// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include "pesc/core/tensor.hpp"

namespace pesc {

/// Mixes a base seed with a stream id so independent consumers (router of
/// block 3, batch sampler, ...) never share a sequence.
[[nodiscard]] constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    std::mt19937_64 &engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

template <typename T>
[[nodiscard]] Tensor<T> normal_tensor(Shape shape, double stddev, Rng &rng, bool requires_grad = true) {
    const std::size_t n = shape_numel(shape);
    std::vector<T> values(n);
    for (T &v : values)
        v = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from(std::move(shape), std::move(values), requires_grad);
}

} // namespace pesc
