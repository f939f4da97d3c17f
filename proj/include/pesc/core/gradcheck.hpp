// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>

#include "pesc/core/tensor.hpp"

namespace pesc {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences over every coordinate of `inputs`.
///
/// The error per coordinate is |analytic - numeric| / (|analytic| + |numeric| + eps)
/// and the maximum is reported. `f` rebuilds its graph from the current values
/// of `inputs` on every call. Inputs are restored bit-exactly afterwards.
/// Throws NumericError if f or any gradient is non-finite.
GradCheckResult finite_difference_check(const std::function<Tensor<double>()> &f,
                                        std::span<const Tensor<double>> inputs, double eps = 1e-5);

/// Single-input form: f receives x.
double finite_difference_check(const std::function<Tensor<double>(const Tensor<double> &)> &f,
                               const Tensor<double> &x, double eps = 1e-5);

} // namespace pesc
