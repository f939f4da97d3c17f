// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/core/gradcheck.hpp"

#include <array>
#include <cmath>

namespace pesc {

namespace {

double eval_scalar(const std::function<Tensor<double>()> &f) {
    NoGradGuard no_grad;
    const Tensor<double> out = f();
    if (out.numel() != 1)
        throw ContractError("finite_difference_check: function must be scalar, got " + shape_str(out.shape()));
    const double v = out.item();
    if (!std::isfinite(v))
        throw NumericError("finite_difference_check: non-finite function value");
    return v;
}

} // namespace

GradCheckResult finite_difference_check(const std::function<Tensor<double>()> &f,
                                        std::span<const Tensor<double>> inputs, double eps) {
    if (!(eps > 0.0))
        throw ConfigError("finite_difference_check: eps must be positive");
    std::vector<Tensor<double>> xs(inputs.begin(), inputs.end());
    std::vector<bool> previous_flags;
    for (auto &x : xs) {
        previous_flags.push_back(x.requires_grad());
        x.set_requires_grad(true);
        x.zero_grad();
    }
    const Tensor<double> loss = f();
    backward(loss);

    GradCheckResult result;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        Tensor<double> &x = xs[t];
        std::vector<double> analytic(x.numel(), 0.0);
        if (x.has_grad())
            std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
        if (!all_finite(std::span<const double>(analytic)))
            throw NumericError("finite_difference_check: non-finite analytic gradient");
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double saved = x[i];
            x[i] = saved + eps;
            const double up = eval_scalar(f);
            x[i] = saved - eps;
            const double down = eval_scalar(f);
            x[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + eps);
            ++result.coordinates;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_tensor = t;
                result.worst_index = i;
            }
        }
    }
    for (std::size_t t = 0; t < xs.size(); ++t) {
        xs[t].zero_grad();
        xs[t].set_requires_grad(previous_flags[t]);
    }
    return result;
}

double finite_difference_check(const std::function<Tensor<double>(const Tensor<double> &)> &f,
                               const Tensor<double> &x, double eps) {
    const std::array<Tensor<double>, 1> inputs{x};
    return finite_difference_check([&] { return f(x); }, std::span<const Tensor<double>>(inputs), eps)
        .max_relative_error;
}

} // namespace pesc
