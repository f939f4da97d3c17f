// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pesc/core/tensor.hpp"

namespace pesc {

enum class Activation { gelu, silu, tanh, relu };

[[nodiscard]] Activation parse_activation(std::string_view name);
[[nodiscard]] std::string activation_name(Activation act);

template <typename T>
[[nodiscard]] T activate(T x, Activation act) noexcept;

// Linear algebra ------------------------------------------------------------

/// a[m x p] . b[p x q]
template <typename T>
Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b);

/// a[m x p] . b[q x p]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T> &a, const Tensor<T> &b);

// Elementwise ---------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b);

template <typename T>
Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b);

template <typename T>
Tensor<T> scale(const Tensor<T> &a, T factor);

template <typename T>
Tensor<T> activation(const Tensor<T> &x, Activation act);

// Reductions ----------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T> &x);

/// Column means of a 2-D tensor: [rows x n] -> [n].
template <typename T>
Tensor<T> mean_rows(const Tensor<T> &x);

// Normalization and probability ---------------------------------------------

/// Numerically stable softmax along `axis`. Entries equal to -inf map to
/// exactly 0; an axis slice that is entirely -inf is an error.
template <typename T>
Tensor<T> softmax(const Tensor<T> &x, std::size_t axis);

/// Row-wise softmax restricted to the k largest logits of each row (ties go to
/// the lower index). Every other entry of the output is exactly 0.
template <typename T>
Tensor<T> top_k_softmax(const Tensor<T> &logits, std::size_t k);

/// Indices of the k largest values, largest first, lower index wins ties.
template <typename T>
void top_k_indices(std::span<const T> row, std::size_t k, std::span<std::size_t> out);

template <typename T>
Tensor<T> layer_norm(const Tensor<T> &x, const Tensor<T> &gamma, const Tensor<T> &beta, T eps = T(1e-5));

// Indexing ------------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T> &table, std::span<const int> ids);

/// Rows of x selected by `rows` (repeats allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T> &x, std::span<const std::size_t> rows);

/// Flat elements of x selected by `flat`; result is 1-D.
template <typename T>
Tensor<T> take(const Tensor<T> &x, std::span<const std::size_t> flat);

/// Multiplies row r of x[m x d] by s[r].
template <typename T>
Tensor<T> scale_rows(const Tensor<T> &x, const Tensor<T> &s);

/// out[rows[p][r]] += parts[p][r] into a zero [n_rows x d] tensor.
template <typename T>
Tensor<T> scatter_add_rows(std::span<const Tensor<T>> parts, std::span<const std::vector<std::size_t>> rows,
                           std::size_t n_rows);

// Model-level ---------------------------------------------------------------

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T> &logits, std::span<const int> targets);

/// Multi-head causal self-attention over `batch` sequences of length seq_len
/// stacked row-wise in q, k, v of shape [batch*seq_len x d_model].
template <typename T>
Tensor<T> causal_attention(const Tensor<T> &q, const Tensor<T> &k, const Tensor<T> &v, std::size_t n_heads,
                           std::size_t seq_len);

} // namespace pesc
