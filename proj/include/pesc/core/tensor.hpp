// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pesc/core/errors.hpp"

namespace pesc {

using Shape = std::vector<std::size_t>;

[[nodiscard]] std::size_t shape_numel(const Shape &shape) noexcept;
[[nodiscard]] std::string shape_str(const Shape &shape);

/// Graph node behind a Tensor handle. Leaves have no inputs and no backward
/// function; interior nodes are recorded only when some input requires grad.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until the first gradient lands
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node &)> backward;
    const char *op = "leaf";

    [[nodiscard]] bool is_leaf() const noexcept { return !backward; }

    std::vector<T> &ensure_grad() {
        if (grad.empty())
            grad.assign(data.size(), T(0));
        return grad;
    }
};

/// Dense row-major array with an attached gradient slot. Copies are cheap and
/// alias the same storage; use clone() for an independent copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        for (std::size_t d : shape)
            if (d == 0)
                throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        if (shape.empty())
            throw ShapeError("tensor needs at least one dimension");
        if (values.size() != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape));
        auto node = std::make_shared<Node<T>>();
        node->shape = std::move(shape);
        node->data = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    [[nodiscard]] bool defined() const noexcept { return static_cast<bool>(node_); }
    [[nodiscard]] const Shape &shape() const { return node_->shape; }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
    [[nodiscard]] std::size_t numel() const { return node_->data.size(); }
    [[nodiscard]] std::size_t rows() const { return node_->shape.front(); }
    [[nodiscard]] std::size_t cols() const { return node_->shape.back(); }

    [[nodiscard]] std::span<T> data() { return node_->data; }
    [[nodiscard]] std::span<const T> data() const { return node_->data; }
    [[nodiscard]] T &operator[](std::size_t i) { return node_->data[i]; }
    [[nodiscard]] const T &operator[](std::size_t i) const { return node_->data[i]; }
    [[nodiscard]] T &at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }
    [[nodiscard]] const T &at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    [[nodiscard]] T item() const {
        if (numel() != 1)
            throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    [[nodiscard]] bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) {
        if (!node_->is_leaf())
            throw ContractError("requires_grad can only be toggled on leaf tensors");
        node_->requires_grad = on;
    }

    [[nodiscard]] bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
    [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
    [[nodiscard]] std::span<T> grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    /// Independent leaf with the same values and requires_grad flag.
    [[nodiscard]] Tensor clone() const { return from(shape(), node_->data, node_->requires_grad); }

    /// Leaf sharing no graph history, never requiring grad.
    [[nodiscard]] Tensor detach() const { return from(shape(), node_->data, false); }

    [[nodiscard]] Node<T> *node() const noexcept { return node_.get(); }
    [[nodiscard]] const std::shared_ptr<Node<T>> &node_ptr() const noexcept { return node_; }

    [[nodiscard]] bool same_storage(const Tensor &other) const noexcept { return node_ == other.node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
    bool previous_;
};

[[nodiscard]] bool grad_enabled() noexcept;

/// Reverse topological record of the operations reachable from a root.
template <typename T>
class Graph {
public:
    /// Nodes in topological order: every node appears after all of its inputs.
    static Graph build(const Tensor<T> &root);

    [[nodiscard]] const std::vector<Node<T> *> &order() const noexcept { return order_; }

    /// Seeds d(root)/d(root) = 1 and replays every recorded backward function
    /// once, in reverse order. Leaf gradients accumulate across calls.
    void backward();

private:
    std::vector<Node<T> *> order_;
};

/// Populates grad for every requires_grad tensor reachable from a scalar loss.
template <typename T>
void backward(const Tensor<T> &loss);

template <typename T>
[[nodiscard]] bool all_finite(std::span<const T> values) noexcept;

} // namespace pesc
