// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/core/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace pesc {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t shape_numel(const Shape &shape) noexcept {
    std::size_t n = 1;
    for (std::size_t d : shape)
        n *= d;
    return n;
}

std::string shape_str(const Shape &shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() noexcept { return t_grad_enabled; }

template <typename T>
Graph<T> Graph<T>::build(const Tensor<T> &root) {
    Graph graph;
    if (!root.defined())
        return graph;
    std::unordered_set<Node<T> *> visited;
    // Iterative post-order DFS; (node, next input index) frames.
    std::vector<std::pair<Node<T> *, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<T> *child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second)
                stack.emplace_back(child, 0);
            continue;
        }
        graph.order_.push_back(node);
        stack.pop_back();
    }
    return graph;
}

template <typename T>
void Graph<T>::backward() {
    if (order_.empty())
        return;
    Node<T> *root = order_.back();
    for (Node<T> *node : order_)
        if (!node->is_leaf())
            node->grad.clear();
    root->ensure_grad();
    if (root->is_leaf())
        root->grad[0] += T(1);
    else
        root->grad[0] = T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node<T> *node = *it;
        if (node->is_leaf() || node->grad.empty())
            continue;
        node->backward(*node);
    }
}

template <typename T>
void backward(const Tensor<T> &loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward() needs a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined tensor")));
    if (!loss.requires_grad())
        throw ContractError("backward() on a loss that is not part of a recorded graph");
    Graph<T>::build(loss).backward();
}

template <typename T>
bool all_finite(std::span<const T> values) noexcept {
    for (T v : values)
        if (!std::isfinite(v))
            return false;
    return true;
}

template class Graph<float>;
template class Graph<double>;
template void backward(const Tensor<float> &);
template void backward(const Tensor<double> &);
template bool all_finite(std::span<const float>) noexcept;
template bool all_finite(std::span<const double>) noexcept;

} // namespace pesc
