// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pesc {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Wraps a freshly computed value; records the graph edge only when some input
/// requires grad and recording is enabled.
template <typename T, typename Fn>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<NodePtr<T>> inputs, const char *op,
                      Fn &&backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->op = op;
    const bool needs = grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                                     [](const NodePtr<T> &n) { return n->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::forward<Fn>(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
void require_rank2(const Tensor<T> &t, const char *what) {
    if (t.rank() != 2)
        throw ShapeError(std::string(what) + " expects a 2-D tensor, got " + shape_str(t.shape()));
}

// C[m x q] += A[m x p] . B[p x q]
template <typename T>
void gemm_nn(const T *a, const T *b, T *c, std::size_t m, std::size_t p, std::size_t q) {
    for (std::size_t i = 0; i < m; ++i) {
        T *crow = c + i * q;
        const T *arow = a + i * p;
        for (std::size_t kk = 0; kk < p; ++kk) {
            const T av = arow[kk];
            const T *brow = b + kk * q;
            for (std::size_t j = 0; j < q; ++j)
                crow[j] += av * brow[j];
        }
    }
}

// C[p x q] += A[m x p]^T . G[m x q]
template <typename T>
void gemm_tn(const T *a, const T *g, T *c, std::size_t m, std::size_t p, std::size_t q) {
    for (std::size_t i = 0; i < m; ++i) {
        const T *arow = a + i * p;
        const T *grow = g + i * q;
        for (std::size_t kk = 0; kk < p; ++kk) {
            const T av = arow[kk];
            T *crow = c + kk * q;
            for (std::size_t j = 0; j < q; ++j)
                crow[j] += av * grow[j];
        }
    }
}

template <typename T>
std::vector<T> transposed(const T *b, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[c * rows + r] = b[r * cols + c];
    return out;
}

// C[m x p] += G[m x q] . B[p x q]^T
template <typename T>
void gemm_nt(const T *g, const T *b, T *c, std::size_t m, std::size_t q, std::size_t p) {
    const std::vector<T> bt = transposed(b, p, q);
    gemm_nn(g, bt.data(), c, m, q, p);
}

template <typename T>
void check_same_shape(const Tensor<T> &a, const Tensor<T> &b, const char *op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
T activation_grad(T x, Activation act) noexcept {
    switch (act) {
    case Activation::gelu: {
        constexpr T c = T(0.7978845608028654); // sqrt(2/pi)
        constexpr T a = T(0.044715);
        const T u = c * (x + a * x * x * x);
        const T t = std::tanh(u);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * a * x * x);
    }
    case Activation::silu: {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
    }
    case Activation::tanh: {
        const T t = std::tanh(x);
        return T(1) - t * t;
    }
    case Activation::relu:
        return x > T(0) ? T(1) : T(0);
    }
    return T(0);
}

} // namespace

Activation parse_activation(std::string_view name) {
    if (name == "gelu")
        return Activation::gelu;
    if (name == "silu")
        return Activation::silu;
    if (name == "tanh")
        return Activation::tanh;
    if (name == "relu")
        return Activation::relu;
    throw ConfigError("unknown activation '" + std::string(name) + "' (expected gelu, silu, tanh or relu)");
}

std::string activation_name(Activation act) {
    switch (act) {
    case Activation::gelu:
        return "gelu";
    case Activation::silu:
        return "silu";
    case Activation::tanh:
        return "tanh";
    case Activation::relu:
        return "relu";
    }
    return "?";
}

template <typename T>
T activate(T x, Activation act) noexcept {
    switch (act) {
    case Activation::gelu: {
        constexpr T c = T(0.7978845608028654);
        constexpr T a = T(0.044715);
        return T(0.5) * x * (T(1) + std::tanh(c * (x + a * x * x * x)));
    }
    case Activation::silu:
        return x / (T(1) + std::exp(-x));
    case Activation::tanh:
        return std::tanh(x);
    case Activation::relu:
        return x > T(0) ? x : T(0);
    }
    return x;
}

template <typename T>
Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
    if (b.dim(0) != p)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<T> out(m * q, T(0));
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, p, q);
    return make_result<T>({m, q}, std::move(out), {a.node_ptr(), b.node_ptr()}, "matmul", [m, p, q](Node<T> &self) {
        Node<T> &na = *self.inputs[0];
        Node<T> &nb = *self.inputs[1];
        if (na.requires_grad)
            gemm_nt(self.grad.data(), nb.data.data(), na.ensure_grad().data(), m, q, p);
        if (nb.requires_grad)
            gemm_tn(na.data.data(), self.grad.data(), nb.ensure_grad().data(), m, p, q);
    });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T> &a, const Tensor<T> &b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(0);
    if (b.dim(1) != p)
        throw ShapeError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    std::vector<T> out(m * q, T(0));
    gemm_nt(a.data().data(), b.data().data(), out.data(), m, p, q);
    return make_result<T>({m, q}, std::move(out), {a.node_ptr(), b.node_ptr()}, "matmul_nt",
                          [m, p, q](Node<T> &self) {
                              Node<T> &na = *self.inputs[0];
                              Node<T> &nb = *self.inputs[1];
                              if (na.requires_grad)
                                  gemm_nn(self.grad.data(), nb.data.data(), na.ensure_grad().data(), m, q, p);
                              if (nb.requires_grad)
                                  gemm_tn(self.grad.data(), na.data.data(), nb.ensure_grad().data(), m, q, p);
                          });
}

template <typename T>
Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = ad[i] + bd[i];
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, "add", [](Node<T> &self) {
        for (auto &in : self.inputs) {
            if (!in->requires_grad)
                continue;
            auto &g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = ad[i] * bd[i];
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, "mul", [](Node<T> &self) {
        Node<T> &na = *self.inputs[0];
        Node<T> &nb = *self.inputs[1];
        if (na.requires_grad) {
            auto &g = na.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[i] * nb.data[i];
        }
        if (nb.requires_grad) {
            auto &g = nb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[i] * na.data[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T> &a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (T &v : out)
        v *= factor;
    return make_result<T>(a.shape(), std::move(out), {a.node_ptr()}, "scale", [factor](Node<T> &self) {
        auto &g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * factor;
    });
}

template <typename T>
Tensor<T> activation(const Tensor<T> &x, Activation act) {
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = activate(xd[i], act);
    return make_result<T>(x.shape(), std::move(out), {x.node_ptr()}, "activation", [act](Node<T> &self) {
        Node<T> &in = *self.inputs[0];
        auto &g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * activation_grad(in.data[i], act);
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T> &x) {
    T total = T(0);
    for (T v : x.data())
        total += v;
    return make_result<T>({1}, {total}, {x.node_ptr()}, "sum", [](Node<T> &self) {
        auto &g = self.inputs[0]->ensure_grad();
        for (T &v : g)
            v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T> &x) {
    require_rank2(x, "mean_rows");
    const std::size_t r = x.dim(0), n = x.dim(1);
    std::vector<T> out(n, T(0));
    const auto xd = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[j] += xd[i * n + j];
    for (T &v : out)
        v /= static_cast<T>(r);
    return make_result<T>({n}, std::move(out), {x.node_ptr()}, "mean_rows", [r, n](Node<T> &self) {
        auto &g = self.inputs[0]->ensure_grad();
        const T inv = T(1) / static_cast<T>(r);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < n; ++j)
                g[i * n + j] += self.grad[j] * inv;
    });
}

template <typename T>
Tensor<T> softmax(const Tensor<T> &x, std::size_t axis) {
    if (axis >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i)
        outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i)
        inner *= x.dim(i);
    const std::size_t n = x.dim(axis);
    const auto xd = x.data();
    std::vector<T> out(x.numel());
    constexpr T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = neg_inf;
            for (std::size_t j = 0; j < n; ++j)
                mx = std::max(mx, xd[base + j * inner]);
            if (mx == neg_inf)
                throw NumericError("softmax: every entry along the axis is -inf (degenerate distribution)");
            T denom = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                const T v = xd[base + j * inner];
                const T e = v == neg_inf ? T(0) : std::exp(v - mx);
                out[base + j * inner] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < n; ++j)
                out[base + j * inner] /= denom;
        }
    }
    return make_result<T>(x.shape(), std::move(out), {x.node_ptr()}, "softmax", [outer, inner, n](Node<T> &self) {
        auto &g = self.inputs[0]->ensure_grad();
        const auto &y = self.data;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                T dot = T(0);
                for (std::size_t j = 0; j < n; ++j)
                    dot += self.grad[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = base + j * inner;
                    g[idx] += y[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

template <typename T>
void top_k_indices(std::span<const T> row, std::size_t k, std::span<std::size_t> out) {
    const std::size_t n = row.size();
    for (std::size_t slot = 0; slot < k; ++slot) {
        std::size_t best = n;
        for (std::size_t j = 0; j < n; ++j) {
            bool taken = false;
            for (std::size_t s = 0; s < slot; ++s)
                taken = taken || out[s] == j;
            if (taken)
                continue;
            // strict '>' keeps the lowest index among equal values
            if (best == n || row[j] > row[best])
                best = j;
        }
        out[slot] = best;
    }
}

template <typename T>
Tensor<T> top_k_softmax(const Tensor<T> &logits, std::size_t k) {
    require_rank2(logits, "top_k_softmax");
    const std::size_t rows = logits.dim(0), n = logits.dim(1);
    if (k == 0 || k > n)
        throw ConfigError("top-k: k=" + std::to_string(k) + " must satisfy 1 <= k <= n=" + std::to_string(n));
    const auto xd = logits.data();
    std::vector<T> out(rows * n, T(0));
    std::vector<std::size_t> idx(k);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::span<const T> row = xd.subspan(r * n, n);
        top_k_indices(row, k, std::span<std::size_t>(idx));
        const T mx = row[idx[0]];
        T denom = T(0);
        for (std::size_t s = 0; s < k; ++s) {
            const T e = std::exp(row[idx[s]] - mx);
            out[r * n + idx[s]] = e;
            denom += e;
        }
        for (std::size_t s = 0; s < k; ++s)
            out[r * n + idx[s]] /= denom;
    }
    return make_result<T>({rows, n}, std::move(out), {logits.node_ptr()}, "top_k_softmax",
                          [rows, n](Node<T> &self) {
                              auto &g = self.inputs[0]->ensure_grad();
                              const auto &y = self.data;
                              for (std::size_t r = 0; r < rows; ++r) {
                                  T dot = T(0);
                                  for (std::size_t j = 0; j < n; ++j)
                                      dot += self.grad[r * n + j] * y[r * n + j];
                                  // masked entries have y == 0 and receive nothing
                                  for (std::size_t j = 0; j < n; ++j)
                                      g[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - dot);
                              }
                          });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T> &x, const Tensor<T> &gamma, const Tensor<T> &beta, T eps) {
    require_rank2(x, "layer_norm");
    const std::size_t r = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match width " + std::to_string(d));
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<T> out(r * d), xhat(r * d), rstd(r);
    for (std::size_t i = 0; i < r; ++i) {
        T mean = T(0);
        for (std::size_t j = 0; j < d; ++j)
            mean += xd[i * d + j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            const T c = xd[i * d + j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        rstd[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (xd[i * d + j] - mean) * rstd[i];
            xhat[i * d + j] = h;
            out[i * d + j] = h * gd[j] + bd[j];
        }
    }
    return make_result<T>(
        {r, d}, std::move(out), {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()}, "layer_norm",
        [r, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T> &self) {
            Node<T> &nx = *self.inputs[0];
            Node<T> &ng = *self.inputs[1];
            Node<T> &nb = *self.inputs[2];
            const auto &dy = self.grad;
            if (ng.requires_grad) {
                auto &g = ng.ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        g[j] += dy[i * d + j] * xhat[i * d + j];
            }
            if (nb.requires_grad) {
                auto &g = nb.ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        g[j] += dy[i * d + j];
            }
            if (nx.requires_grad) {
                auto &g = nx.ensure_grad();
                for (std::size_t i = 0; i < r; ++i) {
                    T mean_dh = T(0), mean_dhx = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dh = dy[i * d + j] * ng.data[j];
                        mean_dh += dh;
                        mean_dhx += dh * xhat[i * d + j];
                    }
                    mean_dh /= static_cast<T>(d);
                    mean_dhx /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dh = dy[i * d + j] * ng.data[j];
                        g[i * d + j] += rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dhx);
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T> &x, std::span<const std::size_t> rows) {
    require_rank2(x, "gather_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (rows.empty())
        throw ShapeError("gather_rows: empty row selection");
    std::vector<T> out(rows.size() * d);
    const auto xd = x.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n)
            throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                             shape_str(x.shape()));
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    std::vector<std::size_t> saved(rows.begin(), rows.end());
    return make_result<T>({rows.size(), d}, std::move(out), {x.node_ptr()}, "gather_rows",
                          [d, saved = std::move(saved)](Node<T> &self) {
                              auto &g = self.inputs[0]->ensure_grad();
                              for (std::size_t i = 0; i < saved.size(); ++i)
                                  for (std::size_t j = 0; j < d; ++j)
                                      g[saved[i] * d + j] += self.grad[i * d + j];
                          });
}

template <typename T>
Tensor<T> embedding(const Tensor<T> &table, std::span<const int> ids) {
    require_rank2(table, "embedding");
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0))
            throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside [0, " +
                             std::to_string(table.dim(0)) + ")");
        rows[i] = static_cast<std::size_t>(ids[i]);
    }
    return gather_rows(table, std::span<const std::size_t>(rows));
}

template <typename T>
Tensor<T> take(const Tensor<T> &x, std::span<const std::size_t> flat) {
    if (flat.empty())
        throw ShapeError("take: empty selection");
    std::vector<T> out(flat.size());
    const auto xd = x.data();
    for (std::size_t i = 0; i < flat.size(); ++i) {
        if (flat[i] >= xd.size())
            throw IndexError("take: index " + std::to_string(flat[i]) + " out of range for " +
                             shape_str(x.shape()));
        out[i] = xd[flat[i]];
    }
    std::vector<std::size_t> saved(flat.begin(), flat.end());
    return make_result<T>({flat.size()}, std::move(out), {x.node_ptr()}, "take",
                          [saved = std::move(saved)](Node<T> &self) {
                              auto &g = self.inputs[0]->ensure_grad();
                              for (std::size_t i = 0; i < saved.size(); ++i)
                                  g[saved[i]] += self.grad[i];
                          });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T> &x, const Tensor<T> &s) {
    require_rank2(x, "scale_rows");
    const std::size_t m = x.dim(0), d = x.dim(1);
    if (s.numel() != m)
        throw ShapeError("scale_rows: " + std::to_string(s.numel()) + " factors for " + std::to_string(m) + " rows");
    std::vector<T> out(m * d);
    const auto xd = x.data();
    const auto sd = s.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j)
            out[i * d + j] = xd[i * d + j] * sd[i];
    return make_result<T>({m, d}, std::move(out), {x.node_ptr(), s.node_ptr()}, "scale_rows",
                          [m, d](Node<T> &self) {
                              Node<T> &nx = *self.inputs[0];
                              Node<T> &ns = *self.inputs[1];
                              if (nx.requires_grad) {
                                  auto &g = nx.ensure_grad();
                                  for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < d; ++j)
                                          g[i * d + j] += self.grad[i * d + j] * ns.data[i];
                              }
                              if (ns.requires_grad) {
                                  auto &g = ns.ensure_grad();
                                  for (std::size_t i = 0; i < m; ++i) {
                                      T acc = T(0);
                                      for (std::size_t j = 0; j < d; ++j)
                                          acc += self.grad[i * d + j] * nx.data[i * d + j];
                                      g[i] += acc;
                                  }
                              }
                          });
}

template <typename T>
Tensor<T> scatter_add_rows(std::span<const Tensor<T>> parts, std::span<const std::vector<std::size_t>> rows,
                           std::size_t n_rows) {
    if (parts.size() != rows.size())
        throw ShapeError("scatter_add_rows: " + std::to_string(parts.size()) + " parts but " +
                         std::to_string(rows.size()) + " index lists");
    if (parts.empty())
        throw ShapeError("scatter_add_rows: nothing to scatter");
    const std::size_t d = parts.front().cols();
    std::vector<T> out(n_rows * d, T(0));
    std::vector<NodePtr<T>> inputs;
    inputs.reserve(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor<T> &part = parts[p];
        require_rank2(part, "scatter_add_rows");
        if (part.cols() != d || part.rows() != rows[p].size())
            throw ShapeError("scatter_add_rows: part " + shape_str(part.shape()) + " vs " +
                             std::to_string(rows[p].size()) + " indices of width " + std::to_string(d));
        const auto pd = part.data();
        for (std::size_t r = 0; r < rows[p].size(); ++r) {
            const std::size_t dst = rows[p][r];
            if (dst >= n_rows)
                throw IndexError("scatter_add_rows: destination row " + std::to_string(dst) + " >= " +
                                 std::to_string(n_rows));
            for (std::size_t j = 0; j < d; ++j)
                out[dst * d + j] += pd[r * d + j];
        }
        inputs.push_back(part.node_ptr());
    }
    std::vector<std::vector<std::size_t>> saved(rows.begin(), rows.end());
    return make_result<T>({n_rows, d}, std::move(out), std::move(inputs), "scatter_add_rows",
                          [d, saved = std::move(saved)](Node<T> &self) {
                              for (std::size_t p = 0; p < saved.size(); ++p) {
                                  Node<T> &in = *self.inputs[p];
                                  if (!in.requires_grad)
                                      continue;
                                  auto &g = in.ensure_grad();
                                  for (std::size_t r = 0; r < saved[p].size(); ++r)
                                      for (std::size_t j = 0; j < d; ++j)
                                          g[r * d + j] += self.grad[saved[p][r] * d + j];
                              }
                          });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T> &logits, std::span<const int> targets) {
    require_rank2(logits, "cross_entropy");
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    if (targets.size() != n)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                         " rows");
    const auto xd = logits.data();
    std::vector<T> probs(n * v);
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
            throw IndexError("cross_entropy: class index " + std::to_string(targets[i]) + " outside [0, " +
                             std::to_string(v) + ")");
        const T *row = xd.data() + i * v;
        const T mx = *std::max_element(row, row + v);
        T denom = T(0);
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - mx);
            denom += probs[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j)
            probs[i * v + j] /= denom;
        total += std::log(denom) + mx - row[targets[i]];
    }
    std::vector<int> saved(targets.begin(), targets.end());
    return make_result<T>({1}, {total / static_cast<T>(n)}, {logits.node_ptr()}, "cross_entropy",
                          [n, v, probs = std::move(probs), saved = std::move(saved)](Node<T> &self) {
                              auto &g = self.inputs[0]->ensure_grad();
                              const T s = self.grad[0] / static_cast<T>(n);
                              for (std::size_t i = 0; i < n; ++i) {
                                  for (std::size_t j = 0; j < v; ++j)
                                      g[i * v + j] += s * probs[i * v + j];
                                  g[i * v + static_cast<std::size_t>(saved[i])] -= s;
                              }
                          });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T> &q, const Tensor<T> &k, const Tensor<T> &v, std::size_t n_heads,
                           std::size_t seq_len) {
    require_rank2(q, "causal_attention");
    check_same_shape(q, k, "causal_attention");
    check_same_shape(q, v, "causal_attention");
    const std::size_t rows = q.dim(0), d = q.dim(1);
    if (seq_len == 0 || rows % seq_len != 0)
        throw ShapeError("causal_attention: " + std::to_string(rows) + " rows is not a multiple of seq_len " +
                         std::to_string(seq_len));
    if (n_heads == 0 || d % n_heads != 0)
        throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    const std::size_t batch = rows / seq_len, dh = d / n_heads, len = seq_len;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    const auto qd = q.data();
    const auto kd = k.data();
    const auto vd = v.data();
    std::vector<T> out(rows * d, T(0));
    std::vector<T> probs(batch * n_heads * len * len, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            T *pbase = probs.data() + (b * n_heads + h) * len * len;
            for (std::size_t t = 0; t < len; ++t) {
                const T *qt = qd.data() + (b * len + t) * d + h * dh;
                T *p = pbase + t * len;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    const T *ks = kd.data() + (b * len + s) * d + h * dh;
                    T acc = T(0);
                    for (std::size_t c = 0; c < dh; ++c)
                        acc += qt[c] * ks[c];
                    p[s] = acc * inv_sqrt;
                    mx = std::max(mx, p[s]);
                }
                T denom = T(0);
                for (std::size_t s = 0; s <= t; ++s) {
                    p[s] = std::exp(p[s] - mx);
                    denom += p[s];
                }
                T *o = out.data() + (b * len + t) * d + h * dh;
                for (std::size_t s = 0; s <= t; ++s) {
                    p[s] /= denom;
                    const T *vs = vd.data() + (b * len + s) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c)
                        o[c] += p[s] * vs[c];
                }
            }
        }
    }
    return make_result<T>(
        {rows, d}, std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()}, "causal_attention",
        [batch, n_heads, len, d, dh, inv_sqrt, probs = std::move(probs)](Node<T> &self) {
            const auto &qd = self.inputs[0]->data;
            const auto &kd = self.inputs[1]->data;
            const auto &vd = self.inputs[2]->data;
            std::vector<T> dq(qd.size(), T(0)), dk(kd.size(), T(0)), dv(vd.size(), T(0));
            std::vector<T> dp(len);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const T *pbase = probs.data() + (b * n_heads + h) * len * len;
                    for (std::size_t t = 0; t < len; ++t) {
                        const T *p = pbase + t * len;
                        const std::size_t ot = (b * len + t) * d + h * dh;
                        const T *go = self.grad.data() + ot;
                        T dot = T(0);
                        for (std::size_t s = 0; s <= t; ++s) {
                            const std::size_t os = (b * len + s) * d + h * dh;
                            T acc = T(0);
                            for (std::size_t c = 0; c < dh; ++c) {
                                acc += go[c] * vd[os + c];
                                dv[os + c] += p[s] * go[c];
                            }
                            dp[s] = acc;
                            dot += p[s] * acc;
                        }
                        for (std::size_t s = 0; s <= t; ++s) {
                            const T ds = p[s] * (dp[s] - dot) * inv_sqrt;
                            const std::size_t os = (b * len + s) * d + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) {
                                dq[ot + c] += ds * kd[os + c];
                                dk[os + c] += ds * qd[ot + c];
                            }
                        }
                    }
                }
            }
            const std::vector<T> *grads[3] = {&dq, &dk, &dv};
            for (std::size_t i = 0; i < 3; ++i) {
                Node<T> &in = *self.inputs[i];
                if (!in.requires_grad)
                    continue;
                auto &g = in.ensure_grad();
                for (std::size_t j = 0; j < g.size(); ++j)
                    g[j] += (*grads[i])[j];
            }
        });
}

#define PESC_INSTANTIATE_OPS(T)                                                                                    \
    template T activate(T, Activation) noexcept;                                                                    \
    template Tensor<T> matmul(const Tensor<T> &, const Tensor<T> &);                                                \
    template Tensor<T> matmul_nt(const Tensor<T> &, const Tensor<T> &);                                             \
    template Tensor<T> add(const Tensor<T> &, const Tensor<T> &);                                                   \
    template Tensor<T> mul(const Tensor<T> &, const Tensor<T> &);                                                   \
    template Tensor<T> scale(const Tensor<T> &, T);                                                                 \
    template Tensor<T> activation(const Tensor<T> &, Activation);                                                   \
    template Tensor<T> sum(const Tensor<T> &);                                                                      \
    template Tensor<T> mean_rows(const Tensor<T> &);                                                                \
    template Tensor<T> softmax(const Tensor<T> &, std::size_t);                                                     \
    template Tensor<T> top_k_softmax(const Tensor<T> &, std::size_t);                                               \
    template void top_k_indices(std::span<const T>, std::size_t, std::span<std::size_t>);                           \
    template Tensor<T> layer_norm(const Tensor<T> &, const Tensor<T> &, const Tensor<T> &, T);                      \
    template Tensor<T> embedding(const Tensor<T> &, std::span<const int>);                                          \
    template Tensor<T> gather_rows(const Tensor<T> &, std::span<const std::size_t>);                                \
    template Tensor<T> take(const Tensor<T> &, std::span<const std::size_t>);                                       \
    template Tensor<T> scale_rows(const Tensor<T> &, const Tensor<T> &);                                            \
    template Tensor<T> scatter_add_rows(std::span<const Tensor<T>>, std::span<const std::vector<std::size_t>>,      \
                                        std::size_t);                                                               \
    template Tensor<T> cross_entropy(const Tensor<T> &, std::span<const int>);                                      \
    template Tensor<T> causal_attention(const Tensor<T> &, const Tensor<T> &, const Tensor<T> &, std::size_t,       \
                                        std::size_t);

PESC_INSTANTIATE_OPS(float)
PESC_INSTANTIATE_OPS(double)

#undef PESC_INSTANTIATE_OPS

} // namespace pesc
