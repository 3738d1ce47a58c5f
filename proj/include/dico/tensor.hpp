#pragma once

// Dense reverse-mode differentiation engine.
//
// A Graph is an ordered tape of tensor-valued operations. Tensor is a cheap
// handle (graph pointer + node index) into that tape. Parameters live outside
// any graph and own their value/grad storage; Graph::leaf snapshots a
// parameter into the tape, and backward() accumulates the tape gradients back
// into Parameter::grad. One backward pass per graph; re-entry throws.
//
// Accumulation order of every kernel is fixed (row-major, ascending inner
// index, no reordering), so a fixed seed gives bit-identical runs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dico/error.hpp"

namespace dico {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

/// A named, trainable tensor. Owns its values and accumulated gradient.
template <typename T>
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;

    Parameter() = default;
    Parameter(std::string n, Shape s)
        : name(std::move(n)), shape(std::move(s)),
          value(shape_numel(shape), T(0)), grad(shape_numel(shape), T(0)) {}

    size_t numel() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
class Graph;

/// Handle to one node of a Graph. Copyable, trivially small.
template <typename T>
class Tensor {
public:
    Tensor() : graph_(nullptr), id_(-1) {}
    Tensor(Graph<T>* g, int id) : graph_(g), id_(id) {}

    const Shape& shape() const;
    const std::vector<T>& value() const;
    const std::vector<T>& grad() const;
    bool requires_grad() const;
    size_t numel() const { return value().size(); }
    /// Scalar payload of a one-element tensor.
    T item() const;

    Graph<T>* graph() const { return graph_; }
    int id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph<T>* graph_;
    int id_;
};

template <typename T>
class Graph {
public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        std::function<void()> backprop;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Tensor<T> constant(Shape shape, std::vector<T> values) {
        if (shape_numel(shape) != values.size())
            throw ShapeError(cat("constant: shape ", shape_str(shape), " wants ",
                                 shape_numel(shape), " values, got ", values.size()));
        return wrap(add_node(std::move(shape), std::move(values), false));
    }

    Tensor<T> zeros(Shape shape) {
        size_t n = shape_numel(shape);
        return wrap(add_node(std::move(shape), std::vector<T>(n, T(0)), false));
    }

    Tensor<T> full(Shape shape, T v) {
        size_t n = shape_numel(shape);
        return wrap(add_node(std::move(shape), std::vector<T>(n, v), false));
    }

    /// Snapshot a parameter into the tape. Cached: the same parameter maps to
    /// the same node within one graph, so repeated uses share one gradient
    /// accumulator.
    Tensor<T> leaf(Parameter<T>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return wrap(it->second);
        int id = add_node(p.shape, p.value, true);
        nodes_[id].param = &p;
        param_nodes_.emplace(&p, id);
        return wrap(id);
    }

    /// Reverse pass from a scalar loss. Populates Parameter::grad (+=) on all
    /// reachable parameters and consumes the graph.
    void backward(const Tensor<T>& loss) {
        if (consumed_)
            throw GraphError("backward: graph already consumed by a previous backward pass");
        if (loss.graph() != this)
            throw GraphError("backward: loss belongs to a different graph");
        if (loss.numel() != 1)
            throw GraphError(cat("backward: loss must be scalar, got shape ",
                                 shape_str(loss.shape())));
        consumed_ = true;
        if (!node(loss.id()).requires_grad) return; // nothing reachable is trainable
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad.assign(n.value.size(), T(0));
        node(loss.id()).grad[0] = T(1);
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.requires_grad && n.backprop) n.backprop();
        }
        for (auto& [param, id] : param_nodes_) {
            const auto& g = node(id).grad;
            for (size_t i = 0; i < g.size(); ++i) param->grad[i] += g[i];
        }
    }

    bool consumed() const { return consumed_; }
    size_t size() const { return nodes_.size(); }

    int add_node(Shape shape, std::vector<T> value, bool needs_grad) {
        nodes_.push_back(Node{std::move(shape), std::move(value), {}, needs_grad, nullptr, {}});
        return static_cast<int>(nodes_.size()) - 1;
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    Tensor<T> wrap(int id) { return Tensor<T>(this, id); }

private:
    std::deque<Node> nodes_; // deque: stable references as the tape grows
    std::unordered_map<Parameter<T>*, int> param_nodes_;
    bool consumed_ = false;
};

template <typename T>
const Shape& Tensor<T>::shape() const { return graph_->node(id_).shape; }
template <typename T>
const std::vector<T>& Tensor<T>::value() const { return graph_->node(id_).value; }
template <typename T>
const std::vector<T>& Tensor<T>::grad() const { return graph_->node(id_).grad; }
template <typename T>
bool Tensor<T>::requires_grad() const { return graph_->node(id_).requires_grad; }
template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1)
        throw ShapeError(cat("item: tensor is not scalar, shape ", shape_str(shape())));
    return value()[0];
}

// ---------------------------------------------------------------------------
// Raw kernels. Fixed loop order throughout.

namespace kernels {

// C[p x r] += A[p x q] * B[q x r]
template <typename T>
void mm_nn_acc(const T* A, const T* B, T* C, int p, int q, int r) {
    for (int i = 0; i < p; ++i) {
        const T* a = A + static_cast<size_t>(i) * q;
        T* c = C + static_cast<size_t>(i) * r;
        for (int k = 0; k < q; ++k) {
            const T aik = a[k];
            const T* b = B + static_cast<size_t>(k) * r;
            for (int j = 0; j < r; ++j) c[j] += aik * b[j];
        }
    }
}

// C[p x r] += A[p x q] * B[r x q]^T
template <typename T>
void mm_nt_acc(const T* A, const T* B, T* C, int p, int q, int r) {
    for (int i = 0; i < p; ++i) {
        const T* a = A + static_cast<size_t>(i) * q;
        T* c = C + static_cast<size_t>(i) * r;
        for (int j = 0; j < r; ++j) {
            const T* b = B + static_cast<size_t>(j) * q;
            T acc = T(0);
            for (int k = 0; k < q; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

// C[q x r] += A[p x q]^T * B[p x r]
template <typename T>
void mm_tn_acc(const T* A, const T* B, T* C, int p, int q, int r) {
    for (int i = 0; i < p; ++i) {
        const T* a = A + static_cast<size_t>(i) * q;
        const T* b = B + static_cast<size_t>(i) * r;
        for (int k = 0; k < q; ++k) {
            const T aik = a[k];
            T* c = C + static_cast<size_t>(k) * r;
            for (int j = 0; j < r; ++j) c[j] += aik * b[j];
        }
    }
}

} // namespace kernels

// ---------------------------------------------------------------------------
// Op helpers.

namespace detail {

template <typename T>
Graph<T>* same_graph(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.graph() != b.graph())
        throw GraphError("operands belong to different graphs");
    return a.graph();
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
    if (t.shape().size() != 2)
        throw ShapeError(cat(op, ": expected a 2-d tensor, got ", shape_str(t.shape())));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(cat(op, ": shape mismatch ", shape_str(a.shape()),
                             " vs ", shape_str(b.shape())));
}

// Slicing geometry for an axis reduction/normalization.
struct AxisSpan {
    size_t outer, len, inner;
};

inline AxisSpan axis_span(const Shape& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw ShapeError(cat("axis ", axis, " out of range for shape ", shape_str(shape)));
    AxisSpan s{1, static_cast<size_t>(shape[static_cast<size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
        s.inner *= static_cast<size_t>(shape[i]);
    return s;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd&& fwd, Bwd&& bwd) {
    Graph<T>* g = x.graph();
    const auto& xv = x.value();
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    int id = g->add_node(x.shape(), std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, bwd]() {
            auto& self = g->node(id);
            auto& xn = g->node(xid);
            for (size_t i = 0; i < self.grad.size(); ++i)
                xn.grad[i] += bwd(xn.value[i], self.value[i]) * self.grad[i];
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>* g = detail::same_graph(a, b);
    detail::require_same_shape(a, b, "add");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    bool req = a.requires_grad() || b.requires_grad();
    int id = g->add_node(a.shape(), std::move(out), req);
    if (req) {
        int aid = a.id(), bid = b.id();
        g->node(id).backprop = [g, id, aid, bid]() {
            const auto& gr = g->node(id).grad;
            if (g->node(aid).requires_grad) {
                auto& ag = g->node(aid).grad;
                for (size_t i = 0; i < gr.size(); ++i) ag[i] += gr[i];
            }
            if (g->node(bid).requires_grad) {
                auto& bg = g->node(bid).grad;
                for (size_t i = 0; i < gr.size(); ++i) bg[i] += gr[i];
            }
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>* g = detail::same_graph(a, b);
    detail::require_same_shape(a, b, "sub");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    bool req = a.requires_grad() || b.requires_grad();
    int id = g->add_node(a.shape(), std::move(out), req);
    if (req) {
        int aid = a.id(), bid = b.id();
        g->node(id).backprop = [g, id, aid, bid]() {
            const auto& gr = g->node(id).grad;
            if (g->node(aid).requires_grad) {
                auto& ag = g->node(aid).grad;
                for (size_t i = 0; i < gr.size(); ++i) ag[i] += gr[i];
            }
            if (g->node(bid).requires_grad) {
                auto& bg = g->node(bid).grad;
                for (size_t i = 0; i < gr.size(); ++i) bg[i] -= gr[i];
            }
        };
    }
    return g->wrap(id);
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>* g = detail::same_graph(a, b);
    detail::require_same_shape(a, b, "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    bool req = a.requires_grad() || b.requires_grad();
    int id = g->add_node(a.shape(), std::move(out), req);
    if (req) {
        int aid = a.id(), bid = b.id();
        g->node(id).backprop = [g, id, aid, bid]() {
            const auto& gr = g->node(id).grad;
            auto& an = g->node(aid);
            auto& bn = g->node(bid);
            if (an.requires_grad)
                for (size_t i = 0; i < gr.size(); ++i) an.grad[i] += gr[i] * bn.value[i];
            if (bn.requires_grad)
                for (size_t i = 0; i < gr.size(); ++i) bn.grad[i] += gr[i] * an.value[i];
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return unary_op(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) { return scale(x, T(-1)); }

/// 1 - x, elementwise.
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_op(
        x,
        [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                   : std::exp(v) / (T(1) + std::exp(v)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::tanh(v); },
                    [](T, T y) { return T(1) - y * y; });
}

/// Smooth GELU (tanh approximation).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kC = 0.7978845608028654; // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return unary_op(
        x,
        [](T v) {
            const T u = static_cast<T>(kC) * (v + static_cast<T>(kA) * v * v * v);
            return T(0.5) * v * (T(1) + std::tanh(u));
        },
        [](T v, T) {
            const T u = static_cast<T>(kC) * (v + static_cast<T>(kA) * v * v * v);
            const T th = std::tanh(u);
            const T du = static_cast<T>(kC) * (T(1) + T(3) * static_cast<T>(kA) * v * v);
            return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
        });
}

/// Matrix product a[p x q] * b[q x r].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>* g = detail::same_graph(a, b);
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const int p = a.shape()[0], q = a.shape()[1];
    const int q2 = b.shape()[0], r = b.shape()[1];
    if (q != q2)
        throw ShapeError(cat("matmul: inner dimensions disagree: ", shape_str(a.shape()),
                             " vs ", shape_str(b.shape())));
    std::vector<T> out(static_cast<size_t>(p) * r, T(0));
    kernels::mm_nn_acc(a.value().data(), b.value().data(), out.data(), p, q, r);
    bool req = a.requires_grad() || b.requires_grad();
    int id = g->add_node({p, r}, std::move(out), req);
    if (req) {
        int aid = a.id(), bid = b.id();
        g->node(id).backprop = [g, id, aid, bid, p, q, r]() {
            const auto& gr = g->node(id).grad;
            auto& an = g->node(aid);
            auto& bn = g->node(bid);
            if (an.requires_grad) // dA = G * B^T
                kernels::mm_nt_acc(gr.data(), bn.value.data(), an.grad.data(), p, r, q);
            if (bn.requires_grad) // dB = A^T * G
                kernels::mm_tn_acc(an.value.data(), gr.data(), bn.grad.data(), p, q, r);
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    detail::require_2d(x, "transpose");
    Graph<T>* g = x.graph();
    const int n = x.shape()[0], m = x.shape()[1];
    const auto& xv = x.value();
    std::vector<T> out(xv.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out[static_cast<size_t>(j) * n + i] = xv[static_cast<size_t>(i) * m + j];
    int id = g->add_node({m, n}, std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, n, m]() {
            const auto& gr = g->node(id).grad;
            auto& xg = g->node(xid).grad;
            for (int j = 0; j < m; ++j)
                for (int i = 0; i < n; ++i)
                    xg[static_cast<size_t>(i) * m + j] += gr[static_cast<size_t>(j) * n + i];
        };
    }
    return g->wrap(id);
}

/// a[n x d] + row vector b[d], broadcast over rows.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& b) {
    Graph<T>* g = detail::same_graph(a, b);
    detail::require_2d(a, "add_rowvec");
    const int n = a.shape()[0], d = a.shape()[1];
    if (b.numel() != static_cast<size_t>(d))
        throw ShapeError(cat("add_rowvec: row vector ", shape_str(b.shape()),
                             " does not match matrix ", shape_str(a.shape())));
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<T> out(av.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out[static_cast<size_t>(i) * d + j] = av[static_cast<size_t>(i) * d + j] + bv[static_cast<size_t>(j)];
    bool req = a.requires_grad() || b.requires_grad();
    int id = g->add_node(a.shape(), std::move(out), req);
    if (req) {
        int aid = a.id(), bid = b.id();
        g->node(id).backprop = [g, id, aid, bid, n, d]() {
            const auto& gr = g->node(id).grad;
            auto& an = g->node(aid);
            auto& bn = g->node(bid);
            if (an.requires_grad)
                for (size_t i = 0; i < gr.size(); ++i) an.grad[i] += gr[i];
            if (bn.requires_grad)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j)
                        bn.grad[static_cast<size_t>(j)] += gr[static_cast<size_t>(i) * d + j];
        };
    }
    return g->wrap(id);
}

/// x * s where s is a one-element tensor, broadcast everywhere.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s) {
    Graph<T>* g = detail::same_graph(x, s);
    if (s.numel() != 1)
        throw ShapeError(cat("mul_scalar: scale must be scalar, got ", shape_str(s.shape())));
    const T sv = s.value()[0];
    const auto& xv = x.value();
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
    bool req = x.requires_grad() || s.requires_grad();
    int id = g->add_node(x.shape(), std::move(out), req);
    if (req) {
        int xid = x.id(), sid = s.id();
        g->node(id).backprop = [g, id, xid, sid]() {
            const auto& gr = g->node(id).grad;
            auto& xn = g->node(xid);
            auto& sn = g->node(sid);
            const T sv2 = sn.value[0];
            if (xn.requires_grad)
                for (size_t i = 0; i < gr.size(); ++i) xn.grad[i] += gr[i] * sv2;
            if (sn.requires_grad) {
                T acc = T(0);
                for (size_t i = 0; i < gr.size(); ++i) acc += gr[i] * xn.value[i];
                sn.grad[0] += acc;
            }
        };
    }
    return g->wrap(id);
}

/// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    Graph<T>* g = x.graph();
    T acc = T(0);
    for (T v : x.value()) acc += v;
    int id = g->add_node({1}, {acc}, x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid]() {
            const T gr = g->node(id).grad[0];
            auto& xg = g->node(xid).grad;
            for (size_t i = 0; i < xg.size(); ++i) xg[i] += gr;
        };
    }
    return g->wrap(id);
}

/// Column means of a 2-d tensor: [n x d] -> [1 x d].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    detail::require_2d(x, "mean_rows");
    Graph<T>* g = x.graph();
    const int n = x.shape()[0], d = x.shape()[1];
    const auto& xv = x.value();
    std::vector<T> out(static_cast<size_t>(d), T(0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += xv[static_cast<size_t>(i) * d + j];
    const T inv = T(1) / static_cast<T>(n);
    for (auto& v : out) v *= inv;
    int id = g->add_node({1, d}, std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, n, d, inv]() {
            const auto& gr = g->node(id).grad;
            auto& xg = g->node(xid).grad;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    xg[static_cast<size_t>(i) * d + j] += gr[static_cast<size_t>(j)] * inv;
        };
    }
    return g->wrap(id);
}

/// Softmax along `axis`. Max-shifted for overflow safety; rejects non-finite
/// input.
template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& x, int axis) {
    Graph<T>* g = x.graph();
    const auto span = detail::axis_span(x.shape(), axis);
    const auto& xv = x.value();
    for (T v : xv)
        if (!std::isfinite(v))
            throw NumericError("softmax_axis: non-finite input");
    std::vector<T> out(xv.size());
    for (size_t o = 0; o < span.outer; ++o) {
        for (size_t in = 0; in < span.inner; ++in) {
            const size_t base = o * span.len * span.inner + in;
            T mx = xv[base];
            for (size_t l = 1; l < span.len; ++l)
                mx = std::max(mx, xv[base + l * span.inner]);
            T denom = T(0);
            for (size_t l = 0; l < span.len; ++l) {
                const T e = std::exp(xv[base + l * span.inner] - mx);
                out[base + l * span.inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (size_t l = 0; l < span.len; ++l) out[base + l * span.inner] *= inv;
        }
    }
    int id = g->add_node(x.shape(), std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, span]() {
            const auto& self = g->node(id);
            auto& xg = g->node(xid).grad;
            for (size_t o = 0; o < span.outer; ++o) {
                for (size_t in = 0; in < span.inner; ++in) {
                    const size_t base = o * span.len * span.inner + in;
                    T dot = T(0);
                    for (size_t l = 0; l < span.len; ++l) {
                        const size_t k = base + l * span.inner;
                        dot += self.grad[k] * self.value[k];
                    }
                    for (size_t l = 0; l < span.len; ++l) {
                        const size_t k = base + l * span.inner;
                        xg[k] += self.value[k] * (self.grad[k] - dot);
                    }
                }
            }
        };
    }
    return g->wrap(id);
}

/// Log-softmax along `axis` (max-shifted log-sum-exp).
template <typename T>
Tensor<T> log_softmax_axis(const Tensor<T>& x, int axis) {
    Graph<T>* g = x.graph();
    const auto span = detail::axis_span(x.shape(), axis);
    const auto& xv = x.value();
    for (T v : xv)
        if (!std::isfinite(v))
            throw NumericError("log_softmax_axis: non-finite input");
    std::vector<T> out(xv.size());
    for (size_t o = 0; o < span.outer; ++o) {
        for (size_t in = 0; in < span.inner; ++in) {
            const size_t base = o * span.len * span.inner + in;
            T mx = xv[base];
            for (size_t l = 1; l < span.len; ++l)
                mx = std::max(mx, xv[base + l * span.inner]);
            T denom = T(0);
            for (size_t l = 0; l < span.len; ++l)
                denom += std::exp(xv[base + l * span.inner] - mx);
            const T lse = mx + std::log(denom);
            for (size_t l = 0; l < span.len; ++l) {
                const size_t k = base + l * span.inner;
                out[k] = xv[k] - lse;
            }
        }
    }
    int id = g->add_node(x.shape(), std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, span]() {
            const auto& self = g->node(id);
            auto& xg = g->node(xid).grad;
            for (size_t o = 0; o < span.outer; ++o) {
                for (size_t in = 0; in < span.inner; ++in) {
                    const size_t base = o * span.len * span.inner + in;
                    T gsum = T(0);
                    for (size_t l = 0; l < span.len; ++l)
                        gsum += self.grad[base + l * span.inner];
                    for (size_t l = 0; l < span.len; ++l) {
                        const size_t k = base + l * span.inner;
                        xg[k] += self.grad[k] - std::exp(self.value[k]) * gsum;
                    }
                }
            }
        };
    }
    return g->wrap(id);
}

/// Row-wise layer normalization over the last dimension with affine
/// gamma/beta. Biased (population) variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    Graph<T>* g = x.graph();
    detail::same_graph(x, gamma);
    detail::same_graph(x, beta);
    if (x.shape().empty())
        throw ShapeError("layer_norm: scalar input");
    const int d = x.shape().back();
    if (gamma.numel() != static_cast<size_t>(d) || beta.numel() != static_cast<size_t>(d))
        throw ShapeError(cat("layer_norm: gamma/beta ", shape_str(gamma.shape()), "/",
                             shape_str(beta.shape()), " do not match last dim of ",
                             shape_str(x.shape())));
    if (eps < T(0))
        throw NumericError("layer_norm: eps must be >= 0");
    const auto& xv = x.value();
    const size_t rows = xv.size() / static_cast<size_t>(d);
    std::vector<T> out(xv.size());
    std::vector<T> inv_std(rows), means(rows);
    for (size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mean = T(0);
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        means[r] = mean;
        inv_std[r] = inv;
        for (int j = 0; j < d; ++j)
            out[r * d + j] = gamma.value()[static_cast<size_t>(j)] * (row[j] - mean) * inv +
                             beta.value()[static_cast<size_t>(j)];
    }
    bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    int id = g->add_node(x.shape(), std::move(out), req);
    if (req) {
        int xid = x.id(), gid = gamma.id(), bid = beta.id();
        g->node(id).backprop = [g, id, xid, gid, bid, d, rows,
                                means = std::move(means), inv_std = std::move(inv_std)]() {
            const auto& gr = g->node(id).grad;
            auto& xn = g->node(xid);
            auto& gn = g->node(gid);
            auto& bn = g->node(bid);
            std::vector<T> xhat(static_cast<size_t>(d)), dxhat(static_cast<size_t>(d));
            for (size_t r = 0; r < rows; ++r) {
                const T* grow = gr.data() + r * d;
                const T* xrow = xn.value.data() + r * d;
                const T inv = inv_std[r];
                for (int j = 0; j < d; ++j) {
                    xhat[static_cast<size_t>(j)] = (xrow[j] - means[r]) * inv;
                    dxhat[static_cast<size_t>(j)] = grow[j] * gn.value[static_cast<size_t>(j)];
                }
                if (gn.requires_grad)
                    for (int j = 0; j < d; ++j)
                        gn.grad[static_cast<size_t>(j)] += grow[j] * xhat[static_cast<size_t>(j)];
                if (bn.requires_grad)
                    for (int j = 0; j < d; ++j) bn.grad[static_cast<size_t>(j)] += grow[j];
                if (xn.requires_grad) {
                    T m_dx = T(0), m_dxx = T(0);
                    for (int j = 0; j < d; ++j) {
                        m_dx += dxhat[static_cast<size_t>(j)];
                        m_dxx += dxhat[static_cast<size_t>(j)] * xhat[static_cast<size_t>(j)];
                    }
                    m_dx /= static_cast<T>(d);
                    m_dxx /= static_cast<T>(d);
                    T* xg = xn.grad.data() + r * d;
                    for (int j = 0; j < d; ++j)
                        xg[j] += inv * (dxhat[static_cast<size_t>(j)] - m_dx -
                                        xhat[static_cast<size_t>(j)] * m_dxx);
                }
            }
        };
    }
    return g->wrap(id);
}

/// Rows scaled to unit L2 norm; the divisor is (norm + eps) so zero rows map
/// to zero without error.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-8)) {
    detail::require_2d(x, "l2_normalize_rows");
    Graph<T>* g = x.graph();
    const int n = x.shape()[0], d = x.shape()[1];
    const auto& xv = x.value();
    std::vector<T> out(xv.size());
    std::vector<T> norms(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* row = xv.data() + static_cast<size_t>(i) * d;
        T sq = T(0);
        for (int j = 0; j < d; ++j) sq += row[j] * row[j];
        const T nrm = std::sqrt(sq);
        norms[static_cast<size_t>(i)] = nrm;
        const T inv = T(1) / (nrm + eps);
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] = row[j] * inv;
    }
    int id = g->add_node(x.shape(), std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, n, d, eps, norms = std::move(norms)]() {
            const auto& gr = g->node(id).grad;
            auto& xn = g->node(xid);
            for (int i = 0; i < n; ++i) {
                const T nrm = norms[static_cast<size_t>(i)];
                const T s = nrm + eps;
                const T* grow = gr.data() + static_cast<size_t>(i) * d;
                const T* xrow = xn.value.data() + static_cast<size_t>(i) * d;
                T* xg = xn.grad.data() + static_cast<size_t>(i) * d;
                T dot = T(0);
                for (int j = 0; j < d; ++j) dot += grow[j] * xrow[j];
                const T c = nrm > T(0) ? dot / (nrm * s * s) : T(0);
                for (int j = 0; j < d; ++j) xg[j] += grow[j] / s - xrow[j] * c;
            }
        };
    }
    return g->wrap(id);
}

/// Column normalization A[i,k] / (sum_i A[i,k] + eps) -- the weighted-mean
/// step that keeps one slot from absorbing every token.
template <typename T>
Tensor<T> normalize_columns(const Tensor<T>& a, T eps) {
    detail::require_2d(a, "normalize_columns");
    Graph<T>* g = a.graph();
    const int n = a.shape()[0], k = a.shape()[1];
    const auto& av = a.value();
    std::vector<T> denom(static_cast<size_t>(k), eps);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) denom[static_cast<size_t>(j)] += av[static_cast<size_t>(i) * k + j];
    std::vector<T> out(av.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j)
            out[static_cast<size_t>(i) * k + j] = av[static_cast<size_t>(i) * k + j] / denom[static_cast<size_t>(j)];
    int id = g->add_node(a.shape(), std::move(out), a.requires_grad());
    if (a.requires_grad()) {
        int aid = a.id();
        g->node(id).backprop = [g, id, aid, n, k, denom = std::move(denom)]() {
            const auto& self = g->node(id);
            auto& an = g->node(aid);
            // d/dA[j,c] of A[i,c]/D_c = delta_ij/D_c - A[i,c]/D_c^2
            for (int c = 0; c < k; ++c) {
                T gdota = T(0);
                for (int i = 0; i < n; ++i)
                    gdota += self.grad[static_cast<size_t>(i) * k + c] *
                             an.value[static_cast<size_t>(i) * k + c];
                const T dc = denom[static_cast<size_t>(c)];
                const T corr = gdota / (dc * dc);
                for (int j = 0; j < n; ++j)
                    an.grad[static_cast<size_t>(j) * k + c] +=
                        self.grad[static_cast<size_t>(j) * k + c] / dc - corr;
            }
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    Graph<T>* g = x.graph();
    if (shape_numel(shape) != x.numel())
        throw ShapeError(cat("reshape: cannot view ", shape_str(x.shape()), " as ",
                             shape_str(shape)));
    int id = g->add_node(std::move(shape), x.value(), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid]() {
            const auto& gr = g->node(id).grad;
            auto& xg = g->node(xid).grad;
            for (size_t i = 0; i < gr.size(); ++i) xg[i] += gr[i];
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int r0, int r1) {
    detail::require_2d(x, "slice_rows");
    const int n = x.shape()[0], d = x.shape()[1];
    if (r0 < 0 || r1 > n || r0 >= r1)
        throw ShapeError(cat("slice_rows: range [", r0, ",", r1, ") invalid for ",
                             shape_str(x.shape())));
    Graph<T>* g = x.graph();
    std::vector<T> out(x.value().begin() + static_cast<size_t>(r0) * d,
                       x.value().begin() + static_cast<size_t>(r1) * d);
    int id = g->add_node({r1 - r0, d}, std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, r0, d]() {
            const auto& gr = g->node(id).grad;
            auto& xg = g->node(xid).grad;
            for (size_t i = 0; i < gr.size(); ++i) xg[static_cast<size_t>(r0) * d + i] += gr[i];
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
    detail::require_2d(x, "slice_cols");
    const int n = x.shape()[0], d = x.shape()[1];
    if (c0 < 0 || c1 > d || c0 >= c1)
        throw ShapeError(cat("slice_cols: range [", c0, ",", c1, ") invalid for ",
                             shape_str(x.shape())));
    Graph<T>* g = x.graph();
    const int w = c1 - c0;
    std::vector<T> out(static_cast<size_t>(n) * w);
    const auto& xv = x.value();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(i) * w + j] = xv[static_cast<size_t>(i) * d + c0 + j];
    int id = g->add_node({n, w}, std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, n, d, c0, w]() {
            const auto& gr = g->node(id).grad;
            auto& xg = g->node(xid).grad;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < w; ++j)
                    xg[static_cast<size_t>(i) * d + c0 + j] += gr[static_cast<size_t>(i) * w + j];
        };
    }
    return g->wrap(id);
}

/// Row gather: out[i, :] = x[idx[i], :]. Duplicate indices accumulate in the
/// backward scatter.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::vector<int> idx) {
    detail::require_2d(x, "take_rows");
    Graph<T>* g = x.graph();
    const int n = x.shape()[0], d = x.shape()[1];
    for (int i : idx)
        if (i < 0 || i >= n)
            throw ShapeError(cat("take_rows: index ", i, " out of range for ",
                                 shape_str(x.shape())));
    std::vector<T> out(idx.size() * static_cast<size_t>(d));
    const auto& xv = x.value();
    for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < d; ++j)
            out[r * d + j] = xv[static_cast<size_t>(idx[r]) * d + j];
    int id = g->add_node({static_cast<int>(idx.size()), d}, std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, d, idx = std::move(idx)]() {
            const auto& gr = g->node(id).grad;
            auto& xg = g->node(xid).grad;
            for (size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < d; ++j)
                    xg[static_cast<size_t>(idx[r]) * d + j] += gr[r * d + j];
        };
    }
    return g->wrap(id);
}

/// Flat-index gather into a 1-d tensor.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<size_t> idx) {
    Graph<T>* g = x.graph();
    for (size_t i : idx)
        if (i >= x.numel())
            throw ShapeError(cat("gather: flat index ", i, " out of range for ",
                                 shape_str(x.shape())));
    std::vector<T> out(idx.size());
    for (size_t r = 0; r < idx.size(); ++r) out[r] = x.value()[idx[r]];
    int id = g->add_node({static_cast<int>(idx.size())}, std::move(out), x.requires_grad());
    if (x.requires_grad()) {
        int xid = x.id();
        g->node(id).backprop = [g, id, xid, idx = std::move(idx)]() {
            const auto& gr = g->node(id).grad;
            auto& xg = g->node(xid).grad;
            for (size_t r = 0; r < idx.size(); ++r) xg[idx[r]] += gr[r];
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    Graph<T>* g = parts[0].graph();
    const int d = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
    if (d < 0) throw ShapeError("concat_rows: expected 2-d tensors");
    int total = 0;
    bool req = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.graph() != g) throw GraphError("concat_rows: mixed graphs");
        if (p.shape()[1] != d)
            throw ShapeError(cat("concat_rows: column mismatch ", shape_str(p.shape()),
                                 " vs [_,", d, "]"));
        total += p.shape()[0];
        req = req || p.requires_grad();
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(total) * d);
    std::vector<int> ids;
    std::vector<int> row_offsets;
    int off = 0;
    for (const auto& p : parts) {
        out.insert(out.end(), p.value().begin(), p.value().end());
        ids.push_back(p.id());
        row_offsets.push_back(off);
        off += p.shape()[0];
    }
    int id = g->add_node({total, d}, std::move(out), req);
    if (req) {
        g->node(id).backprop = [g, id, d, ids = std::move(ids),
                                row_offsets = std::move(row_offsets)]() {
            const auto& gr = g->node(id).grad;
            for (size_t pi = 0; pi < ids.size(); ++pi) {
                auto& pn = g->node(ids[pi]);
                if (!pn.requires_grad) continue;
                const size_t base = static_cast<size_t>(row_offsets[pi]) * d;
                for (size_t i = 0; i < pn.grad.size(); ++i) pn.grad[i] += gr[base + i];
            }
        };
    }
    return g->wrap(id);
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    Graph<T>* g = parts[0].graph();
    const int n = parts[0].shape().size() == 2 ? parts[0].shape()[0] : -1;
    if (n < 0) throw ShapeError("concat_cols: expected 2-d tensors");
    int total = 0;
    bool req = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.graph() != g) throw GraphError("concat_cols: mixed graphs");
        if (p.shape()[0] != n)
            throw ShapeError(cat("concat_cols: row mismatch ", shape_str(p.shape()),
                                 " vs [", n, ",_]"));
        total += p.shape()[1];
        req = req || p.requires_grad();
    }
    std::vector<T> out(static_cast<size_t>(n) * total);
    std::vector<int> ids, widths, col_offsets;
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.shape()[1];
        const auto& pv = p.value();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>(i) * total + off + j] = pv[static_cast<size_t>(i) * w + j];
        ids.push_back(p.id());
        widths.push_back(w);
        col_offsets.push_back(off);
        off += w;
    }
    int id = g->add_node({n, total}, std::move(out), req);
    if (req) {
        g->node(id).backprop = [g, id, n, total, ids = std::move(ids), widths = std::move(widths),
                                col_offsets = std::move(col_offsets)]() {
            const auto& gr = g->node(id).grad;
            for (size_t pi = 0; pi < ids.size(); ++pi) {
                auto& pn = g->node(ids[pi]);
                if (!pn.requires_grad) continue;
                const int w = widths[pi], c0 = col_offsets[pi];
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        pn.grad[static_cast<size_t>(i) * w + j] +=
                            gr[static_cast<size_t>(i) * total + c0 + j];
            }
        };
    }
    return g->wrap(id);
}

// ---------------------------------------------------------------------------
// GRU cell, composed from primitives so the reverse pass comes for free.

/// Gate weights for one GRU. Row-vector convention: gate = u*W + h*U + b.
template <typename T>
struct GruGates {
    Tensor<T> Wz, Uz, bz;
    Tensor<T> Wr, Ur, br;
    Tensor<T> Wh, Uh, bh;
};

/// GRU update for a batch of rows.
///   z = sigmoid(u Wz + h Uz + bz)
///   r = sigmoid(u Wr + h Ur + br)
///   h~ = tanh(u Wh + (r . h) Uh + bh)
///   h' = (1 - z) . h + z . h~
template <typename T>
Tensor<T> gru_cell(const Tensor<T>& h_prev, const Tensor<T>& u, const GruGates<T>& p) {
    detail::require_same_shape(h_prev, u, "gru_cell");
    auto z = sigmoid(add_rowvec(add(matmul(u, p.Wz), matmul(h_prev, p.Uz)), p.bz));
    auto r = sigmoid(add_rowvec(add(matmul(u, p.Wr), matmul(h_prev, p.Ur)), p.br));
    auto h_tilde = tanh(add_rowvec(add(matmul(u, p.Wh), matmul(mul(r, h_prev), p.Uh)), p.bh));
    return add(mul(one_minus(z), h_prev), mul(z, h_tilde));
}

/// Free-function spelling of Graph::backward.
template <typename T>
void backward(const Tensor<T>& loss) {
    loss.graph()->backward(loss);
}

} // namespace dico
