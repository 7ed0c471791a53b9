// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "dalg/param.hpp"
#include "dalg/tensor.hpp"

namespace dalg {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; invalidated when the graph dies.
class Value {
public:
    Value() = default;

    const Tensor& tensor() const;
    const Shape& shape() const;
    std::int64_t extent(std::int64_t axis) const;
    std::int64_t size() const;
    double scalar() const;  // requires a single-element tensor
    bool valid() const { return g_ != nullptr; }
    Graph* graph() const { return g_; }
    std::int32_t id() const { return id_; }

private:
    friend class Graph;
    Value(Graph* g, std::int32_t id) : g_(g), id_(id) {}
    Graph* g_ = nullptr;
    std::int32_t id_ = -1;
};

/// Append-only tape of operation nodes. Creation order is a topological order,
/// so reverse accumulation walks node ids backwards. One backward per graph.
class Graph {
public:
    using BackFn = std::function<void(Graph&, std::int32_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Value constant(Tensor t);
    Value scalar_const(double v);
    /// Leaf whose backward pass accumulates into p.grad.
    Value param(Parameter& p);

    /// Reverse accumulation from a scalar loss into every reachable
    /// Parameter.grad. Throws if called twice on the same graph.
    void backward(Value loss);

    std::size_t node_count() const { return nodes_.size(); }

    // --- machinery for op implementations ---
    Value make_node(const char* op, Tensor value, const std::vector<Value>& parents, BackFn back);
    const Tensor& value_of(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& grad_value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    /// Gradient buffer of a node, allocated on first use; nullptr when the
    /// node does not require gradients.
    Tensor* grad_of(std::int32_t id);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackFn back;
        Parameter* sink = nullptr;
        bool needs_grad = false;
        bool grad_alloc = false;
    };
    std::deque<Node> nodes_;  // deque: node references stay valid as the tape grows
    bool backward_done_ = false;
};

// ---- primitive operations -------------------------------------------------
// Shapes follow standard dense-array semantics; mismatches throw ShapeError
// naming both shapes. Every op checks its output for non-finite values.

Value add(Value a, Value b);  // same shape, or b rank-1 bias broadcast over the last axis
Value sub(Value a, Value b);
Value mul(Value a, Value b);  // elementwise, same shape
Value affine(Value x, double mul_k, double add_k);
inline Value scale(Value x, double k) { return affine(x, k, 0.0); }
Value matmul(Value a, Value b);  // rank-2 pair or rank-3 batched pair
Value reshape(Value x, Shape shape);
Value transpose(Value x, const std::vector<std::int64_t>& perm);
Value concat(const std::vector<Value>& xs, std::int64_t axis);
Value slice(Value x, std::int64_t axis, std::int64_t start, std::int64_t len);
Value sum(Value x, std::vector<std::int64_t> axes);
Value mean(Value x, std::vector<std::int64_t> axes);
Value relu(Value x);
Value gelu(Value x);
Value softplus(Value x);
Value exp(Value x);
Value log(Value x);
Value sqrt(Value x);
Value reciprocal(Value x);
Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);
Value softmax(Value x, std::int64_t axis);
/// Softmax over the last axis of (G, N, M) scores where only entries with
/// mask != 0 participate; masked entries come out exactly zero. The mask has
/// shape (W, N, M) and row g of the scores uses mask slab (g / heads) % W.
Value softmax_masked(Value scores, Tensor mask, std::int64_t heads);
Value l2_normalize(Value x, std::int64_t axis);
/// Forward identity; contributes exactly zero gradient to ancestors of x.
Value stop_gradient(Value x);
Value rowwise_scale(Value x, Value s);  // x: (R, C), s: (R)
Value rowwise_shift(Value x, Value s);  // x: (R, C), s: (R)
Value cyclic_shift(Value fmap, std::int64_t dy, std::int64_t dx);  // B,H,W,C toroidal roll
Value space_to_depth(Value fmap, std::int64_t block);              // B,H,W,C -> B,H/b,W/b,b*b*C

}  // namespace dalg
