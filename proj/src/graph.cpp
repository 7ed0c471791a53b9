// SPDX-License-Identifier: Apache-2.0

#include "dalg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace dalg {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// c(M,N) += a(M,K) * b(K,N)
void mm_nn(const double* a, const double* b, double* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t m = 0; m < M; ++m) {
        const double* arow = a + m * K;
        double* crow = c + m * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const double amk = arow[k];
            if (amk == 0.0) continue;
            const double* brow = b + k * N;
            for (std::int64_t n = 0; n < N; ++n) crow[n] += amk * brow[n];
        }
    }
}

// c(M,K) += a(M,N) * b(K,N)^T
void mm_nt(const double* a, const double* b, double* c, std::int64_t M, std::int64_t N, std::int64_t K) {
    for (std::int64_t m = 0; m < M; ++m) {
        const double* arow = a + m * N;
        double* crow = c + m * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const double* brow = b + k * N;
            double s = 0.0;
            for (std::int64_t n = 0; n < N; ++n) s += arow[n] * brow[n];
            crow[k] += s;
        }
    }
}

// c(K,N) += a(M,K)^T * b(M,N)
void mm_tn(const double* a, const double* b, double* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t m = 0; m < M; ++m) {
        const double* arow = a + m * K;
        const double* brow = b + m * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const double amk = arow[k];
            if (amk == 0.0) continue;
            double* crow = c + k * N;
            for (std::int64_t n = 0; n < N; ++n) crow[n] += amk * brow[n];
        }
    }
}

std::int64_t prod_range(const Shape& s, std::size_t lo, std::size_t hi) {
    std::int64_t p = 1;
    for (std::size_t i = lo; i < hi; ++i) p *= s[i];
    return p;
}

std::int64_t normalize_axis(std::int64_t axis, std::int64_t rank, const char* op) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    }
    return axis;
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---- Value ------------------------------------------------------------------

const Tensor& Value::tensor() const { return g_->value_of(id_); }
const Shape& Value::shape() const { return tensor().shape(); }
std::int64_t Value::extent(std::int64_t axis) const { return tensor().extent(axis); }
std::int64_t Value::size() const { return tensor().size(); }

double Value::scalar() const {
    const Tensor& t = tensor();
    if (t.size() != 1) throw ShapeError("scalar(): tensor has shape " + shape_str(t.shape()));
    return t[0];
}

// ---- Graph ------------------------------------------------------------------

Value Graph::constant(Tensor t) {
    check_finite(t, "constant");
    Node n;
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Value Graph::scalar_const(double v) { return constant(Tensor::scalar(v)); }

Value Graph::param(Parameter& p) {
    check_finite(p.value, "param");
    Node n;
    n.value = p.value;
    n.sink = &p;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Value Graph::make_node(const char* op, Tensor value, const std::vector<Value>& parents, BackFn back) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    for (const Value& p : parents) {
        if (p.graph() != this) throw Error(std::string(op) + ": mixing values from different graphs");
        if (nodes_[static_cast<std::size_t>(p.id())].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Tensor* Graph::grad_of(std::int32_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return nullptr;
    if (!n.grad_alloc) {
        n.grad = Tensor(n.value.shape());
        n.grad_alloc = true;
    }
    return &n.grad;
}

void Graph::backward(Value loss) {
    if (loss.graph() != this) throw Error("backward: loss belongs to a different graph");
    if (backward_done_) throw Error("backward already run once on this graph");
    backward_done_ = true;
    const Node& ln = nodes_[static_cast<std::size_t>(loss.id())];
    if (ln.value.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(ln.value.shape()));
    }
    if (!ln.needs_grad) return;  // loss is constant w.r.t. every parameter
    (*grad_of(loss.id()))[0] = 1.0;
    for (std::int32_t id = loss.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_alloc) continue;
        if (n.sink) {
            Tensor& g = n.sink->grad;
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (n.back) n.back(*this, id);
    }
}

// ---- helpers for op bodies ----------------------------------------------------

namespace {

const Tensor& val(Graph& g, std::int32_t id) { return g.value_of(id); }

}  // namespace

// ---- elementwise ---------------------------------------------------------------

Value add(Value a, Value b) {
    Graph& g = *a.graph();
    const Tensor& ta = a.tensor();
    const Tensor& tb = b.tensor();
    if (ta.same_shape(tb)) {
        Tensor out(ta.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
        const auto ia = a.id(), ib = b.id();
        return g.make_node("add", std::move(out), {a, b}, [ia, ib](Graph& gg, std::int32_t self) {
            const Tensor& dy = gg.grad_value(self);
            if (Tensor* ga = gg.grad_of(ia)) {
                for (std::int64_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i];
            }
            if (Tensor* gb = gg.grad_of(ib)) {
                for (std::int64_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i];
            }
        });
    }
    // bias broadcast: b is rank-1 matching a's last extent
    if (tb.rank() == 1 && ta.rank() >= 1 && ta.extent(-1) == tb.extent(0)) {
        const std::int64_t C = tb.extent(0);
        const std::int64_t rows = ta.size() / C;
        Tensor out(ta.shape());
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t c = 0; c < C; ++c) out[r * C + c] = ta[r * C + c] + tb[c];
        }
        const auto ia = a.id(), ib = b.id();
        return g.make_node("add(bias)", std::move(out), {a, b}, [ia, ib, rows, C](Graph& gg, std::int32_t self) {
            const Tensor& dy = gg.grad_value(self);
            if (Tensor* ga = gg.grad_of(ia)) {
                for (std::int64_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i];
            }
            if (Tensor* gb = gg.grad_of(ib)) {
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t c = 0; c < C; ++c) (*gb)[c] += dy[r * C + c];
                }
            }
        });
    }
    throw ShapeError("add: incompatible shapes " + shape_str(ta.shape()) + " and " + shape_str(tb.shape()));
}

Value sub(Value a, Value b) {
    const Tensor& ta = a.tensor();
    const Tensor& tb = b.tensor();
    if (!ta.same_shape(tb)) {
        throw ShapeError("sub: incompatible shapes " + shape_str(ta.shape()) + " and " + shape_str(tb.shape()));
    }
    Graph& g = *a.graph();
    Tensor out(ta.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
    const auto ia = a.id(), ib = b.id();
    return g.make_node("sub", std::move(out), {a, b}, [ia, ib](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        if (Tensor* ga = gg.grad_of(ia)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i];
        }
        if (Tensor* gb = gg.grad_of(ib)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*gb)[i] -= dy[i];
        }
    });
}

Value mul(Value a, Value b) {
    const Tensor& ta = a.tensor();
    const Tensor& tb = b.tensor();
    if (!ta.same_shape(tb)) {
        throw ShapeError("mul: incompatible shapes " + shape_str(ta.shape()) + " and " + shape_str(tb.shape()));
    }
    Graph& g = *a.graph();
    Tensor out(ta.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
    const auto ia = a.id(), ib = b.id();
    return g.make_node("mul", std::move(out), {a, b}, [ia, ib](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        const Tensor& va = val(gg, ia);
        const Tensor& vb = val(gg, ib);
        if (Tensor* ga = gg.grad_of(ia)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i] * vb[i];
        }
        if (Tensor* gb = gg.grad_of(ib)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i] * va[i];
        }
    });
}

Value affine(Value x, double mul_k, double add_k) {
    Graph& g = *x.graph();
    const Tensor& tx = x.tensor();
    Tensor out(tx.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = mul_k * tx[i] + add_k;
    const auto ix = x.id();
    return g.make_node("affine", std::move(out), {x}, [ix, mul_k](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*gx)[i] += mul_k * dy[i];
        }
    });
}

// ---- matmul --------------------------------------------------------------------

Value matmul(Value a, Value b) {
    const Tensor& ta = a.tensor();
    const Tensor& tb = b.tensor();
    const bool two = ta.rank() == 2 && tb.rank() == 2;
    const bool batched = ta.rank() == 3 && tb.rank() == 3 && ta.extent(0) == tb.extent(0);
    if (!two && !batched) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(ta.shape()) + " and " +
                         shape_str(tb.shape()));
    }
    const std::int64_t B = two ? 1 : ta.extent(0);
    const std::int64_t M = ta.extent(-2), K = ta.extent(-1);
    const std::int64_t K2 = tb.extent(-2), N = tb.extent(-1);
    if (K != K2) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(ta.shape()) + " vs " +
                         shape_str(tb.shape()));
    }
    Shape out_shape = two ? Shape{M, N} : Shape{B, M, N};
    Tensor out(out_shape);
    for (std::int64_t i = 0; i < B; ++i) {
        mm_nn(ta.data() + i * M * K, tb.data() + i * K * N, out.data() + i * M * N, M, K, N);
    }
    Graph& g = *a.graph();
    const auto ia = a.id(), ib = b.id();
    return g.make_node("matmul", std::move(out), {a, b}, [=](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        const Tensor& va = val(gg, ia);
        const Tensor& vb = val(gg, ib);
        if (Tensor* ga = gg.grad_of(ia)) {
            for (std::int64_t i = 0; i < B; ++i) {
                mm_nt(dy.data() + i * M * N, vb.data() + i * K * N, ga->data() + i * M * K, M, N, K);
            }
        }
        if (Tensor* gb = gg.grad_of(ib)) {
            for (std::int64_t i = 0; i < B; ++i) {
                mm_tn(va.data() + i * M * K, dy.data() + i * M * N, gb->data() + i * K * N, M, K, N);
            }
        }
    });
}

// ---- structural ----------------------------------------------------------------

Value reshape(Value x, Shape shape) {
    const Tensor& tx = x.tensor();
    if (shape_numel(shape) != tx.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(tx.shape()) + " as " + shape_str(shape));
    }
    Graph& g = *x.graph();
    Tensor out(std::move(shape), tx.vec());
    const auto ix = x.id();
    return g.make_node("reshape", std::move(out), {x}, [ix](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
        }
    });
}

namespace {

// Odometer walk over out_shape; in_stride[i] is the input stride of output axis i.
template <typename F>
void transposed_walk(const Shape& out_shape, const std::vector<std::int64_t>& in_stride, F&& f) {
    const std::int64_t rank = static_cast<std::int64_t>(out_shape.size());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    const std::int64_t total = shape_numel(out_shape);
    std::int64_t in_flat = 0;
    for (std::int64_t out_flat = 0; out_flat < total; ++out_flat) {
        f(out_flat, in_flat);
        for (std::int64_t ax = rank - 1; ax >= 0; --ax) {
            idx[static_cast<std::size_t>(ax)]++;
            in_flat += in_stride[static_cast<std::size_t>(ax)];
            if (idx[static_cast<std::size_t>(ax)] < out_shape[static_cast<std::size_t>(ax)]) break;
            in_flat -= in_stride[static_cast<std::size_t>(ax)] * out_shape[static_cast<std::size_t>(ax)];
            idx[static_cast<std::size_t>(ax)] = 0;
        }
    }
}

}  // namespace

Value transpose(Value x, const std::vector<std::int64_t>& perm) {
    const Tensor& tx = x.tensor();
    const auto rank = static_cast<std::size_t>(tx.rank());
    if (perm.size() != rank) {
        throw ShapeError("transpose: permutation size " + std::to_string(perm.size()) + " vs rank " +
                         std::to_string(rank));
    }
    std::vector<bool> seen(rank, false);
    for (auto p : perm) {
        if (p < 0 || p >= static_cast<std::int64_t>(rank) || seen[static_cast<std::size_t>(p)]) {
            throw ShapeError("transpose: invalid permutation");
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    std::vector<std::int64_t> in_strides(rank, 1);
    for (std::int64_t i = static_cast<std::int64_t>(rank) - 2; i >= 0; --i) {
        in_strides[static_cast<std::size_t>(i)] =
            in_strides[static_cast<std::size_t>(i + 1)] * tx.extent(i + 1);
    }
    Shape out_shape(rank);
    std::vector<std::int64_t> stride_for_out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = tx.extent(perm[i]);
        stride_for_out[i] = in_strides[static_cast<std::size_t>(perm[i])];
    }
    Tensor out(out_shape);
    transposed_walk(out_shape, stride_for_out,
                    [&](std::int64_t o, std::int64_t i) { out[o] = tx[i]; });
    Graph& g = *x.graph();
    const auto ix = x.id();
    return g.make_node("transpose", std::move(out), {x},
                       [ix, out_shape, stride_for_out](Graph& gg, std::int32_t self) {
                           const Tensor& dy = gg.grad_value(self);
                           if (Tensor* gx = gg.grad_of(ix)) {
                               transposed_walk(out_shape, stride_for_out,
                                               [&](std::int64_t o, std::int64_t i) { (*gx)[i] += dy[o]; });
                           }
                       });
}

Value concat(const std::vector<Value>& xs, std::int64_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    Graph& g = *xs[0].graph();
    const Shape& s0 = xs[0].shape();
    const std::int64_t rank = static_cast<std::int64_t>(s0.size());
    axis = normalize_axis(axis, rank, "concat");
    std::int64_t axis_total = 0;
    for (const Value& x : xs) {
        const Shape& s = x.shape();
        if (static_cast<std::int64_t>(s.size()) != rank) {
            throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        }
        for (std::int64_t i = 0; i < rank; ++i) {
            if (i != axis && s[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)]) {
                throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
            }
        }
        axis_total += s[static_cast<std::size_t>(axis)];
    }
    Shape out_shape = s0;
    out_shape[static_cast<std::size_t>(axis)] = axis_total;
    const std::int64_t outer = prod_range(out_shape, 0, static_cast<std::size_t>(axis));
    const std::int64_t inner = prod_range(out_shape, static_cast<std::size_t>(axis) + 1, out_shape.size());
    Tensor out(out_shape);
    std::vector<std::int64_t> offsets;  // start of each input along axis
    {
        std::int64_t off = 0;
        for (const Value& x : xs) {
            offsets.push_back(off);
            const std::int64_t len = x.extent(axis);
            const Tensor& tx = x.tensor();
            for (std::int64_t o = 0; o < outer; ++o) {
                std::memcpy(out.data() + (o * axis_total + off) * inner, tx.data() + o * len * inner,
                            static_cast<std::size_t>(len * inner) * sizeof(double));
            }
            off += len;
        }
    }
    std::vector<std::int32_t> ids;
    std::vector<std::int64_t> lens;
    for (const Value& x : xs) {
        ids.push_back(x.id());
        lens.push_back(x.extent(axis));
    }
    return g.make_node("concat", std::move(out), xs,
                       [ids, lens, offsets, outer, inner, axis_total](Graph& gg, std::int32_t self) {
                           const Tensor& dy = gg.grad_value(self);
                           for (std::size_t j = 0; j < ids.size(); ++j) {
                               Tensor* gx = gg.grad_of(ids[j]);
                               if (!gx) continue;
                               const std::int64_t len = lens[j], off = offsets[j];
                               for (std::int64_t o = 0; o < outer; ++o) {
                                   const double* src = dy.data() + (o * axis_total + off) * inner;
                                   double* dst = gx->data() + o * len * inner;
                                   for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                               }
                           }
                       });
}

Value slice(Value x, std::int64_t axis, std::int64_t start, std::int64_t len) {
    const Tensor& tx = x.tensor();
    axis = normalize_axis(axis, tx.rank(), "slice");
    const std::int64_t L = tx.extent(axis);
    if (start < 0 || len <= 0 || start + len > L) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") invalid for extent " + std::to_string(L));
    }
    Shape out_shape = tx.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    const std::int64_t outer = prod_range(tx.shape(), 0, static_cast<std::size_t>(axis));
    const std::int64_t inner = prod_range(tx.shape(), static_cast<std::size_t>(axis) + 1, tx.shape().size());
    Tensor out(out_shape);
    for (std::int64_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * len * inner, tx.data() + (o * L + start) * inner,
                    static_cast<std::size_t>(len * inner) * sizeof(double));
    }
    Graph& g = *x.graph();
    const auto ix = x.id();
    return g.make_node("slice", std::move(out), {x},
                       [ix, outer, inner, L, start, len](Graph& gg, std::int32_t self) {
                           const Tensor& dy = gg.grad_value(self);
                           if (Tensor* gx = gg.grad_of(ix)) {
                               for (std::int64_t o = 0; o < outer; ++o) {
                                   const double* src = dy.data() + o * len * inner;
                                   double* dst = gx->data() + (o * L + start) * inner;
                                   for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                               }
                           }
                       });
}

// ---- reductions ----------------------------------------------------------------

namespace {

struct ReducePlan {
    Shape out_shape;                       // reduced axes removed ({1} if all reduced)
    std::vector<std::int64_t> out_stride;  // per input axis; 0 for reduced axes
    Shape in_shape;
    std::int64_t count = 1;  // number of input elements folded into one output
};

ReducePlan make_reduce_plan(const Tensor& tx, std::vector<std::int64_t> axes, const char* op) {
    const std::int64_t rank = tx.rank();
    std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
    for (auto& a : axes) {
        a = normalize_axis(a, rank, op);
        if (reduced[static_cast<std::size_t>(a)]) throw ShapeError(std::string(op) + ": duplicate axis");
        reduced[static_cast<std::size_t>(a)] = true;
    }
    ReducePlan plan;
    plan.in_shape = tx.shape();
    for (std::int64_t i = 0; i < rank; ++i) {
        if (reduced[static_cast<std::size_t>(i)]) {
            plan.count *= tx.extent(i);
        } else {
            plan.out_shape.push_back(tx.extent(i));
        }
    }
    if (plan.out_shape.empty()) plan.out_shape = {1};
    std::vector<std::int64_t> strides(static_cast<std::size_t>(rank), 0);
    std::int64_t running = 1;
    for (std::int64_t i = rank - 1; i >= 0; --i) {
        if (!reduced[static_cast<std::size_t>(i)]) {
            strides[static_cast<std::size_t>(i)] = running;
            running *= tx.extent(i);
        }
    }
    plan.out_stride = strides;
    return plan;
}

template <typename F>
void reduce_walk(const Shape& in_shape, const std::vector<std::int64_t>& out_stride, F&& f) {
    const std::int64_t rank = static_cast<std::int64_t>(in_shape.size());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    const std::int64_t total = shape_numel(in_shape);
    std::int64_t out_flat = 0;
    for (std::int64_t in_flat = 0; in_flat < total; ++in_flat) {
        f(in_flat, out_flat);
        for (std::int64_t ax = rank - 1; ax >= 0; --ax) {
            idx[static_cast<std::size_t>(ax)]++;
            out_flat += out_stride[static_cast<std::size_t>(ax)];
            if (idx[static_cast<std::size_t>(ax)] < in_shape[static_cast<std::size_t>(ax)]) break;
            out_flat -= out_stride[static_cast<std::size_t>(ax)] * in_shape[static_cast<std::size_t>(ax)];
            idx[static_cast<std::size_t>(ax)] = 0;
        }
    }
}

Value reduce_impl(Value x, std::vector<std::int64_t> axes, bool take_mean, const char* op) {
    const Tensor& tx = x.tensor();
    ReducePlan plan = make_reduce_plan(tx, std::move(axes), op);
    Tensor out(plan.out_shape);
    reduce_walk(plan.in_shape, plan.out_stride,
                [&](std::int64_t i, std::int64_t o) { out[o] += tx[i]; });
    const double inv = take_mean ? 1.0 / static_cast<double>(plan.count) : 1.0;
    if (take_mean) {
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= inv;
    }
    Graph& g = *x.graph();
    const auto ix = x.id();
    return g.make_node(op, std::move(out), {x}, [ix, plan, inv](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        if (Tensor* gx = gg.grad_of(ix)) {
            reduce_walk(plan.in_shape, plan.out_stride,
                        [&](std::int64_t i, std::int64_t o) { (*gx)[i] += dy[o] * inv; });
        }
    });
}

}  // namespace

Value sum(Value x, std::vector<std::int64_t> axes) { return reduce_impl(x, std::move(axes), false, "sum"); }
Value mean(Value x, std::vector<std::int64_t> axes) { return reduce_impl(x, std::move(axes), true, "mean"); }

// ---- elementwise nonlinearities --------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Value unary_op(Value x, const char* op, Fwd&& fwd, Bwd&& bwd) {
    // bwd(x_value, y_value) -> dy/dx
    Graph& g = *x.graph();
    const Tensor& tx = x.tensor();
    Tensor out(tx.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = fwd(tx[i]);
    const auto ix = x.id();
    return g.make_node(op, std::move(out), {x}, [ix, bwd](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        const Tensor& vx = val(gg, ix);
        const Tensor& vy = gg.value_of(self);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * bwd(vx[i], vy[i]);
        }
    });
}

}  // namespace

Value relu(Value x) {
    return unary_op(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Value gelu(Value x) {
    return unary_op(
        x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
        [](double v, double) {
            return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
        });
}

Value softplus(Value x) {
    return unary_op(
        x, "softplus",
        [](double v) { return (v > 0.0 ? v : 0.0) + std::log1p(std::exp(-std::abs(v))); },
        [](double v, double) { return sigmoid(v); });
}

Value exp(Value x) {
    return unary_op(
        x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Value log(Value x) {
    return unary_op(
        x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Value sqrt(Value x) {
    return unary_op(
        x, "sqrt", [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / y; });
}

Value reciprocal(Value x) {
    return unary_op(
        x, "reciprocal", [](double v) { return 1.0 / v; },
        [](double, double y) { return -y * y; });
}

// ---- normalization --------------------------------------------------------------

Value layer_norm(Value x, Value gain, Value bias, double eps) {
    const Tensor& tx = x.tensor();
    const Tensor& tg = gain.tensor();
    const Tensor& tb = bias.tensor();
    const std::int64_t C = tx.extent(-1);
    if (tg.rank() != 1 || tb.rank() != 1 || tg.extent(0) != C || tb.extent(0) != C) {
        throw ShapeError("layer_norm: gain/bias " + shape_str(tg.shape()) + "/" + shape_str(tb.shape()) +
                         " incompatible with " + shape_str(tx.shape()));
    }
    const std::int64_t rows = tx.size() / C;
    Tensor out(tx.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = tx.data() + r * C;
        double* yr = out.data() + r * C;
        double m = 0.0;
        for (std::int64_t c = 0; c < C; ++c) m += xr[c];
        m /= static_cast<double>(C);
        double var = 0.0;
        for (std::int64_t c = 0; c < C; ++c) var += (xr[c] - m) * (xr[c] - m);
        var /= static_cast<double>(C);
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (std::int64_t c = 0; c < C; ++c) yr[c] = (xr[c] - m) * rstd * tg[c] + tb[c];
    }
    Graph& g = *x.graph();
    const auto ix = x.id(), ig = gain.id(), ib = bias.id();
    return g.make_node("layer_norm", std::move(out), {x, gain, bias},
                       [ix, ig, ib, rows, C, eps](Graph& gg, std::int32_t self) {
                           const Tensor& dy = gg.grad_value(self);
                           const Tensor& vx = val(gg, ix);
                           const Tensor& vg = val(gg, ig);
                           Tensor* gx = gg.grad_of(ix);
                           Tensor* ggain = gg.grad_of(ig);
                           Tensor* gbias = gg.grad_of(ib);
                           std::vector<double> xhat(static_cast<std::size_t>(C));
                           for (std::int64_t r = 0; r < rows; ++r) {
                               const double* xr = vx.data() + r * C;
                               const double* dyr = dy.data() + r * C;
                               double m = 0.0;
                               for (std::int64_t c = 0; c < C; ++c) m += xr[c];
                               m /= static_cast<double>(C);
                               double var = 0.0;
                               for (std::int64_t c = 0; c < C; ++c) var += (xr[c] - m) * (xr[c] - m);
                               var /= static_cast<double>(C);
                               const double rstd = 1.0 / std::sqrt(var + eps);
                               for (std::int64_t c = 0; c < C; ++c) xhat[static_cast<std::size_t>(c)] = (xr[c] - m) * rstd;
                               if (gbias) {
                                   for (std::int64_t c = 0; c < C; ++c) (*gbias)[c] += dyr[c];
                               }
                               if (ggain) {
                                   for (std::int64_t c = 0; c < C; ++c) (*ggain)[c] += dyr[c] * xhat[static_cast<std::size_t>(c)];
                               }
                               if (gx) {
                                   double mean_gdy = 0.0, mean_gdy_xhat = 0.0;
                                   for (std::int64_t c = 0; c < C; ++c) {
                                       const double gdy = vg[c] * dyr[c];
                                       mean_gdy += gdy;
                                       mean_gdy_xhat += gdy * xhat[static_cast<std::size_t>(c)];
                                   }
                                   mean_gdy /= static_cast<double>(C);
                                   mean_gdy_xhat /= static_cast<double>(C);
                                   double* gxr = gx->data() + r * C;
                                   for (std::int64_t c = 0; c < C; ++c) {
                                       const double gdy = vg[c] * dyr[c];
                                       gxr[c] += (gdy - mean_gdy - xhat[static_cast<std::size_t>(c)] * mean_gdy_xhat) * rstd;
                                   }
                               }
                           }
                       });
}

namespace {

struct AxisLines {
    std::int64_t outer, len, inner;
};

AxisLines axis_lines(const Tensor& t, std::int64_t axis) {
    AxisLines a;
    a.outer = prod_range(t.shape(), 0, static_cast<std::size_t>(axis));
    a.len = t.extent(axis);
    a.inner = prod_range(t.shape(), static_cast<std::size_t>(axis) + 1, t.shape().size());
    return a;
}

}  // namespace

Value softmax(Value x, std::int64_t axis) {
    const Tensor& tx = x.tensor();
    axis = normalize_axis(axis, tx.rank(), "softmax");
    const AxisLines L = axis_lines(tx, axis);
    Tensor out(tx.shape());
    for (std::int64_t o = 0; o < L.outer; ++o) {
        for (std::int64_t i = 0; i < L.inner; ++i) {
            const std::int64_t base = o * L.len * L.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t k = 0; k < L.len; ++k) mx = std::max(mx, tx[base + k * L.inner]);
            double s = 0.0;
            for (std::int64_t k = 0; k < L.len; ++k) {
                const double e = std::exp(tx[base + k * L.inner] - mx);
                out[base + k * L.inner] = e;
                s += e;
            }
            const double inv = 1.0 / s;
            for (std::int64_t k = 0; k < L.len; ++k) out[base + k * L.inner] *= inv;
        }
    }
    Graph& g = *x.graph();
    const auto ix = x.id();
    return g.make_node("softmax", std::move(out), {x}, [ix, L](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        const Tensor& y = gg.value_of(self);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t o = 0; o < L.outer; ++o) {
                for (std::int64_t i = 0; i < L.inner; ++i) {
                    const std::int64_t base = o * L.len * L.inner + i;
                    double dot = 0.0;
                    for (std::int64_t k = 0; k < L.len; ++k) dot += dy[base + k * L.inner] * y[base + k * L.inner];
                    for (std::int64_t k = 0; k < L.len; ++k) {
                        (*gx)[base + k * L.inner] += (dy[base + k * L.inner] - dot) * y[base + k * L.inner];
                    }
                }
            }
        }
    });
}

Value softmax_masked(Value scores, Tensor mask, std::int64_t heads) {
    const Tensor& tx = scores.tensor();
    if (tx.rank() != 3 || mask.rank() != 3) {
        throw ShapeError("softmax_masked: scores " + shape_str(tx.shape()) + ", mask " +
                         shape_str(mask.shape()));
    }
    const std::int64_t G = tx.extent(0), N = tx.extent(1), M = tx.extent(2);
    const std::int64_t W = mask.extent(0);
    if (mask.extent(1) != N || mask.extent(2) != M || G % (heads * W) != 0) {
        throw ShapeError("softmax_masked: mask " + shape_str(mask.shape()) + " incompatible with scores " +
                         shape_str(tx.shape()));
    }
    Tensor out(tx.shape());
    for (std::int64_t p = 0; p < G; ++p) {
        const std::int64_t w = (p / heads) % W;
        const double* mrow0 = mask.data() + w * N * M;
        for (std::int64_t r = 0; r < N; ++r) {
            const double* xr = tx.data() + (p * N + r) * M;
            const double* mr = mrow0 + r * M;
            double* yr = out.data() + (p * N + r) * M;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t c = 0; c < M; ++c) {
                if (mr[c] != 0.0) mx = std::max(mx, xr[c]);
            }
            if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row: all zeros
            double s = 0.0;
            for (std::int64_t c = 0; c < M; ++c) {
                if (mr[c] != 0.0) {
                    yr[c] = std::exp(xr[c] - mx);
                    s += yr[c];
                }
            }
            const double inv = 1.0 / s;
            for (std::int64_t c = 0; c < M; ++c) yr[c] *= inv;
        }
    }
    Graph& g = *scores.graph();
    const auto ix = scores.id();
    return g.make_node("softmax_masked", std::move(out), {scores}, [ix, G, N, M](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        const Tensor& y = gg.value_of(self);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t row = 0; row < G * N; ++row) {
                const double* dyr = dy.data() + row * M;
                const double* yr = y.data() + row * M;
                double* gxr = gx->data() + row * M;
                double dot = 0.0;
                for (std::int64_t c = 0; c < M; ++c) dot += dyr[c] * yr[c];
                for (std::int64_t c = 0; c < M; ++c) gxr[c] += (dyr[c] - dot) * yr[c];
            }
        }
    });
}

Value l2_normalize(Value x, std::int64_t axis) {
    const Tensor& tx = x.tensor();
    axis = normalize_axis(axis, tx.rank(), "l2_normalize");
    const AxisLines L = axis_lines(tx, axis);
    Tensor out(tx.shape());
    for (std::int64_t o = 0; o < L.outer; ++o) {
        for (std::int64_t i = 0; i < L.inner; ++i) {
            const std::int64_t base = o * L.len * L.inner + i;
            double n2 = 0.0;
            for (std::int64_t k = 0; k < L.len; ++k) {
                const double v = tx[base + k * L.inner];
                n2 += v * v;
            }
            if (n2 == 0.0) throw NumericError("l2_normalize: zero-norm input line");
            const double inv = 1.0 / std::sqrt(n2);
            for (std::int64_t k = 0; k < L.len; ++k) out[base + k * L.inner] = tx[base + k * L.inner] * inv;
        }
    }
    Graph& g = *x.graph();
    const auto ix = x.id();
    return g.make_node("l2_normalize", std::move(out), {x}, [ix, L](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        const Tensor& y = gg.value_of(self);
        const Tensor& vx = val(gg, ix);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t o = 0; o < L.outer; ++o) {
                for (std::int64_t i = 0; i < L.inner; ++i) {
                    const std::int64_t base = o * L.len * L.inner + i;
                    double n2 = 0.0, dot = 0.0;
                    for (std::int64_t k = 0; k < L.len; ++k) {
                        const double v = vx[base + k * L.inner];
                        n2 += v * v;
                        dot += dy[base + k * L.inner] * y[base + k * L.inner];
                    }
                    const double inv = 1.0 / std::sqrt(n2);
                    for (std::int64_t k = 0; k < L.len; ++k) {
                        (*gx)[base + k * L.inner] +=
                            (dy[base + k * L.inner] - dot * y[base + k * L.inner]) * inv;
                    }
                }
            }
        }
    });
}

Value stop_gradient(Value x) { return x.graph()->constant(x.tensor()); }

Value rowwise_scale(Value x, Value s) {
    const Tensor& tx = x.tensor();
    const Tensor& ts = s.tensor();
    if (tx.rank() != 2 || ts.rank() != 1 || tx.extent(0) != ts.extent(0)) {
        throw ShapeError("rowwise_scale: x " + shape_str(tx.shape()) + ", s " + shape_str(ts.shape()));
    }
    const std::int64_t R = tx.extent(0), C = tx.extent(1);
    Tensor out(tx.shape());
    for (std::int64_t r = 0; r < R; ++r) {
        for (std::int64_t c = 0; c < C; ++c) out[r * C + c] = tx[r * C + c] * ts[r];
    }
    Graph& g = *x.graph();
    const auto ix = x.id(), is = s.id();
    return g.make_node("rowwise_scale", std::move(out), {x, s}, [ix, is, R, C](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        const Tensor& vx = val(gg, ix);
        const Tensor& vs = val(gg, is);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t r = 0; r < R; ++r) {
                for (std::int64_t c = 0; c < C; ++c) (*gx)[r * C + c] += dy[r * C + c] * vs[r];
            }
        }
        if (Tensor* gs = gg.grad_of(is)) {
            for (std::int64_t r = 0; r < R; ++r) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < C; ++c) acc += dy[r * C + c] * vx[r * C + c];
                (*gs)[r] += acc;
            }
        }
    });
}

Value rowwise_shift(Value x, Value s) {
    const Tensor& tx = x.tensor();
    const Tensor& ts = s.tensor();
    if (tx.rank() != 2 || ts.rank() != 1 || tx.extent(0) != ts.extent(0)) {
        throw ShapeError("rowwise_shift: x " + shape_str(tx.shape()) + ", s " + shape_str(ts.shape()));
    }
    const std::int64_t R = tx.extent(0), C = tx.extent(1);
    Tensor out(tx.shape());
    for (std::int64_t r = 0; r < R; ++r) {
        for (std::int64_t c = 0; c < C; ++c) out[r * C + c] = tx[r * C + c] + ts[r];
    }
    Graph& g = *x.graph();
    const auto ix = x.id(), is = s.id();
    return g.make_node("rowwise_shift", std::move(out), {x, s}, [ix, is, R, C](Graph& gg, std::int32_t self) {
        const Tensor& dy = gg.grad_value(self);
        if (Tensor* gx = gg.grad_of(ix)) {
            for (std::int64_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
        }
        if (Tensor* gs = gg.grad_of(is)) {
            for (std::int64_t r = 0; r < R; ++r) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < C; ++c) acc += dy[r * C + c];
                (*gs)[r] += acc;
            }
        }
    });
}

namespace {

std::int64_t wrap(std::int64_t v, std::int64_t n) {
    v %= n;
    return v < 0 ? v + n : v;
}

}  // namespace

Value cyclic_shift(Value fmap, std::int64_t dy, std::int64_t dx) {
    const Tensor& tx = fmap.tensor();
    if (tx.rank() != 4) throw ShapeError("cyclic_shift: expected B,H,W,C map, got " + shape_str(tx.shape()));
    const std::int64_t B = tx.extent(0), H = tx.extent(1), W = tx.extent(2), C = tx.extent(3);
    Tensor out(tx.shape());
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t y = 0; y < H; ++y) {
            const std::int64_t sy = wrap(y - dy, H);
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t sx = wrap(x - dx, W);
                std::memcpy(out.data() + ((b * H + y) * W + x) * C,
                            tx.data() + ((b * H + sy) * W + sx) * C,
                            static_cast<std::size_t>(C) * sizeof(double));
            }
        }
    }
    Graph& g = *fmap.graph();
    const auto ix = fmap.id();
    return g.make_node("cyclic_shift", std::move(out), {fmap},
                       [ix, B, H, W, C, dy, dx](Graph& gg, std::int32_t self) {
                           const Tensor& dgrad = gg.grad_value(self);
                           if (Tensor* gx = gg.grad_of(ix)) {
                               for (std::int64_t b = 0; b < B; ++b) {
                                   for (std::int64_t y = 0; y < H; ++y) {
                                       const std::int64_t sy = wrap(y - dy, H);
                                       for (std::int64_t x = 0; x < W; ++x) {
                                           const std::int64_t sx = wrap(x - dx, W);
                                           const double* src = dgrad.data() + ((b * H + y) * W + x) * C;
                                           double* dst = gx->data() + ((b * H + sy) * W + sx) * C;
                                           for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                                       }
                                   }
                               }
                           }
                       });
}

Value space_to_depth(Value fmap, std::int64_t block) {
    const Tensor& tx = fmap.tensor();
    if (tx.rank() != 4) throw ShapeError("space_to_depth: expected B,H,W,C map, got " + shape_str(tx.shape()));
    const std::int64_t B = tx.extent(0), H = tx.extent(1), W = tx.extent(2), C = tx.extent(3);
    if (block <= 0 || H % block != 0 || W % block != 0) {
        throw ShapeError("space_to_depth: block " + std::to_string(block) + " does not divide " +
                         shape_str(tx.shape()));
    }
    const std::int64_t Ho = H / block, Wo = W / block;
    Tensor out(Shape{B, Ho, Wo, block * block * C});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t y = 0; y < Ho; ++y) {
            for (std::int64_t x = 0; x < Wo; ++x) {
                double* dst = out.data() + ((b * Ho + y) * Wo + x) * block * block * C;
                for (std::int64_t by = 0; by < block; ++by) {
                    for (std::int64_t bx = 0; bx < block; ++bx) {
                        const double* src = tx.data() + ((b * H + y * block + by) * W + x * block + bx) * C;
                        std::memcpy(dst, src, static_cast<std::size_t>(C) * sizeof(double));
                        dst += C;
                    }
                }
            }
        }
    }
    Graph& g = *fmap.graph();
    const auto ix = fmap.id();
    return g.make_node("space_to_depth", std::move(out), {fmap},
                       [ix, B, H, W, C, block](Graph& gg, std::int32_t self) {
                           const Tensor& dy = gg.grad_value(self);
                           if (Tensor* gx = gg.grad_of(ix)) {
                               const std::int64_t Ho = H / block, Wo = W / block;
                               for (std::int64_t b = 0; b < B; ++b) {
                                   for (std::int64_t y = 0; y < Ho; ++y) {
                                       for (std::int64_t x = 0; x < Wo; ++x) {
                                           const double* src =
                                               dy.data() + ((b * Ho + y) * Wo + x) * block * block * C;
                                           for (std::int64_t by = 0; by < block; ++by) {
                                               for (std::int64_t bx = 0; bx < block; ++bx) {
                                                   double* dst = gx->data() +
                                                                 ((b * H + y * block + by) * W + x * block + bx) * C;
                                                   for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                                                   src += C;
                                               }
                                           }
                                       }
                                   }
                               }
                           }
                       });
}

}  // namespace dalg
