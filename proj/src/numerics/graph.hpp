#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "numerics/tensor.hpp"

namespace vox4d {

/// Handle into a GraphT. Cheap to copy; valid only for the graph that made it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Contiguous row range [start, start+count). Used for unit-local attention
/// and per-cell reductions.
struct RowGroup {
    int64_t start = 0;
    int64_t count = 0;
};

/// A learnable array with a persistent gradient accumulator. Parameters live
/// outside any graph; backward() flushes into `grad`, so repeated backward
/// calls accumulate until zero_grad().
template <typename T>
struct ParamT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;

    ParamT() = default;
    ParamT(std::string n, TensorT<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { std::fill(grad.values().begin(), grad.values().end(), T(0)); }
};

using Param = ParamT<float>;

/// Reverse-mode tape over dense tensors. One graph per forward pass; nodes
/// are appended in topological order, so backward is a reverse sweep.
/// With grad_enabled=false no closures or activation caches are kept and the
/// graph is a plain forward evaluator.
///
/// In the double instantiation every op checks its inputs for non-finite
/// values (the gradient-checking mode); the float instantiation does not pay
/// for that.
template <typename T>
class GraphT {
public:
    explicit GraphT(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Var input(TensorT<T> value);
    Var param(ParamT<T>& p);

    const TensorT<T>& value(Var v) const { return node(v).value; }
    /// Gradient accumulated by the last backward() call; empty tensor if the
    /// node was not reached.
    const TensorT<T>& grad(Var v) const { return node(v).grad; }

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var add_scalar(Var a, T s);
    Var mul_scalar(Var a, T s);

    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var reshape(Var a, Shape shape);
    Var concat_rows(const std::vector<Var>& xs);
    Var gather_rows(Var a, std::vector<int64_t> idx);
    Var slice_rows(Var a, int64_t start, int64_t count);
    Var broadcast_rows(Var row, int64_t n);

    Var sum_all(Var a);
    Var mean_all(Var a);
    Var softmax_rows(Var a);
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));
    Var gelu(Var a);
    Var linear(Var x, Var w, Var b);

    /// Scaled dot-product multi-head attention, restricted to row groups.
    /// q,k,v: [N,C]; groups must tile [0,N) in order. One group = global.
    Var attention(Var q, Var k, Var v, int heads, std::vector<RowGroup> groups);

    /// out[i] = replace[i] ? row : x[i]; row is [1,C].
    Var rows_where(std::vector<uint8_t> replace, Var x, Var row);
    Var group_mean_rows(Var x, std::vector<RowGroup> groups);
    /// Tokens laid out cell-major with a q^3 lattice per cell (offset index
    /// (ox*q+oy)*q+oz); mean-pools 2x2x2 neighborhoods to (q/2)^3 per cell.
    Var pool_cells2(Var x, int64_t n_cells, int64_t q);

    Var mse(Var pred, Var target);
    Var smooth_l1(Var pred, Var target, T beta);
    Var cross_entropy_logits(Var logits, std::vector<int32_t> labels);

    /// Reverse sweep from a scalar loss. Node gradients are recomputed from
    /// scratch on every call; parameter gradients accumulate across calls.
    void backward(Var loss);

    bool grad_enabled() const { return grad_enabled_; }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        std::function<void(GraphT&)> back;
        ParamT<T>* param = nullptr;
        bool needs_grad = false;
    };

    Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.id)); }
    const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.id)); }

    Var emplace(TensorT<T> value, bool needs_grad, std::function<void(GraphT&)> back);
    bool track(std::initializer_list<Var> inputs) const;
    void check_finite_inputs(const char* op, std::initializer_list<Var> inputs) const;
    TensorT<T>& grad_buf(int32_t id);
    bool has_grad(int32_t id) const;

    std::vector<Node> nodes_;
    std::unordered_map<const ParamT<T>*, int32_t> param_nodes_;
    bool grad_enabled_;
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

} // namespace vox4d
