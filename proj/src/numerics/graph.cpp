#include "numerics/graph.hpp"

#include <cmath>
#include <numbers>

namespace vox4d {

namespace {

template <typename T>
void require_2d(const char* op, const TensorT<T>& t) {
    if (t.shape().size() != 2)
        fail_runtime(std::string(op) + ": expected a 2-d tensor, got shape " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        fail_runtime(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

} // namespace

template <typename T>
Var GraphT<T>::emplace(TensorT<T> value, bool needs_grad, std::function<void(GraphT&)> back) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

template <typename T>
bool GraphT<T>::track(std::initializer_list<Var> inputs) const {
    if (!grad_enabled_) return false;
    for (Var v : inputs)
        if (v.valid() && node(v).needs_grad) return true;
    return false;
}

template <typename T>
void GraphT<T>::check_finite_inputs(const char* op, std::initializer_list<Var> inputs) const {
    if constexpr (std::is_same_v<T, double>) {
        for (Var v : inputs) {
            const auto& t = node(v).value;
            if (!all_finite(t.data(), t.numel()))
                fail_runtime(std::string(op) + ": non-finite input value (64-bit checking mode)");
        }
    } else {
        (void)op;
        (void)inputs;
    }
}

template <typename T>
TensorT<T>& GraphT<T>::grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() && n.value.numel() > 0) n.grad = TensorT<T>(n.value.shape());
    return n.grad;
}

template <typename T>
bool GraphT<T>::has_grad(int32_t id) const {
    return !nodes_[static_cast<size_t>(id)].grad.empty();
}

template <typename T>
Var GraphT<T>::input(TensorT<T> value) {
    return emplace(std::move(value), false, nullptr);
}

template <typename T>
Var GraphT<T>::param(ParamT<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = emplace(p.value, grad_enabled_, nullptr);
    node(v).param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
}

template <typename T>
Var GraphT<T>::add(Var a, Var b) {
    check_finite_inputs("add", {a, b});
    const auto& av = value(a);
    const auto& bv = value(b);
    require_same_shape("add", av, bv);
    TensorT<T> out(av.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
    if (!track({a, b})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, bid = b.id](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        for (int32_t id : {aid, bid}) {
            if (!g.nodes_[id].needs_grad) continue;
            auto& gi = g.grad_buf(id);
            for (int64_t i = 0; i < go.numel(); ++i) gi[i] += go[i];
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::sub(Var a, Var b) {
    check_finite_inputs("sub", {a, b});
    const auto& av = value(a);
    const auto& bv = value(b);
    require_same_shape("sub", av, bv);
    TensorT<T> out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
    if (!track({a, b})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, bid = b.id](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        if (g.nodes_[aid].needs_grad) {
            auto& ga = g.grad_buf(aid);
            for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        }
        if (g.nodes_[bid].needs_grad) {
            auto& gb = g.grad_buf(bid);
            for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::mul(Var a, Var b) {
    check_finite_inputs("mul", {a, b});
    const auto& av = value(a);
    const auto& bv = value(b);
    require_same_shape("mul", av, bv);
    TensorT<T> out(av.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    if (!track({a, b})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, bid = b.id](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const auto& av2 = g.nodes_[aid].value;
        const auto& bv2 = g.nodes_[bid].value;
        if (g.nodes_[aid].needs_grad) {
            auto& ga = g.grad_buf(aid);
            for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * bv2[i];
        }
        if (g.nodes_[bid].needs_grad) {
            auto& gb = g.grad_buf(bid);
            for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * av2[i];
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::add_scalar(Var a, T s) {
    check_finite_inputs("add_scalar", {a});
    TensorT<T> out = value(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    };
    return o;
}

template <typename T>
Var GraphT<T>::mul_scalar(Var a, T s) {
    check_finite_inputs("mul_scalar", {a});
    TensorT<T> out = value(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, s](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * s;
    };
    return o;
}

template <typename T>
Var GraphT<T>::matmul(Var a, Var b) {
    check_finite_inputs("matmul", {a, b});
    const auto& av = value(a);
    const auto& bv = value(b);
    require_2d("matmul", av);
    require_2d("matmul", bv);
    if (av.dim(1) != bv.dim(0))
        fail_runtime("matmul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    TensorT<T> out({m, n});
    matmul_nn(av.data(), bv.data(), out.data(), m, k, n, false);
    if (!track({a, b})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, bid = b.id, m, k, n](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const auto& av2 = g.nodes_[aid].value;
        const auto& bv2 = g.nodes_[bid].value;
        if (g.nodes_[aid].needs_grad) {
            auto& ga = g.grad_buf(aid);
            matmul_nt(go.data(), bv2.data(), ga.data(), m, n, k, true);
        }
        if (g.nodes_[bid].needs_grad) {
            auto& gb = g.grad_buf(bid);
            matmul_tn(av2.data(), go.data(), gb.data(), k, m, n, true);
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::transpose(Var a) {
    check_finite_inputs("transpose", {a});
    const auto& av = value(a);
    require_2d("transpose", av);
    const int64_t r = av.dim(0), c = av.dim(1);
    TensorT<T> out({c, r});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, r, c](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
    };
    return o;
}

template <typename T>
Var GraphT<T>::reshape(Var a, Shape shape) {
    check_finite_inputs("reshape", {a});
    const auto& av = value(a);
    if (shape_numel(shape) != av.numel())
        fail_runtime("reshape: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(shape));
    TensorT<T> out(std::move(shape), av.values());
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    };
    return o;
}

template <typename T>
Var GraphT<T>::concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) fail_runtime("concat_rows: empty input list");
    int64_t rows = 0;
    const int64_t cols = value(xs[0]).dim(1);
    for (Var x : xs) {
        check_finite_inputs("concat_rows", {x});
        require_2d("concat_rows", value(x));
        if (value(x).dim(1) != cols)
            fail_runtime("concat_rows: shape mismatch " + shape_str(value(xs[0]).shape()) + " vs " +
                         shape_str(value(x).shape()));
        rows += value(x).dim(0);
    }
    TensorT<T> out({rows, cols});
    int64_t at = 0;
    for (Var x : xs) {
        const auto& xv = value(x);
        std::copy(xv.data(), xv.data() + xv.numel(), out.data() + at * cols);
        at += xv.dim(0);
    }
    bool needs = false;
    for (Var x : xs) needs = needs || track({x});
    if (!needs) return emplace(std::move(out), false, nullptr);
    std::vector<int32_t> ids;
    for (Var x : xs) ids.push_back(x.id);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, ids, cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        int64_t at2 = 0;
        for (int32_t id : ids) {
            const int64_t r = g.nodes_[id].value.dim(0);
            if (g.nodes_[id].needs_grad) {
                auto& gi = g.grad_buf(id);
                for (int64_t i = 0; i < r * cols; ++i) gi[i] += go[at2 * cols + i];
            }
            at2 += r;
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::gather_rows(Var a, std::vector<int64_t> idx) {
    check_finite_inputs("gather_rows", {a});
    const auto& av = value(a);
    require_2d("gather_rows", av);
    const int64_t rows = av.dim(0), cols = av.dim(1);
    for (int64_t i : idx)
        if (i < 0 || i >= rows)
            fail_runtime("gather_rows: index " + std::to_string(i) + " out of range for shape " +
                         shape_str(av.shape()));
    TensorT<T> out({static_cast<int64_t>(idx.size()), cols});
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(av.data() + idx[r] * cols, av.data() + (idx[r] + 1) * cols,
                  out.data() + static_cast<int64_t>(r) * cols);
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, idx = std::move(idx), cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& ga = g.grad_buf(aid);
        for (size_t r = 0; r < idx.size(); ++r)
            for (int64_t j = 0; j < cols; ++j)
                ga[idx[r] * cols + j] += go[static_cast<int64_t>(r) * cols + j];
    };
    return o;
}

template <typename T>
Var GraphT<T>::slice_rows(Var a, int64_t start, int64_t count) {
    check_finite_inputs("slice_rows", {a});
    const auto& av = value(a);
    require_2d("slice_rows", av);
    const int64_t rows = av.dim(0), cols = av.dim(1);
    if (start < 0 || count < 0 || start + count > rows)
        fail_runtime("slice_rows: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of bounds for shape " +
                     shape_str(av.shape()));
    TensorT<T> out({count, cols});
    std::copy(av.data() + start * cols, av.data() + (start + count) * cols, out.data());
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, start, count, cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < count * cols; ++i) ga[start * cols + i] += go[i];
    };
    return o;
}

template <typename T>
Var GraphT<T>::broadcast_rows(Var row, int64_t n) {
    check_finite_inputs("broadcast_rows", {row});
    const auto& rv = value(row);
    require_2d("broadcast_rows", rv);
    if (rv.dim(0) != 1)
        fail_runtime("broadcast_rows: expected a single row, got shape " + shape_str(rv.shape()));
    const int64_t cols = rv.dim(1);
    TensorT<T> out({n, cols});
    for (int64_t i = 0; i < n; ++i) std::copy(rv.data(), rv.data() + cols, out.data() + i * cols);
    if (!track({row})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, rid = row.id, n, cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& gr = g.grad_buf(rid);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < cols; ++j) gr[j] += go[i * cols + j];
    };
    return o;
}

template <typename T>
Var GraphT<T>::sum_all(Var a) {
    check_finite_inputs("sum_all", {a});
    const auto& av = value(a);
    T acc = T(0);
    for (int64_t i = 0; i < av.numel(); ++i) acc += av[i];
    TensorT<T> out = TensorT<T>::scalar(acc);
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id](GraphT& g) {
        const T go = g.nodes_[self].grad[0];
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
    };
    return o;
}

template <typename T>
Var GraphT<T>::mean_all(Var a) {
    check_finite_inputs("mean_all", {a});
    const auto& av = value(a);
    if (av.numel() == 0) fail_runtime("mean_all: empty tensor");
    T acc = T(0);
    for (int64_t i = 0; i < av.numel(); ++i) acc += av[i];
    const T inv = T(1) / static_cast<T>(av.numel());
    TensorT<T> out = TensorT<T>::scalar(acc * inv);
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, inv](GraphT& g) {
        const T go = g.nodes_[self].grad[0] * inv;
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go;
    };
    return o;
}

template <typename T>
Var GraphT<T>::softmax_rows(Var a) {
    check_finite_inputs("softmax_rows", {a});
    const auto& av = value(a);
    require_2d("softmax_rows", av);
    const int64_t rows = av.dim(0), cols = av.dim(1);
    TensorT<T> out({rows, cols});
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i) {
        const T* x = av.data() + i * cols;
        T* y = out.data() + i * cols;
        T mx = x[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (int64_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
    }
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id, rows, cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const auto& p = g.nodes_[self].value;
        auto& ga = g.grad_buf(aid);
        for (int64_t i = 0; i < rows; ++i) {
            T dot = T(0);
            for (int64_t j = 0; j < cols; ++j) dot += go[i * cols + j] * p[i * cols + j];
            for (int64_t j = 0; j < cols; ++j)
                ga[i * cols + j] += p[i * cols + j] * (go[i * cols + j] - dot);
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
    check_finite_inputs("layer_norm", {x, gamma, beta});
    const auto& xv = value(x);
    require_2d("layer_norm", xv);
    const int64_t rows = xv.dim(0), cols = xv.dim(1);
    const auto& gv = value(gamma);
    const auto& bv = value(beta);
    if (gv.numel() != cols || bv.numel() != cols)
        fail_runtime("layer_norm: shape mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str(gv.shape()));
    auto xhat = std::make_shared<TensorT<T>>(Shape{rows, cols});
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    TensorT<T> out({rows, cols});
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < rows; ++i) {
        const T* xr = xv.data() + i * cols;
        T mu = T(0);
        for (int64_t j = 0; j < cols; ++j) mu += xr[j];
        mu /= static_cast<T>(cols);
        T var = T(0);
        for (int64_t j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(cols);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = inv;
        for (int64_t j = 0; j < cols; ++j) {
            const T xh = (xr[j] - mu) * inv;
            (*xhat)[i * cols + j] = xh;
            out[i * cols + j] = xh * gv[j] + bv[j];
        }
    }
    if (!track({x, gamma, beta})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, xid = x.id, gid = gamma.id, bid = beta.id, xhat, inv_std, rows,
                    cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const auto& gv2 = g.nodes_[gid].value;
        if (g.nodes_[bid].needs_grad) {
            auto& gb = g.grad_buf(bid);
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < cols; ++j) gb[j] += go[i * cols + j];
        }
        if (g.nodes_[gid].needs_grad) {
            auto& gg = g.grad_buf(gid);
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < cols; ++j) gg[j] += go[i * cols + j] * (*xhat)[i * cols + j];
        }
        if (g.nodes_[xid].needs_grad) {
            auto& gx = g.grad_buf(xid);
            for (int64_t i = 0; i < rows; ++i) {
                T m1 = T(0), m2 = T(0);
                for (int64_t j = 0; j < cols; ++j) {
                    const T u = go[i * cols + j] * gv2[j];
                    m1 += u;
                    m2 += u * (*xhat)[i * cols + j];
                }
                m1 /= static_cast<T>(cols);
                m2 /= static_cast<T>(cols);
                const T inv = (*inv_std)[static_cast<size_t>(i)];
                for (int64_t j = 0; j < cols; ++j) {
                    const T u = go[i * cols + j] * gv2[j];
                    gx[i * cols + j] += inv * (u - m1 - (*xhat)[i * cols + j] * m2);
                }
            }
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::gelu(Var a) {
    check_finite_inputs("gelu", {a});
    const auto& av = value(a);
    TensorT<T> out(av.shape());
    const int64_t n = out.numel();
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i)
        out[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
    if (!track({a})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, aid = a.id](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const auto& xv = g.nodes_[aid].value;
        auto& ga = g.grad_buf(aid);
        constexpr T c = T(0.70710678118654752440);
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        for (int64_t i = 0; i < go.numel(); ++i) {
            const T x = xv[i];
            const T cdf = T(0.5) * (T(1) + std::erf(x * c));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            ga[i] += go[i] * (cdf + x * pdf);
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::linear(Var x, Var w, Var b) {
    check_finite_inputs("linear", {x, w, b});
    const auto& xv = value(x);
    const auto& wv = value(w);
    const auto& bv = value(b);
    require_2d("linear", xv);
    require_2d("linear", wv);
    if (xv.dim(1) != wv.dim(0) || bv.numel() != wv.dim(1))
        fail_runtime("linear: shape mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str(wv.shape()));
    const int64_t n = xv.dim(0), in = xv.dim(1), out_c = wv.dim(1);
    TensorT<T> out({n, out_c});
    matmul_nn(xv.data(), wv.data(), out.data(), n, in, out_c, false);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < out_c; ++j) out[i * out_c + j] += bv[j];
    if (!track({x, w, b})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, xid = x.id, wid = w.id, bid = b.id, n, in, out_c](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const auto& xv2 = g.nodes_[xid].value;
        const auto& wv2 = g.nodes_[wid].value;
        if (g.nodes_[xid].needs_grad)
            matmul_nt(go.data(), wv2.data(), g.grad_buf(xid).data(), n, out_c, in, true);
        if (g.nodes_[wid].needs_grad)
            matmul_tn(xv2.data(), go.data(), g.grad_buf(wid).data(), in, n, out_c, true);
        if (g.nodes_[bid].needs_grad) {
            auto& gb = g.grad_buf(bid);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < out_c; ++j) gb[j] += go[i * out_c + j];
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::attention(Var q, Var k, Var v, int heads, std::vector<RowGroup> groups) {
    check_finite_inputs("attention", {q, k, v});
    const auto& qv = value(q);
    const auto& kv = value(k);
    const auto& vv = value(v);
    require_2d("attention", qv);
    require_same_shape("attention", qv, kv);
    require_same_shape("attention", qv, vv);
    const int64_t n = qv.dim(0), c = qv.dim(1);
    if (heads <= 0 || c % heads != 0)
        fail_runtime("attention: width " + std::to_string(c) + " not divisible by heads " +
                     std::to_string(heads));
    int64_t covered = 0;
    for (const auto& gr : groups) {
        if (gr.start != covered || gr.count <= 0)
            fail_runtime("attention: groups must tile the rows in order");
        covered += gr.count;
    }
    if (covered != n) fail_runtime("attention: groups cover " + std::to_string(covered) +
                                   " rows, tensor has " + std::to_string(n));
    const int64_t dh = c / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const int64_t ng = static_cast<int64_t>(groups.size());
    const bool needs = track({q, k, v});

    auto probs = std::make_shared<std::vector<TensorT<T>>>();
    if (needs) probs->resize(static_cast<size_t>(ng * heads));

    TensorT<T> out({n, c});
#pragma omp parallel for schedule(dynamic) collapse(2)
    for (int64_t gi = 0; gi < ng; ++gi) {
        for (int64_t h = 0; h < static_cast<int64_t>(heads); ++h) {
            const int64_t start = groups[static_cast<size_t>(gi)].start;
            const int64_t cnt = groups[static_cast<size_t>(gi)].count;
            const int64_t off = h * dh;
            TensorT<T> p({cnt, cnt});
            for (int64_t i = 0; i < cnt; ++i) {
                const T* qi = qv.data() + (start + i) * c + off;
                T* pr = p.data() + i * cnt;
                T mx = -std::numeric_limits<T>::infinity();
                for (int64_t j = 0; j < cnt; ++j) {
                    const T* kj = kv.data() + (start + j) * c + off;
                    T s = T(0);
                    for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    s *= scale;
                    pr[j] = s;
                    mx = std::max(mx, s);
                }
                T sum = T(0);
                for (int64_t j = 0; j < cnt; ++j) {
                    pr[j] = std::exp(pr[j] - mx);
                    sum += pr[j];
                }
                const T inv = T(1) / sum;
                T* orow = out.data() + (start + i) * c + off;
                for (int64_t d = 0; d < dh; ++d) orow[d] = T(0);
                for (int64_t j = 0; j < cnt; ++j) {
                    pr[j] *= inv;
                    const T w = pr[j];
                    const T* vj = vv.data() + (start + j) * c + off;
                    for (int64_t d = 0; d < dh; ++d) orow[d] += w * vj[d];
                }
            }
            if (needs) (*probs)[static_cast<size_t>(gi * heads + h)] = std::move(p);
        }
    }
    if (!needs) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, qid = q.id, kid = k.id, vid = v.id, probs,
                    groups = std::move(groups), heads, dh, c, scale](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const auto& qv2 = g.nodes_[qid].value;
        const auto& kv2 = g.nodes_[kid].value;
        const auto& vv2 = g.nodes_[vid].value;
        auto& gq = g.grad_buf(qid);
        auto& gk = g.grad_buf(kid);
        auto& gv = g.grad_buf(vid);
        const int64_t ng2 = static_cast<int64_t>(groups.size());
#pragma omp parallel for schedule(dynamic) collapse(2)
        for (int64_t gi = 0; gi < ng2; ++gi) {
            for (int64_t h = 0; h < static_cast<int64_t>(heads); ++h) {
                const int64_t start = groups[static_cast<size_t>(gi)].start;
                const int64_t cnt = groups[static_cast<size_t>(gi)].count;
                const int64_t off = h * dh;
                const TensorT<T>& p = (*probs)[static_cast<size_t>(gi * heads + h)];
                TensorT<T> ds({cnt, cnt});
                for (int64_t i = 0; i < cnt; ++i) {
                    const T* doi = go.data() + (start + i) * c + off;
                    // dP and the softmax jacobian, fused per row
                    T rowdot = T(0);
                    T* dsr = ds.data() + i * cnt;
                    for (int64_t j = 0; j < cnt; ++j) {
                        const T* vj = vv2.data() + (start + j) * c + off;
                        T dp = T(0);
                        for (int64_t d = 0; d < dh; ++d) dp += doi[d] * vj[d];
                        dsr[j] = dp;
                        rowdot += dp * p[i * cnt + j];
                    }
                    for (int64_t j = 0; j < cnt; ++j)
                        dsr[j] = p[i * cnt + j] * (dsr[j] - rowdot);
                }
                for (int64_t i = 0; i < cnt; ++i) {
                    const T* doi = go.data() + (start + i) * c + off;
                    const T* dsr = ds.data() + i * cnt;
                    T* gqi = gq.data() + (start + i) * c + off;
                    for (int64_t j = 0; j < cnt; ++j) {
                        const T* kj = kv2.data() + (start + j) * c + off;
                        const T* qi = qv2.data() + (start + i) * c + off;
                        T* gkj = gk.data() + (start + j) * c + off;
                        T* gvj = gv.data() + (start + j) * c + off;
                        const T w = p[i * cnt + j];
                        const T dsv = dsr[j] * scale;
                        for (int64_t d = 0; d < dh; ++d) {
                            gvj[d] += w * doi[d];
                            gqi[d] += dsv * kj[d];
                            gkj[d] += dsv * qi[d];
                        }
                    }
                }
            }
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::rows_where(std::vector<uint8_t> replace, Var x, Var row) {
    check_finite_inputs("rows_where", {x, row});
    const auto& xv = value(x);
    const auto& rv = value(row);
    require_2d("rows_where", xv);
    require_2d("rows_where", rv);
    const int64_t n = xv.dim(0), cols = xv.dim(1);
    if (rv.dim(0) != 1 || rv.dim(1) != cols)
        fail_runtime("rows_where: shape mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str(rv.shape()));
    if (static_cast<int64_t>(replace.size()) != n)
        fail_runtime("rows_where: mask length " + std::to_string(replace.size()) +
                     " does not match rows " + std::to_string(n));
    TensorT<T> out({n, cols});
    for (int64_t i = 0; i < n; ++i) {
        const T* src = replace[static_cast<size_t>(i)] ? rv.data() : xv.data() + i * cols;
        std::copy(src, src + cols, out.data() + i * cols);
    }
    if (!track({x, row})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, xid = x.id, rid = row.id, replace = std::move(replace),
                    cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        const int64_t n2 = go.dim(0);
        if (g.nodes_[xid].needs_grad) {
            auto& gx = g.grad_buf(xid);
            for (int64_t i = 0; i < n2; ++i)
                if (!replace[static_cast<size_t>(i)])
                    for (int64_t j = 0; j < cols; ++j) gx[i * cols + j] += go[i * cols + j];
        }
        if (g.nodes_[rid].needs_grad) {
            auto& gr = g.grad_buf(rid);
            for (int64_t i = 0; i < n2; ++i)
                if (replace[static_cast<size_t>(i)])
                    for (int64_t j = 0; j < cols; ++j) gr[j] += go[i * cols + j];
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::group_mean_rows(Var x, std::vector<RowGroup> groups) {
    check_finite_inputs("group_mean_rows", {x});
    const auto& xv = value(x);
    require_2d("group_mean_rows", xv);
    const int64_t cols = xv.dim(1);
    const int64_t ng = static_cast<int64_t>(groups.size());
    TensorT<T> out({ng, cols});
    for (int64_t gi = 0; gi < ng; ++gi) {
        const auto& gr = groups[static_cast<size_t>(gi)];
        if (gr.count <= 0 || gr.start < 0 || gr.start + gr.count > xv.dim(0))
            fail_runtime("group_mean_rows: group out of range for shape " + shape_str(xv.shape()));
        const T inv = T(1) / static_cast<T>(gr.count);
        for (int64_t r = 0; r < gr.count; ++r)
            for (int64_t j = 0; j < cols; ++j)
                out[gi * cols + j] += xv[(gr.start + r) * cols + j] * inv;
    }
    if (!track({x})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, xid = x.id, groups = std::move(groups), cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& gx = g.grad_buf(xid);
        for (int64_t gi = 0; gi < static_cast<int64_t>(groups.size()); ++gi) {
            const auto& gr = groups[static_cast<size_t>(gi)];
            const T inv = T(1) / static_cast<T>(gr.count);
            for (int64_t r = 0; r < gr.count; ++r)
                for (int64_t j = 0; j < cols; ++j)
                    gx[(gr.start + r) * cols + j] += go[gi * cols + j] * inv;
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::pool_cells2(Var x, int64_t n_cells, int64_t q) {
    check_finite_inputs("pool_cells2", {x});
    const auto& xv = value(x);
    require_2d("pool_cells2", xv);
    if (q < 2 || q % 2 != 0) fail_runtime("pool_cells2: lattice edge must be even, got " + std::to_string(q));
    const int64_t cols = xv.dim(1);
    const int64_t per_in = q * q * q;
    if (xv.dim(0) != n_cells * per_in)
        fail_runtime("pool_cells2: shape mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str({n_cells * per_in, cols}));
    const int64_t hq = q / 2;
    const int64_t per_out = hq * hq * hq;
    TensorT<T> out({n_cells * per_out, cols});
    const T inv8 = T(1) / T(8);
    for (int64_t ci = 0; ci < n_cells; ++ci) {
        for (int64_t px = 0; px < hq; ++px)
            for (int64_t py = 0; py < hq; ++py)
                for (int64_t pz = 0; pz < hq; ++pz) {
                    const int64_t orow = ci * per_out + (px * hq + py) * hq + pz;
                    T* dst = out.data() + orow * cols;
                    for (int64_t dx = 0; dx < 2; ++dx)
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dz = 0; dz < 2; ++dz) {
                                const int64_t irow =
                                    ci * per_in +
                                    ((2 * px + dx) * q + (2 * py + dy)) * q + (2 * pz + dz);
                                const T* src = xv.data() + irow * cols;
                                for (int64_t j = 0; j < cols; ++j) dst[j] += src[j] * inv8;
                            }
                }
    }
    if (!track({x})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, xid = x.id, n_cells, q, cols](GraphT& g) {
        const auto& go = g.nodes_[self].grad;
        auto& gx = g.grad_buf(xid);
        const int64_t hq = q / 2;
        const int64_t per_in = q * q * q;
        const int64_t per_out = hq * hq * hq;
        const T inv8 = T(1) / T(8);
        for (int64_t ci = 0; ci < n_cells; ++ci)
            for (int64_t px = 0; px < hq; ++px)
                for (int64_t py = 0; py < hq; ++py)
                    for (int64_t pz = 0; pz < hq; ++pz) {
                        const int64_t orow = ci * per_out + (px * hq + py) * hq + pz;
                        const T* src = go.data() + orow * cols;
                        for (int64_t dx = 0; dx < 2; ++dx)
                            for (int64_t dy = 0; dy < 2; ++dy)
                                for (int64_t dz = 0; dz < 2; ++dz) {
                                    const int64_t irow =
                                        ci * per_in +
                                        ((2 * px + dx) * q + (2 * py + dy)) * q + (2 * pz + dz);
                                    T* dst = gx.data() + irow * cols;
                                    for (int64_t j = 0; j < cols; ++j) dst[j] += src[j] * inv8;
                                }
                    }
    };
    return o;
}

template <typename T>
Var GraphT<T>::mse(Var pred, Var target) {
    check_finite_inputs("mse", {pred, target});
    const auto& pv = value(pred);
    const auto& tv = value(target);
    require_same_shape("mse", pv, tv);
    if (pv.numel() == 0) fail_runtime("mse: empty tensor");
    T acc = T(0);
    for (int64_t i = 0; i < pv.numel(); ++i) {
        const T d = pv[i] - tv[i];
        acc += d * d;
    }
    TensorT<T> out = TensorT<T>::scalar(acc / static_cast<T>(pv.numel()));
    if (!track({pred, target})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, pid = pred.id, tid = target.id](GraphT& g) {
        const auto& pv2 = g.nodes_[pid].value;
        const auto& tv2 = g.nodes_[tid].value;
        const T s = g.nodes_[self].grad[0] * T(2) / static_cast<T>(pv2.numel());
        if (g.nodes_[pid].needs_grad) {
            auto& gp = g.grad_buf(pid);
            for (int64_t i = 0; i < pv2.numel(); ++i) gp[i] += s * (pv2[i] - tv2[i]);
        }
        if (g.nodes_[tid].needs_grad) {
            auto& gt = g.grad_buf(tid);
            for (int64_t i = 0; i < pv2.numel(); ++i) gt[i] -= s * (pv2[i] - tv2[i]);
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::smooth_l1(Var pred, Var target, T beta) {
    check_finite_inputs("smooth_l1", {pred, target});
    if (!(beta > T(0))) fail_runtime("smooth_l1: beta must be positive");
    const auto& pv = value(pred);
    const auto& tv = value(target);
    require_same_shape("smooth_l1", pv, tv);
    if (pv.numel() == 0) fail_runtime("smooth_l1: empty tensor");
    T acc = T(0);
    for (int64_t i = 0; i < pv.numel(); ++i) {
        const T d = std::abs(pv[i] - tv[i]);
        acc += d < beta ? T(0.5) * d * d / beta : d - T(0.5) * beta;
    }
    TensorT<T> out = TensorT<T>::scalar(acc / static_cast<T>(pv.numel()));
    if (!track({pred, target})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, pid = pred.id, tid = target.id, beta](GraphT& g) {
        const auto& pv2 = g.nodes_[pid].value;
        const auto& tv2 = g.nodes_[tid].value;
        const T s = g.nodes_[self].grad[0] / static_cast<T>(pv2.numel());
        for (int64_t i = 0; i < pv2.numel(); ++i) {
            const T d = pv2[i] - tv2[i];
            const T dd = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
            if (g.nodes_[pid].needs_grad) g.grad_buf(pid)[i] += s * dd;
            if (g.nodes_[tid].needs_grad) g.grad_buf(tid)[i] -= s * dd;
        }
    };
    return o;
}

template <typename T>
Var GraphT<T>::cross_entropy_logits(Var logits, std::vector<int32_t> labels) {
    check_finite_inputs("cross_entropy_logits", {logits});
    const auto& lv = value(logits);
    require_2d("cross_entropy_logits", lv);
    const int64_t n = lv.dim(0), k = lv.dim(1);
    if (static_cast<int64_t>(labels.size()) != n)
        fail_runtime("cross_entropy_logits: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
    for (int32_t y : labels)
        if (y < 0 || y >= k) fail_runtime("cross_entropy_logits: label out of range");
    auto probs = std::make_shared<TensorT<T>>(Shape{n, k});
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T* row = lv.data() + i * k;
        T mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < k; ++j) {
            const T e = std::exp(row[j] - mx);
            (*probs)[i * k + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < k; ++j) (*probs)[i * k + j] *= inv;
        acc += std::log(sum) + mx - row[labels[static_cast<size_t>(i)]];
    }
    TensorT<T> out = TensorT<T>::scalar(acc / static_cast<T>(n));
    if (!track({logits})) return emplace(std::move(out), false, nullptr);
    Var o = emplace(std::move(out), true, nullptr);
    node(o).back = [self = o.id, lid = logits.id, labels = std::move(labels), probs, n,
                    k](GraphT& g) {
        const T s = g.nodes_[self].grad[0] / static_cast<T>(n);
        auto& gl = g.grad_buf(lid);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < k; ++j) {
                const T onehot = (j == labels[static_cast<size_t>(i)]) ? T(1) : T(0);
                gl[i * k + j] += s * ((*probs)[i * k + j] - onehot);
            }
    };
    return o;
}

template <typename T>
void GraphT<T>::backward(Var loss) {
    if (!loss.valid() || static_cast<size_t>(loss.id) >= nodes_.size())
        fail_runtime("backward: invalid loss node");
    if (node(loss).value.numel() != 1)
        fail_runtime("backward: loss must be a scalar, got shape " +
                     shape_str(node(loss).value.shape()));
    for (auto& n : nodes_) n.grad = TensorT<T>();
    grad_buf(loss.id)[0] = T(1);
    for (int32_t id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.back || !n.needs_grad || !has_grad(id)) continue;
        n.back(*this);
    }
    for (const auto& [p, id] : param_nodes_) {
        (void)p;
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.param || n.grad.empty()) continue;
        auto& pg = n.param->grad;
        for (int64_t i = 0; i < pg.numel(); ++i) pg[i] += n.grad[i];
    }
}

template class GraphT<float>;
template class GraphT<double>;

} // namespace vox4d
