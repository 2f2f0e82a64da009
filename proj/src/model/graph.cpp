#include "idfuse/graph.hpp"

#include <cmath>

#include "idfuse/errors.hpp"
#include "idfuse/kernels.hpp"

namespace idfuse {

template <class T>
typename Graph<T>::Id Graph<T>::push(Matrix<T> value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
}

template <class T>
bool Graph<T>::any_grad(std::initializer_list<Id> ids) const {
    for (Id id : ids)
        if (id != none && nodes_.at(id).needs_grad) return true;
    return false;
}

template <class T>
void Graph<T>::accumulate(Id id, const Matrix<T>& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.empty())
        n.grad = g;
    else
        n.grad += g;
}

template <class T>
typename Graph<T>::Id Graph<T>::constant(Matrix<T> value) {
    return push(std::move(value), false);
}

template <class T>
typename Graph<T>::Id Graph<T>::parameter(const Matrix<T>& value, Matrix<T>* grad) {
    if (grad && !grad->same_shape(value)) throw ShapeError("parameter gradient buffer shape mismatch");
    const Id id = push(value, grad != nullptr);
    if (nodes_[id].needs_grad) nodes_[id].param_grad = grad;
    return id;
}

template <class T>
typename Graph<T>::Id Graph<T>::matmul(Id x, Id w) {
    const Id me = self();
    return push(idfuse::matmul(value(x), value(w)), any_grad({x, w}), [this, x, w, me] {
        const Matrix<T>& g = grad(me);
        if (nodes_[x].needs_grad) accumulate(x, matmul_nt(g, value(w)));
        if (nodes_[w].needs_grad) accumulate(w, matmul_tn(value(x), g));
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::add_row(Id x, Id row) {
    const Matrix<T>& X = value(x);
    const Matrix<T>& b = value(row);
    if (b.rows() != 1 || b.cols() != X.cols()) throw ShapeError("add_row: " + X.shape_str() + " + " + b.shape_str());
    Matrix<T> y = X;
    for (std::size_t r = 0; r < y.rows(); ++r) kernels::axpy(T(1), b.row(0), y.row(r));
    const Id me = self();
    return push(std::move(y), any_grad({x, row}), [this, x, row, me] {
        const Matrix<T>& g = grad(me);
        accumulate(x, g);
        if (nodes_[row].needs_grad) {
            Matrix<T> s(1, g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r) kernels::axpy(T(1), g.row(r), s.row(0));
            accumulate(row, s);
        }
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::add(Id a, Id b) {
    const Id me = self();
    return push(value(a) + value(b), any_grad({a, b}), [this, a, b, me] {
        accumulate(a, grad(me));
        accumulate(b, grad(me));
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::concat_cols(Id a, Id b) {
    const std::size_t ca = value(a).cols(), cb = value(b).cols();
    const Id me = self();
    return push(idfuse::concat_cols(value(a), value(b)), any_grad({a, b}), [this, a, b, ca, cb, me] {
        if (nodes_[a].needs_grad) accumulate(a, slice_cols(grad(me), 0, ca));
        if (nodes_[b].needs_grad) accumulate(b, slice_cols(grad(me), ca, cb));
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::concat_rows(Id a, Id b) {
    const std::size_t ra = value(a).rows(), rb = value(b).rows();
    const Id me = self();
    return push(idfuse::concat_rows(value(a), value(b)), any_grad({a, b}), [this, a, b, ra, rb, me] {
        if (nodes_[a].needs_grad) accumulate(a, slice_rows(grad(me), 0, ra));
        if (nodes_[b].needs_grad) accumulate(b, slice_rows(grad(me), ra, rb));
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::silu(Id x) {
    const Matrix<T>& X = value(x);
    Matrix<T> y(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.size(); ++i) {
        const T v = X.data()[i];
        y.data()[i] = v / (T(1) + std::exp(-v));
    }
    const Id me = self();
    return push(std::move(y), any_grad({x}), [this, x, me] {
        const Matrix<T>& X = value(x);
        const Matrix<T>& g = grad(me);
        Matrix<T> dx(X.rows(), X.cols());
        for (std::size_t i = 0; i < X.size(); ++i) {
            const T v = X.data()[i];
            const T s = T(1) / (T(1) + std::exp(-v));
            dx.data()[i] = g.data()[i] * s * (T(1) + v * (T(1) - s));
        }
        accumulate(x, dx);
    });
}

namespace {

// Normalized values and 1/sigma per normalization block (row or group).
template <class T>
struct NormState {
    Matrix<T> xhat;
    std::vector<T> inv_std;
};

}  // namespace

template <class T>
typename Graph<T>::Id Graph<T>::layer_norm(Id x, T eps) {
    const Matrix<T>& X = value(x);
    auto st = std::make_shared<NormState<T>>();
    st->xhat = Matrix<T>(X.rows(), X.cols());
    st->inv_std.resize(X.rows());
    const T n = static_cast<T>(X.cols());
    for (std::size_t r = 0; r < X.rows(); ++r) {
        T mean = 0, var = 0;
        for (T v : X.row(r)) mean += v;
        mean /= n;
        for (T v : X.row(r)) var += (v - mean) * (v - mean);
        var /= n;
        const T inv = T(1) / std::sqrt(var + eps);
        st->inv_std[r] = inv;
        for (std::size_t c = 0; c < X.cols(); ++c) st->xhat(r, c) = (X(r, c) - mean) * inv;
    }
    Matrix<T> y = st->xhat;
    const Id me = self();
    return push(std::move(y), any_grad({x}), [this, x, st, me] {
        const Matrix<T>& g = grad(me);
        const T n = static_cast<T>(g.cols());
        Matrix<T> dx(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
            T mg = 0, mgx = 0;
            for (std::size_t c = 0; c < g.cols(); ++c) {
                mg += g(r, c);
                mgx += g(r, c) * st->xhat(r, c);
            }
            mg /= n;
            mgx /= n;
            for (std::size_t c = 0; c < g.cols(); ++c)
                dx(r, c) = st->inv_std[r] * (g(r, c) - mg - st->xhat(r, c) * mgx);
        }
        accumulate(x, dx);
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::group_norm(Id x, std::size_t groups, T eps) {
    const Matrix<T>& X = value(x);
    if (groups == 0 || X.cols() % groups) throw ShapeError("group_norm: channels not divisible by groups");
    const std::size_t cg = X.cols() / groups;
    auto st = std::make_shared<NormState<T>>();
    st->xhat = Matrix<T>(X.rows(), X.cols());
    st->inv_std.resize(groups);
    const T n = static_cast<T>(X.rows() * cg);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        T mean = 0, var = 0;
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c) mean += X(r, c);
        mean /= n;
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c) var += (X(r, c) - mean) * (X(r, c) - mean);
        var /= n;
        const T inv = T(1) / std::sqrt(var + eps);
        st->inv_std[gi] = inv;
        for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c) st->xhat(r, c) = (X(r, c) - mean) * inv;
    }
    Matrix<T> y = st->xhat;
    const Id me = self();
    return push(std::move(y), any_grad({x}), [this, x, st, groups, cg, me] {
        const Matrix<T>& g = grad(me);
        const T n = static_cast<T>(g.rows() * cg);
        Matrix<T> dx(g.rows(), g.cols());
        for (std::size_t gi = 0; gi < groups; ++gi) {
            T mg = 0, mgx = 0;
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c) {
                    mg += g(r, c);
                    mgx += g(r, c) * st->xhat(r, c);
                }
            mg /= n;
            mgx /= n;
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = gi * cg; c < (gi + 1) * cg; ++c)
                    dx(r, c) = st->inv_std[gi] * (g(r, c) - mg - st->xhat(r, c) * mgx);
        }
        accumulate(x, dx);
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::conv3x3(Id x, Id w, Id bias, std::size_t h, std::size_t wd) {
    const Matrix<T>& X = value(x);
    const Matrix<T>& W = value(w);
    const std::size_t c_in = X.cols();
    if (X.rows() != h * wd) throw ShapeError("conv3x3: input is not " + std::to_string(h) + "x" + std::to_string(wd));
    if (W.rows() != 9 * c_in) throw ShapeError("conv3x3: weight has " + std::to_string(W.rows()) + " rows, expected " +
                                               std::to_string(9 * c_in));
    auto col = std::make_shared<Matrix<T>>(h * wd, 9 * c_in);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx) {
            T* dst = col->data() + (y * wd + xx) * 9 * c_in;
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx, dst += c_in) {
                    const long sy = static_cast<long>(y) + ky - 1, sx = static_cast<long>(xx) + kx - 1;
                    if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(wd)) continue;
                    std::copy_n(X.data() + (static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * c_in,
                                c_in, dst);
                }
        }
    Matrix<T> out = idfuse::matmul(*col, W);
    const Matrix<T>& b = value(bias);
    for (std::size_t r = 0; r < out.rows(); ++r) kernels::axpy(T(1), b.row(0), out.row(r));
    const Id me = self();
    return push(std::move(out), any_grad({x, w, bias}), [this, x, w, bias, col, h, wd, c_in, me] {
        const Matrix<T>& g = grad(me);
        if (nodes_[w].needs_grad) accumulate(w, matmul_tn(*col, g));
        if (nodes_[bias].needs_grad) {
            Matrix<T> s(1, g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r) kernels::axpy(T(1), g.row(r), s.row(0));
            accumulate(bias, s);
        }
        if (!nodes_[x].needs_grad) return;
        const Matrix<T> dcol = matmul_nt(g, value(w));
        Matrix<T> dx(h * wd, c_in);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < wd; ++xx) {
                const T* src = dcol.data() + (y * wd + xx) * 9 * c_in;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx, src += c_in) {
                        const long sy = static_cast<long>(y) + ky - 1, sx = static_cast<long>(xx) + kx - 1;
                        if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(wd)) continue;
                        T* d = dx.data() + (static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * c_in;
                        for (std::size_t c = 0; c < c_in; ++c) d[c] += src[c];
                    }
            }
        accumulate(x, dx);
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::avgpool2(Id x, std::size_t h, std::size_t w) {
    const Matrix<T>& X = value(x);
    if (X.rows() != h * w || h % 2 || w % 2) throw ShapeError("avgpool2: bad grid");
    const std::size_t c = X.cols(), ho = h / 2, wo = w / 2;
    Matrix<T> y(ho * wo, c);
    for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j)
            for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx)
                    kernels::axpy(T(0.25), X.row((2 * i + dy) * w + 2 * j + dx), y.row(i * wo + j));
    const Id me = self();
    return push(std::move(y), any_grad({x}), [this, x, h, w, c, ho, wo, me] {
        const Matrix<T>& g = grad(me);
        Matrix<T> dx(h * w, c);
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j)
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t ddx = 0; ddx < 2; ++ddx)
                        kernels::axpy(T(0.25), g.row(i * wo + j), dx.row((2 * i + dy) * w + 2 * j + ddx));
        accumulate(x, dx);
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::upsample2(Id x, std::size_t h, std::size_t w) {
    const Matrix<T>& X = value(x);
    if (X.rows() != h * w) throw ShapeError("upsample2: bad grid");
    const std::size_t c = X.cols(), wo = 2 * w;
    Matrix<T> y(4 * h * w, c);
    for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < wo; ++j) std::copy_n(X.row((i / 2) * w + j / 2).data(), c, y.row(i * wo + j).data());
    const Id me = self();
    return push(std::move(y), any_grad({x}), [this, x, h, w, c, wo, me] {
        const Matrix<T>& g = grad(me);
        Matrix<T> dx(h * w, c);
        for (std::size_t i = 0; i < 2 * h; ++i)
            for (std::size_t j = 0; j < wo; ++j) kernels::axpy(T(1), g.row(i * wo + j), dx.row((i / 2) * w + j / 2));
        accumulate(x, dx);
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::attention(Id q, Id k, Id v, std::size_t heads) {
    auto caches = std::make_shared<std::vector<AttentionCache<T>>>();
    const bool ng = record_ && any_grad({q, k, v});
    Matrix<T> y = multihead_attention(value(q), value(k), value(v), heads, ng ? caches.get() : nullptr);
    const Id me = self();
    return push(std::move(y), ng, [this, q, k, v, caches, me] {
        auto g = multihead_attention_backward(*caches, grad(me));
        accumulate(q, g.dq);
        accumulate(k, g.dk);
        accumulate(v, g.dv);
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::mixed_attend(Id q, Id k_id, Id v_id, Id k_t, Id v_t, StyleAlign style,
                                             std::size_t heads) {
    auto cache = std::make_shared<MixedAttendCache<T>>();
    const bool ng = record_ && any_grad({q, k_id, v_id, k_t, v_t});
    Matrix<T> y = idfuse::mixed_attend(value(q), value(k_id), value(v_id), value(k_t), value(v_t), style, heads,
                                       ng ? cache.get() : nullptr);
    const Id me = self();
    return push(std::move(y), ng, [this, q, k_id, v_id, k_t, v_t, cache, me] {
        auto g = mixed_attend_backward(*cache, grad(me));
        accumulate(q, g.dq);
        accumulate(k_id, g.dk_id);
        accumulate(v_id, g.dv_id);
        accumulate(k_t, g.dk_t);
        accumulate(v_t, g.dv_t);
    });
}

template <class T>
typename Graph<T>::Id Graph<T>::merge_attend(Id q, Id k_id, Id v_id, Id k_t, Id v_t, StyleAlign style,
                                             bool text_branch, std::size_t heads) {
    static const Matrix<T> empty;
    const Matrix<T>& kt = k_t == none ? empty : value(k_t);
    const Matrix<T>& vt = v_t == none ? empty : value(v_t);
    auto cache = std::make_shared<MergeAttendCache<T>>();
    const bool ng = record_ && any_grad({q, k_id, v_id, k_t, v_t});
    Matrix<T> y = idfuse::merge_attend(value(q), value(k_id), value(v_id), kt, vt, style, text_branch, heads,
                                       ng ? cache.get() : nullptr);
    const Id me = self();
    return push(std::move(y), ng, [this, q, k_id, v_id, k_t, v_t, cache, me] {
        auto g = merge_attend_backward(*cache, grad(me));
        accumulate(q, g.dq);
        accumulate(k_id, g.dk_id);
        accumulate(v_id, g.dv_id);
        if (k_t != none) accumulate(k_t, g.dk_t);
        if (v_t != none) accumulate(v_t, g.dv_t);
    });
}

template <class T>
void Graph<T>::backward(Id out, const Matrix<T>& seed) {
    if (!record_) throw StateError("backward on a graph built without recording");
    if (out >= nodes_.size()) throw StateError("backward: unknown node");
    if (!seed.same_shape(nodes_[out].value)) throw ShapeError("backward: seed shape differs from output");
    if (!nodes_[out].needs_grad) return;
    nodes_[out].grad = seed;
    for (Id id = out + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.back) n.back();
        if (n.param_grad) *n.param_grad += n.grad;
        // Interior gradients are no longer needed once propagated.
        if (!n.param_grad) n.grad = Matrix<T>();
    }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace idfuse
