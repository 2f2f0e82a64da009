#pragma once
// Tape-based reverse-mode differentiation over [tokens x channels] matrices.
//
// Nodes are appended in evaluation order; backward() walks the tape in
// reverse. A node carries a gradient only if some parameter with a gradient
// buffer lies upstream of it, so frozen sub-networks cost a forward pass only.

#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "idfuse/attention.hpp"
#include "idfuse/matrix.hpp"

namespace idfuse {

template <class T>
class Graph {
public:
    using Id = std::size_t;
    static constexpr Id none = std::numeric_limits<Id>::max();

    /// With record = false no backward state is kept (inference).
    explicit Graph(bool record = true) : record_(record) {}

    Id constant(Matrix<T> value);
    /// A leaf bound to external storage. grad == nullptr means frozen.
    Id parameter(const Matrix<T>& value, Matrix<T>* grad);

    const Matrix<T>& value(Id id) const { return nodes_.at(id).value; }
    bool requires_grad(Id id) const { return nodes_.at(id).needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    Id matmul(Id x, Id w);             // x [n x a] * w [a x b]
    Id add_row(Id x, Id row);          // x + 1 row, row is [1 x c]
    Id add(Id a, Id b);
    Id concat_cols(Id a, Id b);
    Id concat_rows(Id a, Id b);
    Id silu(Id x);
    Id layer_norm(Id x, T eps = T(1e-5));
    Id group_norm(Id x, std::size_t groups, T eps = T(1e-5));
    /// 3x3 convolution, zero padding, on an h x w grid. w is [9*c_in x c_out], row (ky*3+kx)*c_in + c.
    Id conv3x3(Id x, Id w, Id bias, std::size_t h, std::size_t wd);
    Id avgpool2(Id x, std::size_t h, std::size_t w);
    Id upsample2(Id x, std::size_t h, std::size_t w);

    Id attention(Id q, Id k, Id v, std::size_t heads);
    Id mixed_attend(Id q, Id k_id, Id v_id, Id k_t, Id v_t, StyleAlign style, std::size_t heads);
    /// k_t / v_t may be `none` when there is no text branch and no style target.
    Id merge_attend(Id q, Id k_id, Id v_id, Id k_t, Id v_t, StyleAlign style, bool text_branch, std::size_t heads);

    /// Seeds d(out) and propagates to every parameter gradient buffer (accumulating).
    void backward(Id out, const Matrix<T>& seed);

private:
    struct Node {
        Matrix<T> value;
        Matrix<T> grad;
        bool needs_grad = false;
        Matrix<T>* param_grad = nullptr;
        std::function<void()> back;
    };

    Id push(Matrix<T> value, bool needs_grad, std::function<void()> back = {});
    bool any_grad(std::initializer_list<Id> ids) const;
    void accumulate(Id id, const Matrix<T>& g);
    const Matrix<T>& grad(Id id) const { return nodes_[id].grad; }
    Id self() const { return nodes_.size(); }

    bool record_;
    std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace idfuse
