#pragma once
// Dense row-major matrix used for token features, weights and latents.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "idfuse/errors.hpp"
#include "idfuse/kernels.hpp"

namespace idfuse {

template <class T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) throw ShapeError("matrix data size does not match shape");
    }
    /// Nested-list constructor, mainly for tests: Matrix<double>{{1, 0}, {0, 1}}.
    Matrix(std::initializer_list<std::initializer_list<T>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> flat() { return data_; }
    std::span<const T> flat() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    template <class U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }
    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, T s) { return a *= s; }
    friend Matrix operator*(T s, Matrix a) { return a *= s; }

    bool operator==(const Matrix& o) const = default;

    std::string shape_str() const {
        std::ostringstream os;
        os << '[' << rows_ << " x " << cols_ << ']';
        return os.str();
    }

private:
    void require_same(const Matrix& o, const char* op) const {
        if (!same_shape(o)) throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_str() + " vs " + o.shape_str());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

/// a[m x k] * b[k x n]
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: " + a.shape_str() + " * " + b.shape_str());
    Matrix<T> c(a.rows(), b.cols());
    kernels::gemm_nn(a.rows(), b.cols(), a.cols(), a.data(), b.data(), c.data());
    return c;
}

/// a[m x k] * b[n x k]^T
template <class T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + a.shape_str() + " * " + b.shape_str() + "^T");
    Matrix<T> c(a.rows(), b.rows());
    kernels::gemm_nt(a.rows(), b.rows(), a.cols(), a.data(), b.data(), c.data());
    return c;
}

/// a[k x m]^T * b[k x n]
template <class T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_tn: " + a.shape_str() + "^T * " + b.shape_str());
    Matrix<T> c(a.cols(), b.cols());
    kernels::gemm_tn(a.cols(), b.cols(), a.rows(), a.data(), b.data(), c.data());
    return c;
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

/// Row-wise concatenation (stacks tokens).
template <class T>
Matrix<T> concat_rows(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.cols() != b.cols()) throw ShapeError("concat_rows: " + a.shape_str() + " and " + b.shape_str());
    Matrix<T> out(a.rows() + b.rows(), a.cols());
    std::copy(a.storage().begin(), a.storage().end(), out.data());
    std::copy(b.storage().begin(), b.storage().end(), out.data() + a.size());
    return out;
}

/// Column-wise concatenation (stacks channels).
template <class T>
Matrix<T> concat_cols(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.rows() != b.rows()) throw ShapeError("concat_cols: " + a.shape_str() + " and " + b.shape_str());
    Matrix<T> out(a.rows(), a.cols() + b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
        std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return out;
}

template <class T>
Matrix<T> slice_rows(const Matrix<T>& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.rows()) throw ShapeError("slice_rows out of range");
    Matrix<T> out(count, a.cols());
    std::copy(a.data() + begin * a.cols(), a.data() + (begin + count) * a.cols(), out.data());
    return out;
}

template <class T>
Matrix<T> slice_cols(const Matrix<T>& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.cols()) throw ShapeError("slice_cols out of range");
    Matrix<T> out(a.rows(), count);
    for (std::size_t r = 0; r < a.rows(); ++r)
        std::copy(a.row(r).begin() + static_cast<std::ptrdiff_t>(begin),
                  a.row(r).begin() + static_cast<std::ptrdiff_t>(begin + count), out.row(r).begin());
    return out;
}

/// Writes src into the column block [begin, begin + src.cols()) of dst.
template <class T>
void assign_cols(Matrix<T>& dst, std::size_t begin, const Matrix<T>& src) {
    if (dst.rows() != src.rows() || begin + src.cols() > dst.cols()) throw ShapeError("assign_cols out of range");
    for (std::size_t r = 0; r < src.rows(); ++r)
        std::copy(src.row(r).begin(), src.row(r).end(), dst.row(r).begin() + static_cast<std::ptrdiff_t>(begin));
}

template <class T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

template <class T>
bool all_finite(const Matrix<T>& a) {
    return std::all_of(a.storage().begin(), a.storage().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace idfuse
