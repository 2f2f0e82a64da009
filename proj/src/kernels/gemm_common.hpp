#pragma once
// GEMM loop nests shared by every ISA file. Each translation unit instantiates
// these with its own dot/axpy so the inner loops compile for that target.

#include <cstddef>

namespace idfuse::kernels::detail {

template <class T, class Axpy>
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, Axpy axpy) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T alpha = arow[p];
            if (alpha != T(0)) axpy(alpha, b + p * n, crow, n);
        }
    }
}

template <class T, class Dot>
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, Dot dot) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
    }
}

template <class T, class Axpy>
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, Axpy axpy) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T alpha = arow[i];
            if (alpha != T(0)) axpy(alpha, brow, c + i * n, n);
        }
    }
}

}  // namespace idfuse::kernels::detail
