#include "idfuse/kernels.hpp"

#include "gemm_common.hpp"

namespace idfuse::kernels {
namespace {

template <class T>
T dot_ref(const T* a, const T* b, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <class T>
void axpy_ref(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void gemm_nn_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    detail::gemm_nn(m, n, k, a, b, c, axpy_ref<T>);
}
template <class T>
void gemm_nt_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    detail::gemm_nt(m, n, k, a, b, c, dot_ref<T>);
}
template <class T>
void gemm_tn_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    detail::gemm_tn(m, n, k, a, b, c, axpy_ref<T>);
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{
        Isa::scalar,
        dot_ref<float>,     dot_ref<double>,     axpy_ref<float>,     axpy_ref<double>,
        gemm_nn_ref<float>, gemm_nn_ref<double>, gemm_nt_ref<float>,  gemm_nt_ref<double>,
        gemm_tn_ref<float>, gemm_tn_ref<double>,
    };
    return table;
}

}  // namespace idfuse::kernels
