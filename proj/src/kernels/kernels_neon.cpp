// AArch64 only; NEON is part of the base ISA there so no runtime check is needed.
#include <arm_neon.h>

#include "idfuse/kernels.hpp"

#include "gemm_common.hpp"

namespace idfuse::kernels {
namespace {

float dot_f32(const float* a, const float* b, std::size_t n) {
    float32x4_t acc0 = vdupq_n_f32(0.0f);
    float32x4_t acc1 = vdupq_n_f32(0.0f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
        acc1 = vfmaq_f32(acc1, vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
    }
    for (; i + 4 <= n; i += 4) acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
    float acc = vaddvq_f32(vaddq_f32(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
        acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
    }
    for (; i + 2 <= n; i += 2) acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
    const float32x4_t va = vdupq_n_f32(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_f32(vld1q_f32(y + i), va, vld1q_f32(x + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
    const float64x2_t va = vdupq_n_f64(alpha);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    detail::gemm_nn(m, n, k, a, b, c, axpy_f32);
}
void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    detail::gemm_nn(m, n, k, a, b, c, axpy_f64);
}
void gemm_nt_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    detail::gemm_nt(m, n, k, a, b, c, dot_f32);
}
void gemm_nt_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    detail::gemm_nt(m, n, k, a, b, c, dot_f64);
}
void gemm_tn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    detail::gemm_tn(m, n, k, a, b, c, axpy_f32);
}
void gemm_tn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    detail::gemm_tn(m, n, k, a, b, c, axpy_f64);
}

}  // namespace

const KernelTable& neon_table_unchecked() {
    static const KernelTable table{
        Isa::neon,   dot_f32,     dot_f64,     axpy_f32,    axpy_f64,    gemm_nn_f32,
        gemm_nn_f64, gemm_nt_f32, gemm_nt_f64, gemm_tn_f32, gemm_tn_f64,
    };
    return table;
}

}  // namespace idfuse::kernels
