#pragma once
// Data-parallel inner loops used by every matrix operation in the library.
//
// Each primitive has a scalar reference implementation and, where the target
// supports it, a vectorized one (AVX2+FMA on x86-64, NEON on AArch64). The
// variant is chosen once at startup from the CPU feature set; setting
// IDFUSE_KERNELS=scalar in the environment forces the reference path.

#include <cstddef>
#include <span>
#include <string_view>

namespace idfuse::kernels {

enum class Isa { scalar, avx2, neon };

/// Function table for one instruction set. All matrices are row-major and
/// dense; leading dimensions equal the column counts.
struct KernelTable {
    Isa isa;

    float (*dot_f32)(const float* a, const float* b, std::size_t n);
    double (*dot_f64)(const double* a, const double* b, std::size_t n);

    // y += alpha * x
    void (*axpy_f32)(float alpha, const float* x, float* y, std::size_t n);
    void (*axpy_f64)(double alpha, const double* x, double* y, std::size_t n);

    // C[m x n] += A[m x k] * B[k x n]
    void (*gemm_nn_f32)(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);
    void (*gemm_nn_f64)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

    // C[m x n] += A[m x k] * B[n x k]^T
    void (*gemm_nt_f32)(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);
    void (*gemm_nt_f64)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

    // C[m x n] += A[k x m]^T * B[k x n]
    void (*gemm_tn_f32)(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);
    void (*gemm_tn_f64)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
};

const KernelTable& scalar_table();
/// nullptr when the variant was not compiled in or the CPU lacks the feature.
const KernelTable* avx2_table();
const KernelTable* neon_table();

/// The table selected for this process (fixed after first call).
const KernelTable& active();

std::string_view isa_name(Isa isa);

// Typed front-ends over active(); these are what the rest of the library calls.
inline float dot(std::span<const float> a, std::span<const float> b) {
    return active().dot_f32(a.data(), b.data(), a.size());
}
inline double dot(std::span<const double> a, std::span<const double> b) {
    return active().dot_f64(a.data(), b.data(), a.size());
}
inline void axpy(float alpha, std::span<const float> x, std::span<float> y) {
    active().axpy_f32(alpha, x.data(), y.data(), x.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    active().axpy_f64(alpha, x.data(), y.data(), x.size());
}
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    active().gemm_nn_f32(m, n, k, a, b, c);
}
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    active().gemm_nn_f64(m, n, k, a, b, c);
}
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    active().gemm_nt_f32(m, n, k, a, b, c);
}
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    active().gemm_nt_f64(m, n, k, a, b, c);
}
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    active().gemm_tn_f32(m, n, k, a, b, c);
}
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    active().gemm_tn_f64(m, n, k, a, b, c);
}

}  // namespace idfuse::kernels
