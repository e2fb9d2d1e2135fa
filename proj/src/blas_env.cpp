#include "aps/blas.hpp"

#include <cblas-openblas.h>

#include <cstdlib>

extern "C" void openblas_set_num_threads(int);

namespace {

// Must run before OpenBLAS's own loader constructor: the bundled runtime
// detection misreads this CPU as a pre-AVX core and falls back to kernels
// that are ~3x slower. Priority 101 orders us ahead of the (default-priority)
// BLAS initializer under static linking. setenv with overwrite=0 keeps any
// user-provided override in effect.
__attribute__((constructor(101))) void select_blas_kernels() {
    __builtin_cpu_init();
    if (__builtin_cpu_supports("avx512f")) {
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
    } else if (__builtin_cpu_supports("avx2")) {
        setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
    }
}

bool ensure_single_thread() {
    // Single-threaded BLAS keeps reductions in a fixed order, which the
    // bit-exact training determinism contract relies on.
    openblas_set_num_threads(1);
    return true;
}

const bool g_blas_ready = ensure_single_thread();

}  // namespace

namespace aps {

void gemm(bool transpose_a, std::int64_t m, std::int64_t n, std::int64_t k,
          const float* a, const float* b, float* c, bool accumulate) {
    (void)g_blas_ready;
    cblas_sgemm(CblasRowMajor, transpose_a ? CblasTrans : CblasNoTrans, CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0f, a,
                static_cast<int>(transpose_a ? m : k), b, static_cast<int>(n),
                accumulate ? 1.0f : 0.0f, c, static_cast<int>(n));
}

void gemm(bool transpose_a, std::int64_t m, std::int64_t n, std::int64_t k,
          const double* a, const double* b, double* c, bool accumulate) {
    (void)g_blas_ready;
    cblas_dgemm(CblasRowMajor, transpose_a ? CblasTrans : CblasNoTrans, CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
                static_cast<int>(transpose_a ? m : k), b, static_cast<int>(n),
                accumulate ? 1.0 : 0.0, c, static_cast<int>(n));
}

}  // namespace aps
