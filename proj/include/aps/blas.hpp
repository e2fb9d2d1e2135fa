#pragma once

#include <cstdint>

namespace aps {

// Row-major GEMM: C[m x n] = A[m x k] * B[k x n] (+ C when accumulate).
// transpose_a reads A as the transpose of an [k x m] row-major buffer.
// Backed by single-threaded OpenBLAS; see blas_env.cpp for kernel selection.
void gemm(bool transpose_a, std::int64_t m, std::int64_t n, std::int64_t k,
          const float* a, const float* b, float* c, bool accumulate);
void gemm(bool transpose_a, std::int64_t m, std::int64_t n, std::int64_t k,
          const double* a, const double* b, double* c, bool accumulate);

}  // namespace aps
