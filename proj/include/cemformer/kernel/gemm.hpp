#pragma once

// Dense row-major GEMM kernels used by the autodiff ops.
//
// Two implementations share one signature set:
//   cem::kernel::gemm       register-tiled, OpenMP-parallel over output rows
//   cem::kernel::reference  naive serial triple loops, kept as the test oracle
//
// Every routine ACCUMULATES into C (C += ...). Callers zero C first when they
// want an overwrite. Each output element is owned by exactly one thread and
// its summation order does not depend on the thread count, so results are
// bitwise reproducible for any OMP_NUM_THREADS.

#include <cstddef>

namespace cem::kernel::gemm {

/// C[m x n] += A[m x k] * B[k x n]
void nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

/// C[m x n] += A[m x k] * B[n x k]^T
void nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

/// C[k x n] += A[m x k]^T * B[m x n]
void tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

}  // namespace cem::kernel::gemm

namespace cem::kernel::reference {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

}  // namespace cem::kernel::reference
