#include "cemformer/kernel/gemm.hpp"

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <omp.h>
#include <vector>

namespace cem::kernel::gemm {
namespace {

#if defined(__AVX512F__)
constexpr std::size_t kLanes = 8;
constexpr std::size_t kTileRows = 8;
#elif defined(__AVX__)
constexpr std::size_t kLanes = 4;
constexpr std::size_t kTileRows = 6;
#else
constexpr std::size_t kLanes = 2;
constexpr std::size_t kTileRows = 4;
#endif
constexpr std::size_t kTileCols = 2 * kLanes;

using Vec = double __attribute__((vector_size(kLanes * sizeof(double))));

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 16;

inline Vec load(const double* p) {
  Vec v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

// acc = sum over p of A panel column p (kTileRows values) times B panel row p
// (kTileCols values). Both panels are packed depth-major and zero-padded, so
// the tile is always full size and the accumulators stay in registers.
inline void micro_tile(std::size_t depth, const double* a, const double* b, double* out) {
  Vec acc[kTileRows][2] = {};
  for (std::size_t p = 0; p < depth; ++p) {
    const Vec b0 = load(b + p * kTileCols);
    const Vec b1 = load(b + p * kTileCols + kLanes);
    const double* ap = a + p * kTileRows;
    for (std::size_t r = 0; r < kTileRows; ++r) {
      acc[r][0] += ap[r] * b0;
      acc[r][1] += ap[r] * b1;
    }
  }
  std::memcpy(out, acc, sizeof acc);
}

// C[m x n] += op(A)[m x depth] * B[depth x n]. A(i, p) lives at
// a[i * a_row + p * a_depth]; B(p, j) at b[p * b_depth + j * b_col].
void tiled(std::size_t m, std::size_t n, std::size_t depth, const double* a, std::size_t a_row,
           std::size_t a_depth, const double* b, std::size_t b_depth, std::size_t b_col, double* c) {
  if (m == 0 || n == 0 || depth == 0) return;
  const std::size_t col_blocks = (n + kTileCols - 1) / kTileCols;
  const auto row_blocks = static_cast<long>((m + kTileRows - 1) / kTileRows);

  thread_local std::vector<double> b_packed;
  b_packed.resize(col_blocks * depth * kTileCols);
  for (std::size_t jb = 0; jb < col_blocks; ++jb) {
    const std::size_t j0 = jb * kTileCols, cols = std::min(kTileCols, n - j0);
    double* dst = b_packed.data() + jb * depth * kTileCols;
    for (std::size_t p = 0; p < depth; ++p) {
      for (std::size_t j = 0; j < cols; ++j) dst[p * kTileCols + j] = b[p * b_depth + (j0 + j) * b_col];
      for (std::size_t j = cols; j < kTileCols; ++j) dst[p * kTileCols + j] = 0.0;
    }
  }
  const double* bp = b_packed.data();
  auto row_block = [&](std::size_t i0) {
    const std::size_t rows = std::min(kTileRows, m - i0);
    thread_local std::vector<double> panel;
    panel.resize(depth * kTileRows);
    for (std::size_t p = 0; p < depth; ++p) {
      for (std::size_t r = 0; r < rows; ++r) panel[p * kTileRows + r] = a[(i0 + r) * a_row + p * a_depth];
      for (std::size_t r = rows; r < kTileRows; ++r) panel[p * kTileRows + r] = 0.0;
    }
    alignas(64) double tile[kTileRows * kTileCols];
    for (std::size_t jb = 0; jb < col_blocks; ++jb) {
      const std::size_t j0 = jb * kTileCols, cols = std::min(kTileCols, n - j0);
      micro_tile(depth, panel.data(), bp + jb * depth * kTileCols, tile);
      for (std::size_t r = 0; r < rows; ++r) {
        double* crow = c + (i0 + r) * n + j0;
        for (std::size_t j = 0; j < cols; ++j) crow[j] += tile[r * kTileCols + j];
      }
    }
  };

  // Each row block is owned by one thread, so the result does not depend on
  // the team size. Skip the runtime entirely for small or nested calls.
  if (m * n * depth >= kParallelWork && row_blocks > 1 && !omp_in_parallel() && omp_get_max_threads() > 1) {
#pragma omp parallel for schedule(static)
    for (long blk = 0; blk < row_blocks; ++blk) row_block(static_cast<std::size_t>(blk) * kTileRows);
  } else {
    for (long blk = 0; blk < row_blocks; ++blk) row_block(static_cast<std::size_t>(blk) * kTileRows);
  }
}

}  // namespace

void nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  tiled(m, n, k, a, k, 1, b, n, 1, c);
}

void nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  tiled(m, n, k, a, k, 1, b, 1, k, c);
}

void tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  // Output row r of C is column r of A, reduced over the m rows.
  tiled(k, n, m, a, 1, k, b, n, 1, c);
}

}  // namespace cem::kernel::gemm

namespace cem::kernel::reference {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] += s;
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] += s;
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + r] * b[i * n + j];
      c[r * n + j] += s;
    }
}

}  // namespace cem::kernel::reference
