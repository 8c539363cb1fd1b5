#pragma once

#include <cstdint>

#include "cellmamba/core/parallel.hpp"

namespace cm {

// Dense row-major kernels shared by linear/matmul/conv. All three accumulate
// into C. Parallel splits are over output rows only; each output element is a
// serial sum, so results are identical for any thread count.

// C[M,N] += A[M,K] * B[K,N]
template <typename S>
void gemm_accum(std::int64_t m, std::int64_t k, std::int64_t n,
                const S* a, const S* b, S* c) {
  parallel_for(m, 8, [=](std::int64_t r0, std::int64_t r1) {
    std::int64_t r = r0;
    for (; r + 4 <= r1; r += 4) {
      const S* a0 = a + (r + 0) * k;
      const S* a1 = a + (r + 1) * k;
      const S* a2 = a + (r + 2) * k;
      const S* a3 = a + (r + 3) * k;
      S* c0 = c + (r + 0) * n;
      S* c1 = c + (r + 1) * n;
      S* c2 = c + (r + 2) * n;
      S* c3 = c + (r + 3) * n;
      for (std::int64_t p = 0; p < k; ++p) {
        const S* brow = b + p * n;
        const S x0 = a0[p];
        const S x1 = a1[p];
        const S x2 = a2[p];
        const S x3 = a3[p];
        for (std::int64_t j = 0; j < n; ++j) {
          const S bv = brow[j];
          c0[j] += x0 * bv;
          c1[j] += x1 * bv;
          c2[j] += x2 * bv;
          c3[j] += x3 * bv;
        }
      }
    }
    for (; r < r1; ++r) {
      const S* arow = a + r * k;
      S* crow = c + r * n;
      for (std::int64_t p = 0; p < k; ++p) {
        const S* brow = b + p * n;
        const S x = arow[p];
        for (std::int64_t j = 0; j < n; ++j) crow[j] += x * brow[j];
      }
    }
  });
}

// Explicitly reassociated dot product. The 8 partial lanes vectorize under
// strict FP semantics and the summation order is fixed by the source, so the
// result is reproducible for a given build.
template <typename S>
inline S dot_accum(const S* x, const S* y, std::int64_t n) {
  S lane0 = 0, lane1 = 0, lane2 = 0, lane3 = 0;
  S lane4 = 0, lane5 = 0, lane6 = 0, lane7 = 0;
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    lane0 += x[i + 0] * y[i + 0];
    lane1 += x[i + 1] * y[i + 1];
    lane2 += x[i + 2] * y[i + 2];
    lane3 += x[i + 3] * y[i + 3];
    lane4 += x[i + 4] * y[i + 4];
    lane5 += x[i + 5] * y[i + 5];
    lane6 += x[i + 6] * y[i + 6];
    lane7 += x[i + 7] * y[i + 7];
  }
  S tail = 0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return ((lane0 + lane1) + (lane2 + lane3)) + ((lane4 + lane5) + (lane6 + lane7)) + tail;
}

// C[M,K] += G[M,N] * B[K,N]^T   (dot of row pairs; used for dX = dY * W^T)
template <typename S>
void gemm_nt_accum(std::int64_t m, std::int64_t n, std::int64_t k,
                   const S* g, const S* b, S* c) {
  parallel_for(m, 8, [=](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const S* grow = g + r * n;
      S* crow = c + r * k;
      for (std::int64_t p = 0; p < k; ++p) {
        crow[p] += dot_accum(grow, b + p * n, n);
      }
    }
  });
}

// C[K,N] += A[M,K]^T * G[M,N]   (used for dW = X^T * dY)
template <typename S>
void gemm_tn_accum(std::int64_t m, std::int64_t k, std::int64_t n,
                   const S* a, const S* g, S* c) {
  parallel_for(k, 4, [=](std::int64_t p0, std::int64_t p1) {
    for (std::int64_t r = 0; r < m; ++r) {
      const S* arow = a + r * k;
      const S* grow = g + r * n;
      for (std::int64_t p = p0; p < p1; ++p) {
        const S x = arow[p];
        S* crow = c + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += x * grow[j];
      }
    }
  });
}

}  // namespace cm
