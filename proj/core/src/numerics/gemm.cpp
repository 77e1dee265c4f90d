#include "o2mag/numerics/gemm.hpp"

#include <algorithm>
#include <vector>

namespace o2mag::kernels {
namespace {

constexpr std::size_t kRowBlock = 4;

template <typename T>
constexpr std::size_t col_block() {
  // Two 512-bit lanes per row of the register tile.
  return 128 / sizeof(T);
}

template <typename T>
inline T load_a(bool trans, const T* a, std::size_t lda, std::size_t i, std::size_t p) {
  return trans ? a[p * lda + i] : a[i * lda + p];
}

template <typename T>
inline T load_b(bool trans, const T* b, std::size_t ldb, std::size_t p, std::size_t j) {
  return trans ? b[j * ldb + p] : b[p * ldb + j];
}

// acc[r][c] = C or 0, then acc += sum_p A[r,p] * B[p,c] in ascending p.
template <typename T, std::size_t NR>
void micro_kernel(std::size_t k, const T* __restrict ap, const T* __restrict bp, T* __restrict acc) {
  T tile[kRowBlock][NR];
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    for (std::size_t c = 0; c < NR; ++c) tile[r][c] = acc[r * NR + c];
  }
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = bp + p * NR;
    const T* acol = ap + p * kRowBlock;
    for (std::size_t r = 0; r < kRowBlock; ++r) {
      const T av = acol[r];
      for (std::size_t c = 0; c < NR; ++c) tile[r][c] += av * brow[c];
    }
  }
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    for (std::size_t c = 0; c < NR; ++c) acc[r * NR + c] = tile[r][c];
  }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) {
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
    }
    return;
  }
  constexpr std::size_t NR = col_block<T>();
  const std::size_t row_blocks = (m + kRowBlock - 1) / kRowBlock;

  // Pack A into row blocks: ap[blk][p][r].
  std::vector<T> ap(row_blocks * k * kRowBlock, T(0));
  for (std::size_t blk = 0; blk < row_blocks; ++blk) {
    T* dst = ap.data() + blk * k * kRowBlock;
    for (std::size_t r = 0; r < kRowBlock; ++r) {
      const std::size_t i = blk * kRowBlock + r;
      if (i >= m) break;
      for (std::size_t p = 0; p < k; ++p) dst[p * kRowBlock + r] = load_a(trans_a, a, lda, i, p);
    }
  }

  std::vector<T> bp(k * NR);
  alignas(64) T acc[kRowBlock * NR];
  for (std::size_t j0 = 0; j0 < n; j0 += NR) {
    const std::size_t nc = std::min(NR, n - j0);
    if (nc == NR && !trans_b) {
      for (std::size_t p = 0; p < k; ++p) {
        std::copy_n(b + p * ldb + j0, NR, bp.data() + p * NR);
      }
    } else {
      for (std::size_t p = 0; p < k; ++p) {
        T* dst = bp.data() + p * NR;
        for (std::size_t cc = 0; cc < NR; ++cc) {
          dst[cc] = cc < nc ? load_b(trans_b, b, ldb, p, j0 + cc) : T(0);
        }
      }
    }
    for (std::size_t blk = 0; blk < row_blocks; ++blk) {
      const std::size_t i0 = blk * kRowBlock;
      const std::size_t mr = std::min(kRowBlock, m - i0);
      for (std::size_t r = 0; r < kRowBlock; ++r) {
        for (std::size_t cc = 0; cc < NR; ++cc) {
          acc[r * NR + cc] = (accumulate && r < mr && cc < nc) ? c[(i0 + r) * ldc + j0 + cc] : T(0);
        }
      }
      micro_kernel<T, NR>(k, ap.data() + blk * k * kRowBlock, bp.data(), acc);
      for (std::size_t r = 0; r < mr; ++r) {
        std::copy_n(acc + r * NR, nc, c + (i0 + r) * ldc + j0);
      }
    }
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*, std::size_t,
                          const float*, std::size_t, float*, std::size_t, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           std::size_t, const double*, std::size_t, double*, std::size_t, bool);

}  // namespace o2mag::kernels
