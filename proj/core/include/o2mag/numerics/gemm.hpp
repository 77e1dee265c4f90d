#pragma once

#include <cstddef>

namespace o2mag::kernels {

/// C[m x n] (+)= op(A)[m x k] * op(B)[k x n], row-major with leading dimensions.
/// Each output element is accumulated over k in ascending order, so results
/// are independent of blocking and reproducible run to run.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

}  // namespace o2mag::kernels
