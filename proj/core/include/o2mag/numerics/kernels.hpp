#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>

#include "o2mag/numerics/tensor.hpp"

namespace o2mag {

/// Additive bias marking a key as excluded from softmax. Finite so that
/// arithmetic before normalization never produces NaN.
inline constexpr float kNegInf = -1e9f;

namespace kernels {

/// exp via range reduction and a degree-6 polynomial (about 2 ulp). Branch-free
/// so loops over it vectorize; returns exactly 0 below -87, so NEG_INF-biased
/// logits still vanish. The double overload forwards to std::exp.
inline float exp_fast(float x) {
  const float xc = std::min(std::max(x, -87.0f), 88.0f);
  // round-to-nearest via the 1.5 * 2^23 trick
  const float n = (xc * 1.44269504088896341f + 12582912.0f) - 12582912.0f;
  const float r = xc - n * 0.693145751953125f - n * 1.428606765330187045e-06f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const float scale = std::bit_cast<float>((static_cast<std::int32_t>(n) + 127) << 23);
  return x < -87.0f ? 0.0f : p * scale;
}
inline double exp_fast(double x) { return std::exp(x); }

/// Row-wise softmax of `in` (rows x cols) plus optional additive `bias`.
/// Rows whose bias is kNegInf everywhere produce all zeros; the count of such
/// rows is returned so callers can react.
template <typename T>
std::size_t softmax_rows(const T* in, const T* bias, T* out, std::size_t rows, std::size_t cols);

/// Scaled dot-product logits: out[n x m] = q[n x d] k[m x d]^T / sqrt(d).
template <typename T>
void attention_logits(const T* q, const T* k, T* out, std::size_t n, std::size_t m, std::size_t d);

/// softmax(q k^T / sqrt(d)) v for tensors shaped [..., n, d], [..., m, d], [..., m, dv].
/// When `probs` is given it receives the attention maps [..., n, m].
template <typename T>
BasicTensor<T> attention_forward(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                 BasicTensor<T>* probs = nullptr);

/// Batched matrix product for [..., n, m] x [..., m, dv] with identical batch dims.
template <typename T>
BasicTensor<T> batched_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace kernels
}  // namespace o2mag
