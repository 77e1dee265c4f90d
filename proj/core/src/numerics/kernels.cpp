#include "o2mag/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "o2mag/numerics/gemm.hpp"

namespace o2mag::kernels {

template <typename T>
std::size_t softmax_rows(const T* in, const T* bias, T* out, std::size_t rows, std::size_t cols) {
  const T neg = static_cast<T>(kNegInf);
  std::size_t fully_masked = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = in + r * cols;
    const T* b = bias ? bias + r * cols : nullptr;
    T* y = out + r * cols;
    if (b) {
      bool any_open = false;
      for (std::size_t c = 0; c < cols; ++c) {
        if (b[c] != neg) {
          any_open = true;
          break;
        }
      }
      if (!any_open) {
        std::fill(y, y + cols, T(0));
        ++fully_masked;
        continue;
      }
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      const T z = b ? x[c] + b[c] : x[c];
      y[c] = z;
      mx = std::max(mx, z);
    }
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = exp_fast(y[c] - mx);
      total += y[c];
    }
    const T inv = T(1) / total;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  return fully_masked;
}

template <typename T>
void attention_logits(const T* q, const T* k, T* out, std::size_t n, std::size_t m, std::size_t d) {
  gemm<T>(false, true, n, m, d, q, d, k, d, out, m, false);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (std::size_t i = 0; i < n * m; ++i) out[i] *= scale;
}

template <typename T>
BasicTensor<T> batched_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() != a.ndim() || a.dim(-1) != b.dim(-2)) {
    throw std::invalid_argument("batched_matmul: shape " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
  for (std::size_t i = 0; i + 2 < a.ndim(); ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw std::invalid_argument("batched_matmul: batch dims " + shape_string(a.shape()) + " vs " +
                                  shape_string(b.shape()));
    }
  }
  const std::size_t n = a.dim(-2), m = a.dim(-1), dv = b.dim(-1);
  const std::size_t batch = a.size() / (n * m);
  Shape os = a.shape();
  os.back() = dv;
  BasicTensor<T> out(os);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    gemm<T>(false, false, n, dv, m, a.ptr() + bi * n * m, m, b.ptr() + bi * m * dv, dv,
            out.ptr() + bi * n * dv, dv, false);
  }
  return out;
}

template <typename T>
BasicTensor<T> attention_forward(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                 BasicTensor<T>* probs) {
  if (q.ndim() < 2 || k.ndim() != q.ndim() || v.ndim() != q.ndim() || q.dim(-1) != k.dim(-1) ||
      k.dim(-2) != v.dim(-2)) {
    throw std::invalid_argument("attention: incompatible q " + shape_string(q.shape()) + ", k " +
                                shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const std::size_t n = q.dim(-2), d = q.dim(-1), m = k.dim(-2), dv = v.dim(-1);
  const std::size_t batch = q.size() / (n * d);
  if (k.size() / (m * d) != batch || v.size() / (m * dv) != batch) {
    throw std::invalid_argument("attention: batch mismatch between q " + shape_string(q.shape()) +
                                " and k " + shape_string(k.shape()));
  }
  Shape ps = q.shape();
  ps.back() = m;
  BasicTensor<T> p(ps);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    T* pb = p.ptr() + bi * n * m;
    attention_logits(q.ptr() + bi * n * d, k.ptr() + bi * m * d, pb, n, m, d);
    softmax_rows<T>(pb, nullptr, pb, n, m);
  }
  BasicTensor<T> out = batched_matmul(p, v);
  if (probs) *probs = std::move(p);
  return out;
}

template std::size_t softmax_rows<float>(const float*, const float*, float*, std::size_t, std::size_t);
template std::size_t softmax_rows<double>(const double*, const double*, double*, std::size_t, std::size_t);
template void attention_logits<float>(const float*, const float*, float*, std::size_t, std::size_t,
                                      std::size_t);
template void attention_logits<double>(const double*, const double*, double*, std::size_t, std::size_t,
                                       std::size_t);
template BasicTensor<float> attention_forward<float>(const BasicTensor<float>&, const BasicTensor<float>&,
                                                     const BasicTensor<float>&, BasicTensor<float>*);
template BasicTensor<double> attention_forward<double>(const BasicTensor<double>&,
                                                       const BasicTensor<double>&,
                                                       const BasicTensor<double>&, BasicTensor<double>*);
template BasicTensor<float> batched_matmul<float>(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> batched_matmul<double>(const BasicTensor<double>&, const BasicTensor<double>&);

}  // namespace o2mag::kernels
