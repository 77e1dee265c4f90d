#include "o2mag/numerics/ops.hpp"

#include <cmath>
#include <algorithm>
#include <memory>
#include <type_traits>

#include "o2mag/numerics/gemm.hpp"
#include "o2mag/numerics/kernels.hpp"

namespace o2mag::ops {
namespace {

template <typename T>
using Tp = BasicTape<T>;
template <typename T>
using Tn = BasicTensor<T>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                              shape_string(b));
}

template <typename T>
Tp<T>* common_tape(const char* op, V<T> a, V<T> b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
  }
  return a.tape;
}

template <typename T>
void add_into(Tn<T>& dst, const Tn<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

template <typename T>
T sigmoid_scalar(T x) {
  if constexpr (std::is_same_v<T, float>) {
    return 1.0f / (1.0f + kernels::exp_fast(-x));
  } else {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  }
}

// im2col for one image: col[(c*kh + i)*kw + j][oy*wo + ox].
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  const long W = static_cast<long>(w), H = static_cast<long>(h), P = static_cast<long>(pad);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        // output columns whose input column lands inside the image
        long lo = 0, hi = static_cast<long>(wo);
        while (lo < hi && lo * static_cast<long>(stride) + static_cast<long>(kj) - P < 0) ++lo;
        while (hi > lo && (hi - 1) * static_cast<long>(stride) + static_cast<long>(kj) - P >= W) --hi;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          T* dst = row + oy * wo;
          const long iy = static_cast<long>(oy * stride + ki) - P;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + wo, T(0));
          if (stride == 1) {
            std::copy(src + lo + static_cast<long>(kj) - P, src + hi + static_cast<long>(kj) - P, dst + lo);
          } else {
            for (long ox = lo; ox < hi; ++ox) dst[ox] = src[ox * static_cast<long>(stride) + static_cast<long>(kj) - P];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  const long W = static_cast<long>(w), H = static_cast<long>(h), P = static_cast<long>(pad);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ci * kh + ki) * kw + kj) * ho * wo;
        long lo = 0, hi = static_cast<long>(wo);
        while (lo < hi && lo * static_cast<long>(stride) + static_cast<long>(kj) - P < 0) ++lo;
        while (hi > lo && (hi - 1) * static_cast<long>(stride) + static_cast<long>(kj) - P >= W) --hi;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - P;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * wo;
          T* dst = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (long ox = lo; ox < hi; ++ox) dst[ox * static_cast<long>(stride) + static_cast<long>(kj) - P] += src[ox];
        }
      }
    }
  }
}

struct MatmulDims {
  std::size_t batch_a, batch_b, batch, m, k, n;
  Shape out_shape;
};

MatmulDims matmul_dims(const Shape& as, const Shape& bs, bool trans_b) {
  if (as.size() < 2 || bs.size() < 2) shape_error("matmul", as, bs);
  MatmulDims d{};
  d.m = as[as.size() - 2];
  d.k = as.back();
  const std::size_t bk = trans_b ? bs.back() : bs[bs.size() - 2];
  d.n = trans_b ? bs[bs.size() - 2] : bs.back();
  if (bk != d.k) shape_error("matmul", as, bs);
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  d.batch_a = shape_numel(a_batch);
  d.batch_b = shape_numel(b_batch);
  Shape batch_shape;
  if (a_batch == b_batch) {
    batch_shape = a_batch;
  } else if (b_batch.empty()) {
    batch_shape = a_batch;
  } else if (a_batch.empty()) {
    batch_shape = b_batch;
  } else {
    shape_error("matmul", as, bs);
  }
  d.batch = shape_numel(batch_shape);
  d.out_shape = batch_shape;
  d.out_shape.push_back(d.m);
  d.out_shape.push_back(d.n);
  return d;
}

template <typename T>
void group_stats(const Tn<T>& x, std::size_t groups, T eps, std::vector<T>& mean, std::vector<T>& rstd) {
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.size() / (n * c);
  const std::size_t cg = c / groups;
  const std::size_t count = cg * spatial;
  mean.assign(n * groups, T(0));
  rstd.assign(n * groups, T(0));
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* p = x.ptr() + (ni * c + g * cg) * spatial;
      T s = 0;
      for (std::size_t i = 0; i < count; ++i) s += p[i];
      const T mu = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t i = 0; i < count; ++i) v += (p[i] - mu) * (p[i] - mu);
      v /= static_cast<T>(count);
      mean[ni * groups + g] = mu;
      rstd[ni * groups + g] = T(1) / std::sqrt(v + eps);
    }
  }
}

}  // namespace

template <typename T>
V<T> add(V<T> a, V<T> b) {
  auto* tape = common_tape("add", a, b);
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  const std::size_t ia = a.id, ib = b.id;
  return tape->record(
      "add", {a, b},
      [ia, ib](const Tp<T>& t) {
        Tn<T> out = t.value(ia);
        add_into(out, t.value(ib));
        return out;
      },
      [ia, ib](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        if (t.requires_grad(ia)) add_into(t.grad_buffer(ia), g);
        if (t.requires_grad(ib)) add_into(t.grad_buffer(ib), g);
      });
}

template <typename T>
V<T> sub(V<T> a, V<T> b) {
  auto* tape = common_tape("sub", a, b);
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  const std::size_t ia = a.id, ib = b.id;
  return tape->record(
      "sub", {a, b},
      [ia, ib](const Tp<T>& t) {
        Tn<T> out = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
        return out;
      },
      [ia, ib](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        if (t.requires_grad(ia)) add_into(t.grad_buffer(ia), g);
        if (t.requires_grad(ib)) {
          Tn<T>& gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      });
}

template <typename T>
V<T> mul(V<T> a, V<T> b) {
  auto* tape = common_tape("mul", a, b);
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  const std::size_t ia = a.id, ib = b.id;
  return tape->record(
      "mul", {a, b},
      [ia, ib](const Tp<T>& t) {
        Tn<T> out = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return out;
      },
      [ia, ib](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& av = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        if (t.requires_grad(ia)) {
          Tn<T>& ga = t.grad_buffer(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
          Tn<T>& gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      });
}

template <typename T>
V<T> scale(V<T> a, T s) {
  const std::size_t ia = a.id;
  return a.tape->record(
      "scale", {a},
      [ia, s](const Tp<T>& t) {
        Tn<T> out = t.value(ia);
        for (auto& v : out.data()) v *= s;
        return out;
      },
      [ia, s](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        Tn<T>& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
      });
}

template <typename T>
V<T> add_channel(V<T> x, V<T> b) {
  auto* tape = common_tape("add_channel", x, b);
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (xs.size() < 2) shape_error("add_channel", xs, bs);
  const std::size_t n = xs[0], c = xs[1];
  const std::size_t inner = x.value().size() / (n * c);
  const bool per_sample = bs.size() == 2;
  if (!((bs.size() == 1 && bs[0] == c) || (per_sample && bs[0] == n && bs[1] == c))) {
    shape_error("add_channel", xs, bs);
  }
  const std::size_t ix = x.id, ib = b.id;
  return tape->record(
      "add_channel", {x, b},
      [=](const Tp<T>& t) {
        Tn<T> out = t.value(ix);
        const Tn<T>& bv = t.value(ib);
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t ci = 0; ci < c; ++ci) {
            const T add = bv[per_sample ? ni * c + ci : ci];
            T* p = out.ptr() + (ni * c + ci) * inner;
            for (std::size_t i = 0; i < inner; ++i) p[i] += add;
          }
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        if (t.requires_grad(ix)) add_into(t.grad_buffer(ix), g);
        if (t.requires_grad(ib)) {
          Tn<T>& gb = t.grad_buffer(ib);
          for (std::size_t ni = 0; ni < n; ++ni) {
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T* p = g.ptr() + (ni * c + ci) * inner;
              T s = 0;
              for (std::size_t i = 0; i < inner; ++i) s += p[i];
              gb[per_sample ? ni * c + ci : ci] += s;
            }
          }
        }
      });
}

template <typename T>
V<T> silu(V<T> x) {
  const std::size_t ix = x.id;
  return x.tape->record(
      "silu", {x},
      [ix](const Tp<T>& t) {
        Tn<T> out = t.value(ix);
        for (auto& v : out.data()) v = v * sigmoid_scalar(v);
        return out;
      },
      [ix](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& xv = t.value(ix);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = sigmoid_scalar(xv[i]);
          gx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
        }
      });
}

template <typename T>
V<T> sigmoid(V<T> x) {
  const std::size_t ix = x.id;
  return x.tape->record(
      "sigmoid", {x},
      [ix](const Tp<T>& t) {
        Tn<T> out = t.value(ix);
        for (auto& v : out.data()) v = sigmoid_scalar(v);
        return out;
      },
      [ix](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& y = t.value(self);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
      });
}

template <typename T>
V<T> linear(V<T> x, V<T> w, std::optional<std::type_identity_t<V<T>>> b) {
  auto* tape = common_tape("linear", x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.empty() || ws.size() != 2 || ws[1] != xs.back()) shape_error("linear", xs, ws);
  const std::size_t in = ws[1], out_f = ws[0];
  if (b && (b->shape().size() != 1 || b->shape()[0] != out_f)) shape_error("linear", ws, b->shape());
  const std::size_t rows = x.value().size() / in;
  Shape os = xs;
  os.back() = out_f;
  const std::size_t ix = x.id, iw = w.id;
  const bool has_b = b.has_value();
  const std::size_t ib = has_b ? b->id : 0;
  std::vector<V<T>> inputs{x, w};
  if (has_b) inputs.push_back(*b);
  return tape->record(
      "linear", inputs,
      [=](const Tp<T>& t) {
        Tn<T> out(os);
        kernels::gemm<T>(false, true, rows, out_f, in, t.value(ix).ptr(), in, t.value(iw).ptr(), in,
                         out.ptr(), out_f, false);
        if (has_b) {
          const Tn<T>& bv = t.value(ib);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < out_f; ++o) out[r * out_f + o] += bv[o];
          }
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        if (t.requires_grad(ix)) {
          kernels::gemm<T>(false, false, rows, in, out_f, g.ptr(), out_f, t.value(iw).ptr(), in,
                           t.grad_buffer(ix).ptr(), in, true);
        }
        if (t.requires_grad(iw)) {
          kernels::gemm<T>(true, false, out_f, in, rows, g.ptr(), out_f, t.value(ix).ptr(), in,
                           t.grad_buffer(iw).ptr(), in, true);
        }
        if (has_b && t.requires_grad(ib)) {
          Tn<T>& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
          }
        }
      });
}

template <typename T>
V<T> matmul(V<T> a, V<T> b, bool trans_b) {
  auto* tape = common_tape("matmul", a, b);
  const MatmulDims d = matmul_dims(a.shape(), b.shape(), trans_b);
  const std::size_t ia = a.id, ib = b.id;
  return tape->record(
      "matmul", {a, b},
      [=](const Tp<T>& t) {
        Tn<T> out(d.out_shape);
        const Tn<T>& av = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        for (std::size_t i = 0; i < d.batch; ++i) {
          const T* ap = av.ptr() + (d.batch_a == 1 ? 0 : i) * d.m * d.k;
          const T* bp = bv.ptr() + (d.batch_b == 1 ? 0 : i) * d.k * d.n;
          kernels::gemm<T>(false, trans_b, d.m, d.n, d.k, ap, d.k, bp, trans_b ? d.k : d.n,
                           out.ptr() + i * d.m * d.n, d.n, false);
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& av = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        const bool need_a = t.requires_grad(ia), need_b = t.requires_grad(ib);
        for (std::size_t i = 0; i < d.batch; ++i) {
          const std::size_t oa = (d.batch_a == 1 ? 0 : i) * d.m * d.k;
          const std::size_t ob = (d.batch_b == 1 ? 0 : i) * d.k * d.n;
          const T* gp = g.ptr() + i * d.m * d.n;
          if (need_a) {
            // dA = dC * op(B)^T
            kernels::gemm<T>(false, !trans_b, d.m, d.k, d.n, gp, d.n, bv.ptr() + ob, trans_b ? d.k : d.n,
                             t.grad_buffer(ia).ptr() + oa, d.k, true);
          }
          if (need_b) {
            if (trans_b) {
              // B is [n, k]: dB = dC^T A
              kernels::gemm<T>(true, false, d.n, d.k, d.m, gp, d.n, av.ptr() + oa, d.k,
                               t.grad_buffer(ib).ptr() + ob, d.k, true);
            } else {
              kernels::gemm<T>(true, false, d.k, d.n, d.m, av.ptr() + oa, d.k, gp, d.n,
                               t.grad_buffer(ib).ptr() + ob, d.n, true);
            }
          }
        }
      });
}

template <typename T>
V<T> softmax_lastdim(V<T> x, const Tn<T>* mask_bias, std::size_t* fully_masked) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw std::invalid_argument("softmax_lastdim: scalar input");
  if (mask_bias && mask_bias->shape() != xs) shape_error("softmax_lastdim", xs, mask_bias->shape());
  const std::size_t cols = xs.back();
  const std::size_t rows = cols == 0 ? 0 : x.value().size() / cols;
  auto bias = mask_bias ? std::make_shared<const Tn<T>>(*mask_bias) : nullptr;
  const std::size_t ix = x.id;
  auto masked = std::make_shared<std::size_t>(0);
  V<T> out = x.tape->record(
      "softmax", {x},
      [=](const Tp<T>& t) {
        Tn<T> y(t.value(ix).shape());
        *masked = kernels::softmax_rows<T>(t.value(ix).ptr(), bias ? bias->ptr() : nullptr, y.ptr(), rows, cols);
        return y;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& y = t.value(self);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* yr = y.ptr() + r * cols;
          const T* gr = g.ptr() + r * cols;
          T dot = 0;
          for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
          T* out_r = gx.ptr() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) out_r[c] += yr[c] * (gr[c] - dot);
        }
      });
  if (fully_masked) *fully_masked = *masked;
  return out;
}

template <typename T>
V<T> attention(V<T> q, V<T> k, V<T> v) {
  auto* tape = common_tape("attention", q, k);
  common_tape("attention", q, v);
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  auto probs = std::make_shared<Tn<T>>();
  return tape->record(
      "attention", {q, k, v},
      [=](const Tp<T>& t) { return kernels::attention_forward(t.value(iq), t.value(ik), t.value(iv), probs.get()); },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& qv = t.value(iq);
        const Tn<T>& kv = t.value(ik);
        const Tn<T>& vv = t.value(iv);
        const Tn<T>& p = *probs;
        const std::size_t n = qv.dim(-2), d = qv.dim(-1), m = kv.dim(-2), dv = vv.dim(-1);
        const std::size_t batch = qv.size() / (n * d);
        const T sc = T(1) / std::sqrt(static_cast<T>(d));
        std::vector<T> dp(n * m);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* pb = p.ptr() + bi * n * m;
          const T* gb = g.ptr() + bi * n * dv;
          if (t.requires_grad(iv)) {
            kernels::gemm<T>(true, false, m, dv, n, pb, m, gb, dv, t.grad_buffer(iv).ptr() + bi * m * dv, dv, true);
          }
          if (!t.requires_grad(iq) && !t.requires_grad(ik)) continue;
          kernels::gemm<T>(false, true, n, m, dv, gb, dv, vv.ptr() + bi * m * dv, dv, dp.data(), m, false);
          for (std::size_t r = 0; r < n; ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < m; ++c) dot += pb[r * m + c] * dp[r * m + c];
            for (std::size_t c = 0; c < m; ++c) dp[r * m + c] = pb[r * m + c] * (dp[r * m + c] - dot) * sc;
          }
          if (t.requires_grad(iq)) {
            kernels::gemm<T>(false, false, n, d, m, dp.data(), m, kv.ptr() + bi * m * d, d,
                             t.grad_buffer(iq).ptr() + bi * n * d, d, true);
          }
          if (t.requires_grad(ik)) {
            kernels::gemm<T>(true, false, m, d, n, dp.data(), m, qv.ptr() + bi * n * d, d,
                             t.grad_buffer(ik).ptr() + bi * m * d, d, true);
          }
        }
      });
}

template <typename T>
V<T> conv2d(V<T> x, V<T> w, V<T> b, std::size_t stride, std::size_t pad) {
  auto* tape = common_tape("conv2d", x, w);
  common_tape("conv2d", x, b);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || stride == 0) shape_error("conv2d", xs, ws);
  if (b.shape().size() != 1 || b.shape()[0] != ws[0]) shape_error("conv2d", ws, b.shape());
  const std::size_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const std::size_t o = ws[0], kh = ws[2], kw = ws[3];
  if (h + 2 * pad < kh || wd + 2 * pad < kw) shape_error("conv2d", xs, ws);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
  const std::size_t ckk = c * kh * kw, hw = ho * wo;
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return tape->record(
      "conv2d", {x, w, b},
      [=](const Tp<T>& t) {
        Tn<T> out(Shape{n, o, ho, wo});
        std::vector<T> col(ckk * hw);
        const Tn<T>& xv = t.value(ix);
        const Tn<T>& wv = t.value(iw);
        const Tn<T>& bv = t.value(ib);
        for (std::size_t ni = 0; ni < n; ++ni) {
          im2col(xv.ptr() + ni * c * h * wd, c, h, wd, kh, kw, stride, pad, ho, wo, col.data());
          T* op = out.ptr() + ni * o * hw;
          kernels::gemm<T>(false, false, o, hw, ckk, wv.ptr(), ckk, col.data(), hw, op, hw, false);
          for (std::size_t oi = 0; oi < o; ++oi) {
            for (std::size_t i = 0; i < hw; ++i) op[oi * hw + i] += bv[oi];
          }
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& xv = t.value(ix);
        const Tn<T>& wv = t.value(iw);
        const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw), need_b = t.requires_grad(ib);
        std::vector<T> col(ckk * hw);
        for (std::size_t ni = 0; ni < n; ++ni) {
          const T* gp = g.ptr() + ni * o * hw;
          if (need_w) {
            im2col(xv.ptr() + ni * c * h * wd, c, h, wd, kh, kw, stride, pad, ho, wo, col.data());
            kernels::gemm<T>(false, true, o, ckk, hw, gp, hw, col.data(), hw, t.grad_buffer(iw).ptr(), ckk, true);
          }
          if (need_b) {
            Tn<T>& gb = t.grad_buffer(ib);
            for (std::size_t oi = 0; oi < o; ++oi) {
              T s = 0;
              for (std::size_t i = 0; i < hw; ++i) s += gp[oi * hw + i];
              gb[oi] += s;
            }
          }
          if (need_x) {
            kernels::gemm<T>(true, false, ckk, hw, o, wv.ptr(), ckk, gp, hw, col.data(), hw, false);
            col2im_add(col.data(), c, h, wd, kh, kw, stride, pad, ho, wo, t.grad_buffer(ix).ptr() + ni * c * h * wd);
          }
        }
      });
}

template <typename T>
V<T> group_norm(V<T> x, V<T> gamma, V<T> beta, std::size_t groups, T eps) {
  auto* tape = common_tape("group_norm", x, gamma);
  common_tape("group_norm", x, beta);
  const Shape& xs = x.shape();
  if (xs.size() < 2 || groups == 0 || xs[1] % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(groups) + " groups do not divide channels of " +
                                shape_string(xs));
  }
  const std::size_t n = xs[0], c = xs[1];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) shape_error("group_norm", xs, gamma.shape());
  const std::size_t spatial = x.value().size() / (n * c);
  const std::size_t cg = c / groups;
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return tape->record(
      "group_norm", {x, gamma, beta},
      [=](const Tp<T>& t) {
        const Tn<T>& xv = t.value(ix);
        const Tn<T>& gv = t.value(ig);
        const Tn<T>& bv = t.value(ib);
        std::vector<T> mu, rs;
        group_stats(xv, groups, eps, mu, rs);
        Tn<T> out(xs);
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t ci = 0; ci < c; ++ci) {
            const std::size_t gi = ni * groups + ci / cg;
            const T* p = xv.ptr() + (ni * c + ci) * spatial;
            T* q = out.ptr() + (ni * c + ci) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) q[i] = (p[i] - mu[gi]) * rs[gi] * gv[ci] + bv[ci];
          }
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        const Tn<T>& xv = t.value(ix);
        const Tn<T>& gv = t.value(ig);
        std::vector<T> mu, rs;
        group_stats(xv, groups, eps, mu, rs);
        const bool need_x = t.requires_grad(ix), need_g = t.requires_grad(ig), need_b = t.requires_grad(ib);
        const std::size_t count = cg * spatial;
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t gr = 0; gr < groups; ++gr) {
            const std::size_t gi = ni * groups + gr;
            T sum_dxh = 0, sum_dxh_xh = 0;
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const std::size_t ci = gr * cg + cc;
              const T* p = xv.ptr() + (ni * c + ci) * spatial;
              const T* gp = g.ptr() + (ni * c + ci) * spatial;
              T sg = 0, sb = 0;
              for (std::size_t i = 0; i < spatial; ++i) {
                const T xh = (p[i] - mu[gi]) * rs[gi];
                const T dxh = gp[i] * gv[ci];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                sg += gp[i] * xh;
                sb += gp[i];
              }
              if (need_g) t.grad_buffer(ig)[ci] += sg;
              if (need_b) t.grad_buffer(ib)[ci] += sb;
            }
            if (!need_x) continue;
            const T inv_count = T(1) / static_cast<T>(count);
            Tn<T>& gx = t.grad_buffer(ix);
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const std::size_t ci = gr * cg + cc;
              const T* p = xv.ptr() + (ni * c + ci) * spatial;
              const T* gp = g.ptr() + (ni * c + ci) * spatial;
              T* q = gx.ptr() + (ni * c + ci) * spatial;
              for (std::size_t i = 0; i < spatial; ++i) {
                const T xh = (p[i] - mu[gi]) * rs[gi];
                const T dxh = gp[i] * gv[ci];
                q[i] += rs[gi] * (dxh - sum_dxh * inv_count - xh * sum_dxh_xh * inv_count);
              }
            }
          }
        }
      });
}

template <typename T>
V<T> upsample_nearest2x(V<T> x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw std::invalid_argument("upsample_nearest2x: expected NCHW, got " + shape_string(xs));
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t ix = x.id;
  return x.tape->record(
      "upsample2x", {x},
      [=](const Tp<T>& t) {
        Tn<T> out(Shape{xs[0], xs[1], 2 * h, 2 * w});
        const Tn<T>& xv = t.value(ix);
        for (std::size_t pl = 0; pl < planes; ++pl) {
          for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) {
              out[(pl * 2 * h + y) * 2 * w + xx] = xv[(pl * h + y / 2) * w + xx / 2];
            }
          }
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t pl = 0; pl < planes; ++pl) {
          for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) {
              gx[(pl * h + y / 2) * w + xx / 2] += g[(pl * 2 * h + y) * 2 * w + xx];
            }
          }
        }
      });
}

template <typename T>
V<T> concat_channels(V<T> a, V<T> b) {
  auto* tape = common_tape("concat_channels", a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() != as.size() || as[0] != bs[0] ||
      !std::equal(as.begin() + 2, as.end(), bs.begin() + 2)) {
    shape_error("concat_channels", as, bs);
  }
  const std::size_t n = as[0];
  const std::size_t sa = a.value().size() / n, sb = b.value().size() / n;
  Shape os = as;
  os[1] += bs[1];
  const std::size_t ia = a.id, ib = b.id;
  return tape->record(
      "concat_channels", {a, b},
      [=](const Tp<T>& t) {
        Tn<T> out(os);
        const Tn<T>& av = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        for (std::size_t ni = 0; ni < n; ++ni) {
          std::copy_n(av.ptr() + ni * sa, sa, out.ptr() + ni * (sa + sb));
          std::copy_n(bv.ptr() + ni * sb, sb, out.ptr() + ni * (sa + sb) + sa);
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        for (std::size_t ni = 0; ni < n; ++ni) {
          if (t.requires_grad(ia)) {
            T* d = t.grad_buffer(ia).ptr() + ni * sa;
            const T* s = g.ptr() + ni * (sa + sb);
            for (std::size_t i = 0; i < sa; ++i) d[i] += s[i];
          }
          if (t.requires_grad(ib)) {
            T* d = t.grad_buffer(ib).ptr() + ni * sb;
            const T* s = g.ptr() + ni * (sa + sb) + sa;
            for (std::size_t i = 0; i < sb; ++i) d[i] += s[i];
          }
        }
      });
}

namespace {

// Generic [B, R, C] <-> [B, C, R] transpose recorded as a tape node.
template <typename T>
V<T> transpose_inner(V<T> x, std::size_t batch, std::size_t rows, std::size_t cols, Shape out_shape,
                     const char* name) {
  const std::size_t ix = x.id;
  return x.tape->record(
      name, {x},
      [=](const Tp<T>& t) {
        Tn<T> out(out_shape);
        const Tn<T>& xv = t.value(ix);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* s = xv.ptr() + bi * rows * cols;
          T* d = out.ptr() + bi * rows * cols;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) d[c * rows + r] = s[r * cols + c];
          }
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const T* s = g.ptr() + bi * rows * cols;
          T* d = gx.ptr() + bi * rows * cols;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += s[c * rows + r];
          }
        }
      });
}

}  // namespace

template <typename T>
V<T> to_tokens(V<T> x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw std::invalid_argument("to_tokens: expected NCHW, got " + shape_string(xs));
  return transpose_inner(x, xs[0], xs[1], xs[2] * xs[3], Shape{xs[0], xs[2] * xs[3], xs[1]}, "to_tokens");
}

template <typename T>
V<T> from_tokens(V<T> x, std::size_t h, std::size_t w) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[1] != h * w) {
    throw std::invalid_argument("from_tokens: " + shape_string(xs) + " is not a " + std::to_string(h) + "x" +
                                std::to_string(w) + " token grid");
  }
  return transpose_inner(x, xs[0], h * w, xs[2], Shape{xs[0], xs[2], h, w}, "from_tokens");
}

template <typename T>
V<T> split_heads(V<T> x, std::size_t heads) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || heads == 0 || xs[2] % heads != 0) {
    throw std::invalid_argument("split_heads: cannot split " + shape_string(xs) + " into " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t d = xs[2] / heads;
  // [N, n, h, d] -> [N, h, n, d] is a transpose of (n) and (h) with inner blocks of d.
  if (heads == 1) return reshape(x, Shape{xs[0], 1, xs[1], d});
  const std::size_t n = xs[0], tokens = xs[1];
  const std::size_t ix = x.id;
  return x.tape->record(
      "split_heads", {x},
      [=](const Tp<T>& t) {
        Tn<T> out(Shape{n, heads, tokens, d});
        const Tn<T>& xv = t.value(ix);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t hh = 0; hh < heads; ++hh)
              std::copy_n(xv.ptr() + ((b * tokens + i) * heads + hh) * d, d,
                          out.ptr() + ((b * heads + hh) * tokens + i) * d);
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t hh = 0; hh < heads; ++hh) {
              const T* s = g.ptr() + ((b * heads + hh) * tokens + i) * d;
              T* dd = gx.ptr() + ((b * tokens + i) * heads + hh) * d;
              for (std::size_t k = 0; k < d; ++k) dd[k] += s[k];
            }
      });
}

template <typename T>
V<T> merge_heads(V<T> x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw std::invalid_argument("merge_heads: expected [N,h,n,d], got " + shape_string(xs));
  const std::size_t n = xs[0], heads = xs[1], tokens = xs[2], d = xs[3];
  if (heads == 1) return reshape(x, Shape{n, tokens, d});
  const std::size_t ix = x.id;
  return x.tape->record(
      "merge_heads", {x},
      [=](const Tp<T>& t) {
        Tn<T> out(Shape{n, tokens, heads * d});
        const Tn<T>& xv = t.value(ix);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t hh = 0; hh < heads; ++hh)
            for (std::size_t i = 0; i < tokens; ++i)
              std::copy_n(xv.ptr() + ((b * heads + hh) * tokens + i) * d, d,
                          out.ptr() + ((b * tokens + i) * heads + hh) * d);
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t hh = 0; hh < heads; ++hh)
            for (std::size_t i = 0; i < tokens; ++i) {
              const T* s = g.ptr() + ((b * tokens + i) * heads + hh) * d;
              T* dd = gx.ptr() + ((b * heads + hh) * tokens + i) * d;
              for (std::size_t k = 0; k < d; ++k) dd[k] += s[k];
            }
      });
}

template <typename T>
V<T> reshape(V<T> x, Shape shape) {
  if (shape_numel(shape) != x.value().size()) shape_error("reshape", x.shape(), shape);
  const std::size_t ix = x.id;
  return x.tape->record(
      "reshape", {x}, [=](const Tp<T>& t) { return t.value(ix).reshaped(shape); },
      [=](Tp<T>& t, std::size_t self) { add_into(t.grad_buffer(ix), t.grad_buffer(self)); });
}

template <typename T>
V<T> gather_rows(V<T> table, std::vector<std::size_t> ids) {
  const Shape& ts = table.shape();
  if (ts.size() != 2) throw std::invalid_argument("gather_rows: table must be 2-D, got " + shape_string(ts));
  for (auto id : ids) {
    if (id >= ts[0]) {
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " outside table of " +
                              std::to_string(ts[0]) + " rows");
    }
  }
  const std::size_t d = ts[1];
  const std::size_t it = table.id;
  auto shared_ids = std::make_shared<const std::vector<std::size_t>>(std::move(ids));
  return table.tape->record(
      "gather_rows", {table},
      [=](const Tp<T>& t) {
        Tn<T> out(Shape{shared_ids->size(), d});
        const Tn<T>& tv = t.value(it);
        for (std::size_t r = 0; r < shared_ids->size(); ++r) {
          std::copy_n(tv.ptr() + (*shared_ids)[r] * d, d, out.ptr() + r * d);
        }
        return out;
      },
      [=](Tp<T>& t, std::size_t self) {
        const Tn<T>& g = t.grad_buffer(self);
        Tn<T>& gt = t.grad_buffer(it);
        for (std::size_t r = 0; r < shared_ids->size(); ++r) {
          T* dst = gt.ptr() + (*shared_ids)[r] * d;
          for (std::size_t k = 0; k < d; ++k) dst[k] += g[r * d + k];
        }
      });
}

template <typename T>
V<T> sum(V<T> x) {
  const std::size_t ix = x.id;
  return x.tape->record(
      "sum", {x},
      [ix](const Tp<T>& t) {
        T s = 0;
        for (T v : t.value(ix).data()) s += v;
        return Tn<T>::scalar(s);
      },
      [ix](Tp<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0];
        for (auto& v : t.grad_buffer(ix).data()) v += g;
      });
}

template <typename T>
V<T> mean(V<T> x) {
  const std::size_t ix = x.id;
  const T inv = T(1) / static_cast<T>(std::max<std::size_t>(1, x.value().size()));
  return x.tape->record(
      "mean", {x},
      [ix, inv](const Tp<T>& t) {
        T s = 0;
        for (T v : t.value(ix).data()) s += v;
        return Tn<T>::scalar(s * inv);
      },
      [ix, inv](Tp<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0] * inv;
        for (auto& v : t.grad_buffer(ix).data()) v += g;
      });
}

template <typename T>
V<T> mse(V<T> a, V<T> b) {
  auto* tape = common_tape("mse", a, b);
  if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
  const std::size_t ia = a.id, ib = b.id;
  const T inv = T(1) / static_cast<T>(std::max<std::size_t>(1, a.value().size()));
  return tape->record(
      "mse", {a, b},
      [=](const Tp<T>& t) {
        const Tn<T>& av = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        T s = 0;
        for (std::size_t i = 0; i < av.size(); ++i) {
          const T dlt = av[i] - bv[i];
          s += dlt * dlt;
        }
        return Tn<T>::scalar(s * inv);
      },
      [=](Tp<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0] * T(2) * inv;
        const Tn<T>& av = t.value(ia);
        const Tn<T>& bv = t.value(ib);
        if (t.requires_grad(ia)) {
          Tn<T>& ga = t.grad_buffer(ia);
          for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
        }
        if (t.requires_grad(ib)) {
          Tn<T>& gb = t.grad_buffer(ib);
          for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
        }
      });
}

template <typename T>
V<T> bce_with_logits(V<T> logits, const Tn<T>& labels) {
  if (logits.shape() != labels.shape()) shape_error("bce_with_logits", logits.shape(), labels.shape());
  const std::size_t ix = logits.id;
  auto y = std::make_shared<const Tn<T>>(labels);
  const T inv = T(1) / static_cast<T>(std::max<std::size_t>(1, labels.size()));
  return logits.tape->record(
      "bce_with_logits", {logits},
      [=](const Tp<T>& t) {
        const Tn<T>& xv = t.value(ix);
        T s = 0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const T x = xv[i];
          s += std::max(x, T(0)) - x * (*y)[i] + std::log1p(std::exp(-std::abs(x)));
        }
        return Tn<T>::scalar(s * inv);
      },
      [=](Tp<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0] * inv;
        const Tn<T>& xv = t.value(ix);
        Tn<T>& gx = t.grad_buffer(ix);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g * (sigmoid_scalar(xv[i]) - (*y)[i]);
      });
}

#define O2MAG_INSTANTIATE_OPS(T)                                                        \
  template V<T> add<T>(V<T>, V<T>);                                                     \
  template V<T> sub<T>(V<T>, V<T>);                                                     \
  template V<T> mul<T>(V<T>, V<T>);                                                     \
  template V<T> scale<T>(V<T>, T);                                                      \
  template V<T> add_channel<T>(V<T>, V<T>);                                             \
  template V<T> silu<T>(V<T>);                                                          \
  template V<T> sigmoid<T>(V<T>);                                                       \
  template V<T> linear<T>(V<T>, V<T>, std::optional<std::type_identity_t<V<T>>>);                             \
  template V<T> matmul<T>(V<T>, V<T>, bool);                                            \
  template V<T> softmax_lastdim<T>(V<T>, const Tn<T>*, std::size_t*);                   \
  template V<T> attention<T>(V<T>, V<T>, V<T>);                                         \
  template V<T> conv2d<T>(V<T>, V<T>, V<T>, std::size_t, std::size_t);                  \
  template V<T> group_norm<T>(V<T>, V<T>, V<T>, std::size_t, T);                        \
  template V<T> upsample_nearest2x<T>(V<T>);                                            \
  template V<T> concat_channels<T>(V<T>, V<T>);                                         \
  template V<T> to_tokens<T>(V<T>);                                                     \
  template V<T> from_tokens<T>(V<T>, std::size_t, std::size_t);                        \
  template V<T> split_heads<T>(V<T>, std::size_t);                                      \
  template V<T> merge_heads<T>(V<T>);                                                   \
  template V<T> reshape<T>(V<T>, Shape);                                                \
  template V<T> gather_rows<T>(V<T>, std::vector<std::size_t>);                         \
  template V<T> sum<T>(V<T>);                                                           \
  template V<T> mean<T>(V<T>);                                                          \
  template V<T> mse<T>(V<T>, V<T>);                                                     \
  template V<T> bce_with_logits<T>(V<T>, const Tn<T>&);

O2MAG_INSTANTIATE_OPS(float)
O2MAG_INSTANTIATE_OPS(double)

#undef O2MAG_INSTANTIATE_OPS

}  // namespace o2mag::ops
