#pragma once

#include <cstddef>
#include <optional>
#include <type_traits>
#include <vector>

#include "o2mag/numerics/tape.hpp"

// Differentiable primitives. Every op records a forward rule (for replay) and
// a backward rule on the tape of its inputs.
namespace o2mag::ops {

template <typename T>
using V = BasicVar<T>;

template <typename T> V<T> add(V<T> a, V<T> b);
template <typename T> V<T> sub(V<T> a, V<T> b);
template <typename T> V<T> mul(V<T> a, V<T> b);
template <typename T> V<T> scale(V<T> a, T s);

/// x [N, C, ...] plus b [C] or [N, C], broadcast over the trailing dims.
template <typename T> V<T> add_channel(V<T> x, V<T> b);

template <typename T> V<T> silu(V<T> x);
template <typename T> V<T> sigmoid(V<T> x);

/// x [..., in] * w[out, in]^T + b[out].
template <typename T> V<T> linear(V<T> x, V<T> w, std::optional<std::type_identity_t<V<T>>> b);

/// [..., m, k] x [..., k, n] (or x [..., n, k]^T when trans_b). Batch dims must
/// match, or one side may be a plain matrix that is broadcast.
template <typename T> V<T> matmul(V<T> a, V<T> b, bool trans_b = false);

/// Softmax over the last axis with an optional additive bias whose entries
/// are 0 or kNegInf. Fully masked rows yield zeros; their count is written to
/// `fully_masked` when provided.
template <typename T>
V<T> softmax_lastdim(V<T> x, const BasicTensor<T>* mask_bias = nullptr, std::size_t* fully_masked = nullptr);

/// softmax(q k^T / sqrt(d)) v over [..., n, d], [..., m, d], [..., m, dv].
template <typename T> V<T> attention(V<T> q, V<T> k, V<T> v);

/// NCHW convolution with square stride and symmetric zero padding.
template <typename T> V<T> conv2d(V<T> x, V<T> w, V<T> b, std::size_t stride, std::size_t pad);

template <typename T>
V<T> group_norm(V<T> x, V<T> gamma, V<T> beta, std::size_t groups, T eps = T(1e-5));

template <typename T> V<T> upsample_nearest2x(V<T> x);
template <typename T> V<T> concat_channels(V<T> a, V<T> b);

/// [N, C, H, W] -> [N, H*W, C] and back.
template <typename T> V<T> to_tokens(V<T> x);
template <typename T> V<T> from_tokens(V<T> x, std::size_t h, std::size_t w);

/// [N, n, h*d] -> [N, h, n, d] and back.
template <typename T> V<T> split_heads(V<T> x, std::size_t heads);
template <typename T> V<T> merge_heads(V<T> x);

template <typename T> V<T> reshape(V<T> x, Shape shape);

/// Rows of `table` [V, d] selected by ids -> [ids.size(), d].
template <typename T> V<T> gather_rows(V<T> table, std::vector<std::size_t> ids);

template <typename T> V<T> sum(V<T> x);
template <typename T> V<T> mean(V<T> x);
/// Mean of squared differences.
template <typename T> V<T> mse(V<T> a, V<T> b);
/// Mean binary cross-entropy of logits against {0,1} labels.
template <typename T> V<T> bce_with_logits(V<T> logits, const BasicTensor<T>& labels);

}  // namespace o2mag::ops
