#pragma once

#include "o2mag/numerics/tensor.hpp"

namespace o2mag::edit {

/// Top-3 principal components of the rows of a self-attention map A [n, n]
/// (n = h*w spatial tokens). Rows are centered, the covariance is
/// eigendecomposed, and each token's projection onto component k becomes
/// channel k, min-max normalized to [0, 1] and laid out as [3, h, w].
/// Components with (numerically) zero variance are left at zero, so a
/// rank-r map has min(r, 3) nonzero channels. Signs are fixed so the largest
/// loading of each eigenvector is positive.
Tensor pca_attention(const Tensor& a);

/// Head-averaged self-attention probabilities of one site: q, k [B, H, n, d] -> [n, n] for batch 0.
Tensor mean_attention_map(const Tensor& q, const Tensor& k);

}  // namespace o2mag::edit
