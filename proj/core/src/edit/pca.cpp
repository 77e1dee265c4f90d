#include "o2mag/edit/pca.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "o2mag/numerics/kernels.hpp"

namespace o2mag::edit {

Tensor pca_attention(const Tensor& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1)) throw std::invalid_argument("pca_attention: need a square map, got " + shape_string(a.shape()));
  const auto n = static_cast<Eigen::Index>(a.dim(0));
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != a.dim(0)) throw std::invalid_argument("pca_attention: " + std::to_string(n) + " tokens is not a square grid");

  Eigen::MatrixXd x(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) x(i, j) = a[static_cast<std::size_t>(i * n + j)];
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(std::max<Eigen::Index>(1, n - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca_attention: eigendecomposition failed");

  Tensor out({3, side, side});
  const Eigen::VectorXd& vals = eig.eigenvalues();  // ascending
  const double top = std::max(vals(n - 1), 0.0);
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(3, n); ++c) {
    const Eigen::Index col = n - 1 - c;
    if (!(top > 0) || vals(col) <= 1e-9 * top) break;
    Eigen::VectorXd dir = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir(arg) < 0) dir = -dir;
    const Eigen::VectorXd proj = x * dir;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    if (!(hi > lo)) continue;
    for (Eigen::Index i = 0; i < n; ++i) {
      out[static_cast<std::size_t>(c * n + i)] = static_cast<float>((proj(i) - lo) / (hi - lo));
    }
  }
  return out;
}

Tensor mean_attention_map(const Tensor& q, const Tensor& k) {
  if (q.ndim() != 4 || k.ndim() != 4) throw std::invalid_argument("mean_attention_map: expected [B,H,n,d] inputs");
  const std::size_t heads = q.dim(1), n = q.dim(2), d = q.dim(3), m = k.dim(2);
  Tensor out({n, m});
  std::vector<float> p(n * m);
  for (std::size_t h = 0; h < heads; ++h) {
    kernels::attention_logits(q.ptr() + h * n * d, k.ptr() + h * m * d, p.data(), n, m, d);
    kernels::softmax_rows<float>(p.data(), nullptr, p.data(), n, m);
    for (std::size_t i = 0; i < n * m; ++i) out[i] += p[i] / static_cast<float>(heads);
  }
  return out;
}

}  // namespace o2mag::edit
