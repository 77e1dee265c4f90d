#include "o2mag/numerics/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace o2mag {

AdamState::AdamState(std::span<const Tensor* const> params, AdamOptions options) : options_(options) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* p : params) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void AdamState::update(std::span<Tensor* const> params, std::span<const Tensor> grads,
                       std::span<const std::string> names) {
  if (params.size() != grads.size() || params.size() != m_.size()) {
    throw std::invalid_argument("adam: " + std::to_string(params.size()) + " params, " +
                                std::to_string(grads.size()) + " grads, state holds " + std::to_string(m_.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string label = i < names.size() ? names[i] : "#" + std::to_string(i);
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != m_[i].shape()) {
      throw std::invalid_argument("adam: shape mismatch for parameter " + label + ": " +
                                  shape_string(params[i]->shape()) + " vs grad " + shape_string(grads[i].shape()));
    }
    if (!grads[i].all_finite()) throw std::runtime_error("adam: non-finite gradient for parameter " + label);
  }
  ++step_;
  const float b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(static_cast<double>(b1), static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(static_cast<double>(b2), static_cast<double>(step_));
  const float step_size = static_cast<float>(options_.lr / c1);
  const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i]->ptr();
    const float* g = grads[i].ptr();
    float* m = m_[i].ptr();
    float* v = v_[i].ptr();
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + options_.eps);
    }
  }
}

}  // namespace o2mag
