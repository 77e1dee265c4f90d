#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "o2mag/numerics/tensor.hpp"

namespace o2mag {

struct AdamOptions {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// Moment accumulators for a fixed list of parameter tensors.
class AdamState {
 public:
  AdamState() = default;
  AdamState(std::span<const Tensor* const> params, AdamOptions options);

  const AdamOptions& options() const noexcept { return options_; }
  void set_lr(float lr) noexcept { options_.lr = lr; }
  std::uint64_t step() const noexcept { return step_; }
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }

  /// Bias-corrected Adam update of params in place. `names` label parameters
  /// in error messages and may be empty. Throws on a non-finite gradient
  /// before touching any parameter.
  void update(std::span<Tensor* const> params, std::span<const Tensor> grads,
              std::span<const std::string> names = {});

 private:
  AdamOptions options_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace o2mag
