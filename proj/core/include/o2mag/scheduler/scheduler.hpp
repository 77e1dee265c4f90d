#pragma once

#include <functional>
#include <vector>

#include "o2mag/denoiser/unet.hpp"

namespace o2mag::sched {

struct SchedulerConfig {
  int train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int sample_steps = 50;
  float guidance = 2.0f;  // toy denoiser; 7.5 oversaturates colours
};

/// Latents at every sampling anchor, noisiest first; latents.back() is the clean input.
struct InversionTrajectory {
  std::vector<int> anchors;
  std::vector<Tensor> latents;
  Tensor embedding;

  const Tensor& noise() const { return latents.front(); }
};

/// eps prediction for latent z at diffusion time t during sampling step `step` (1 = noisiest).
using EpsFn = std::function<Tensor(const Tensor& z, int t, int step)>;

class Scheduler {
 public:
  explicit Scheduler(SchedulerConfig cfg = {});

  const SchedulerConfig& config() const noexcept { return cfg_; }
  /// Cumulative product of (1 - beta_i) for i = 1..t; alpha_bar(0) = 1.
  double alpha_bar(int t) const;
  double beta(int t) const;
  /// S+1 anchors: S evenly spaced training timesteps, strictly decreasing, then 0.
  const std::vector<int>& anchors() const noexcept { return anchors_; }
  int steps() const noexcept { return cfg_.sample_steps; }

  Tensor add_noise(const Tensor& x0, int t, const Tensor& eps) const;
  /// Deterministic DDIM update from t down to t_prev (t >= t_prev).
  Tensor ddim_step(const Tensor& z, const Tensor& eps, int t, int t_prev) const;
  /// The same recurrence run towards higher noise (t <= t_next).
  Tensor ddim_reverse_step(const Tensor& z, const Tensor& eps, int t, int t_next) const;

  /// Runs all S steps from z_T; `visit` (if set) sees every intermediate latent.
  Tensor sample(const Tensor& z_T, const EpsFn& eps,
                const std::function<void(int step, const Tensor& z)>& visit = {}) const;
  /// Maps x0 to noise by reversing the recurrence; eps is evaluated at the target time of each step.
  InversionTrajectory invert(const Tensor& x0, const EpsFn& eps) const;

  /// Rejects a trajectory recorded with a different anchor set.
  void check_anchors(const InversionTrajectory& traj) const;

 private:
  void check_t(int t) const;
  Tensor transfer(const Tensor& z, const Tensor& eps, int from, int to) const;

  SchedulerConfig cfg_;
  std::vector<double> alpha_bar_;
  std::vector<int> anchors_;
};

/// eps(y_n) + g * (eps(y) - eps(y_n)). g == 1 skips the negative pass and g == 0 the positive one.
Tensor cfg_combine(const Tensor& eps_pos, const Tensor& eps_neg, float g);
Tensor cfg_predict(const denoiser::Denoiser& model, const Tensor& z, int t, const Tensor& e_pos, const Tensor& e_neg,
                   float g, const denoiser::AttentionHook* hook = nullptr, int step = 0);

/// Inversion with the model at guidance 1 under embedding e.
InversionTrajectory ddim_invert(const denoiser::Denoiser& model, const Scheduler& sched, const Tensor& image,
                                const Tensor& e);
/// Plain conditional sampling from z_T with CFG against e_neg.
Tensor ddim_sample(const denoiser::Denoiser& model, const Scheduler& sched, const Tensor& z_T, const Tensor& e_pos,
                   const Tensor& e_neg, float g);

}  // namespace o2mag::sched
