#include "o2mag/scheduler/scheduler.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace o2mag::sched {

Scheduler::Scheduler(SchedulerConfig cfg) : cfg_(cfg) {
  if (cfg_.train_steps < 1 || cfg_.sample_steps < 1 || cfg_.sample_steps > cfg_.train_steps) {
    throw std::invalid_argument("scheduler: need 1 <= sample_steps <= train_steps");
  }
  if (!(cfg_.beta_start > 0 && cfg_.beta_end < 1 && cfg_.beta_start <= cfg_.beta_end)) {
    throw std::invalid_argument("scheduler: betas must satisfy 0 < start <= end < 1");
  }
  alpha_bar_.resize(static_cast<std::size_t>(cfg_.train_steps) + 1);
  alpha_bar_[0] = 1.0;
  for (int t = 1; t <= cfg_.train_steps; ++t) alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta(t));
  const int stride = cfg_.train_steps / cfg_.sample_steps;
  for (int k = cfg_.sample_steps - 1; k >= 0; --k) anchors_.push_back(1 + k * stride);
  anchors_.push_back(0);
}

double Scheduler::beta(int t) const {
  if (t < 1 || t > cfg_.train_steps) throw std::out_of_range("scheduler: beta index " + std::to_string(t));
  if (cfg_.train_steps == 1) return cfg_.beta_start;
  return cfg_.beta_start + (cfg_.beta_end - cfg_.beta_start) * (t - 1) / (cfg_.train_steps - 1);
}

void Scheduler::check_t(int t) const {
  if (t < 0 || t > cfg_.train_steps) {
    throw std::out_of_range("scheduler: timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(cfg_.train_steps) + "]");
  }
}

double Scheduler::alpha_bar(int t) const {
  check_t(t);
  return alpha_bar_[static_cast<std::size_t>(t)];
}

Tensor Scheduler::add_noise(const Tensor& x0, int t, const Tensor& eps) const {
  if (x0.shape() != eps.shape()) {
    throw std::invalid_argument("add_noise: x0 " + shape_string(x0.shape()) + " vs eps " + shape_string(eps.shape()));
  }
  const double ab = alpha_bar(t);
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * x0[i] + s * eps[i]);
  return out;
}

Tensor Scheduler::transfer(const Tensor& z, const Tensor& eps, int from, int to) const {
  if (z.shape() != eps.shape()) {
    throw std::invalid_argument("ddim: latent " + shape_string(z.shape()) + " vs eps " + shape_string(eps.shape()));
  }
  if (from == to) return z;
  const double a_from = alpha_bar(from), a_to = alpha_bar(to);
  if (a_from <= 0 || a_to <= 0) throw std::domain_error("ddim: non-positive alpha_bar");
  const double sa = std::sqrt(a_from), sb = std::sqrt(1.0 - a_from);
  const double ta = std::sqrt(a_to), tb = std::sqrt(1.0 - a_to);
  Tensor out(z.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (z[i] - sb * eps[i]) / sa;
    out[i] = static_cast<float>(ta * x0 + tb * eps[i]);
  }
  return out;
}

Tensor Scheduler::ddim_step(const Tensor& z, const Tensor& eps, int t, int t_prev) const {
  if (t < t_prev) {
    throw std::invalid_argument("ddim_step: t=" + std::to_string(t) + " below t_prev=" + std::to_string(t_prev));
  }
  return transfer(z, eps, t, t_prev);
}

Tensor Scheduler::ddim_reverse_step(const Tensor& z, const Tensor& eps, int t, int t_next) const {
  if (t > t_next) {
    throw std::invalid_argument("ddim_reverse_step: t=" + std::to_string(t) + " above t_next=" + std::to_string(t_next));
  }
  return transfer(z, eps, t, t_next);
}

Tensor Scheduler::sample(const Tensor& z_T, const EpsFn& eps,
                         const std::function<void(int, const Tensor&)>& visit) const {
  Tensor z = z_T;
  for (int s = 1; s <= cfg_.sample_steps; ++s) {
    const int t = anchors_[s - 1], t_prev = anchors_[s];
    z = ddim_step(z, eps(z, t, s), t, t_prev);
    if (!z.all_finite()) throw std::runtime_error("sampling produced a non-finite latent at step " + std::to_string(s));
    if (visit) visit(s, z);
  }
  return z;
}

InversionTrajectory Scheduler::invert(const Tensor& x0, const EpsFn& eps) const {
  InversionTrajectory traj;
  traj.anchors = anchors_;
  traj.latents.resize(anchors_.size());
  traj.latents.back() = x0;
  Tensor z = x0;
  for (int s = cfg_.sample_steps; s >= 1; --s) {
    const int t = anchors_[s], t_next = anchors_[s - 1];
    z = ddim_reverse_step(z, eps(z, t_next, s), t, t_next);
    if (!z.all_finite()) throw std::runtime_error("inversion produced a non-finite latent at step " + std::to_string(s));
    traj.latents[static_cast<std::size_t>(s - 1)] = z;
  }
  return traj;
}

void Scheduler::check_anchors(const InversionTrajectory& traj) const {
  if (traj.anchors != anchors_ || traj.latents.size() != anchors_.size()) {
    throw std::invalid_argument("trajectory anchors do not match the scheduler's sampling anchors");
  }
}

Tensor cfg_combine(const Tensor& eps_pos, const Tensor& eps_neg, float g) {
  if (eps_pos.shape() != eps_neg.shape()) throw std::invalid_argument("cfg: eps shapes differ");
  Tensor out(eps_pos.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_neg[i] + g * (eps_pos[i] - eps_neg[i]);
  return out;
}

Tensor cfg_predict(const denoiser::Denoiser& model, const Tensor& z, int t, const Tensor& e_pos, const Tensor& e_neg,
                   float g, const denoiser::AttentionHook* hook, int step) {
  if (g < 0) throw std::invalid_argument("cfg: negative guidance scale");
  if (e_pos.shape() != e_neg.shape()) {
    throw std::invalid_argument("cfg: embeddings " + shape_string(e_pos.shape()) + " vs " + shape_string(e_neg.shape()));
  }
  if (g == 1.0f) return model.predict_noise(z, t, e_pos, hook, step);
  if (g == 0.0f) return model.predict_noise(z, t, e_neg, hook, step);
  const Tensor pos = model.predict_noise(z, t, e_pos, hook, step);
  const Tensor neg = model.predict_noise(z, t, e_neg, hook, step);
  return cfg_combine(pos, neg, g);
}

InversionTrajectory ddim_invert(const denoiser::Denoiser& model, const Scheduler& sched, const Tensor& image,
                                const Tensor& e) {
  auto traj = sched.invert(image, [&](const Tensor& z, int t, int) { return model.predict_noise(z, t, e); });
  traj.embedding = e;
  return traj;
}

Tensor ddim_sample(const denoiser::Denoiser& model, const Scheduler& sched, const Tensor& z_T, const Tensor& e_pos,
                   const Tensor& e_neg, float g) {
  return sched.sample(z_T, [&](const Tensor& z, int t, int) { return cfg_predict(model, z, t, e_pos, e_neg, g); });
}

}  // namespace o2mag::sched
