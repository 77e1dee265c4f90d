#include <doctest.h>

#include <cmath>

#include "o2mag/common/random.hpp"
#include "o2mag/scheduler/scheduler.hpp"

using namespace o2mag;
using namespace o2mag::sched;

namespace {

Tensor randn(std::uint64_t seed, Shape s = {3, 4, 4}) {
  Rng rng(seed);
  return normal_tensor(rng, std::move(s));
}

// Exact noise predictor for data x0 ~ N(0, var) per element: the posterior
// mean of eps given z_t is linear in z_t.
struct GaussianDenoiser {
  const Scheduler& s;
  double var;
  Tensor operator()(const Tensor& z, int t) const {
    const double ab = s.alpha_bar(t);
    const double k = std::sqrt(1.0 - ab) / (ab * var + 1.0 - ab);
    Tensor out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<float>(k * z[i]);
    return out;
  }
};

// Dense DDIM integration in double, many small steps between t and t_prev.
double dense_ddim(const Scheduler& s, double z, int t, int t_prev, double var) {
  for (int u = t; u > t_prev; --u) {
    const double ab = s.alpha_bar(u), abp = s.alpha_bar(u - 1);
    const double eps = std::sqrt(1.0 - ab) / (ab * var + 1.0 - ab) * z;
    const double x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    z = std::sqrt(abp) * x0 + std::sqrt(1.0 - abp) * eps;
  }
  return z;
}

}  // namespace

TEST_CASE("alpha_bar follows the linear beta schedule") {
  const Scheduler s;
  CHECK(s.alpha_bar(0) == 1.0);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
    CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-12));
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK(s.alpha_bar(1) > 0.9998);
  CHECK(s.alpha_bar(1000) < 1e-4);
  CHECK_THROWS_AS(s.alpha_bar(1001), std::out_of_range);
  CHECK_THROWS_AS(s.alpha_bar(-1), std::out_of_range);
}

TEST_CASE("sampling anchors: S evenly spaced decreasing steps, then 0") {
  const Scheduler s;
  const auto& a = s.anchors();
  REQUIRE(a.size() == 51);
  CHECK(a.front() == 981);
  CHECK(a[49] == 1);
  CHECK(a.back() == 0);
  for (std::size_t i = 0; i + 2 < a.size(); ++i) CHECK(a[i] - a[i + 1] == 20);

  const Scheduler s10({1000, 1e-4, 0.02, 10, 7.5f});
  CHECK(s10.anchors() == std::vector<int>{901, 801, 701, 601, 501, 401, 301, 201, 101, 1, 0});
}

TEST_CASE("add_noise") {
  const Scheduler s;
  const auto x0 = randn(1), eps = randn(2);
  SUBCASE("t = 0 returns x0") { CHECK(max_abs_diff(s.add_noise(x0, 0, eps), x0) == 0.0); }
  SUBCASE("zero noise scales x0 by sqrt(alpha_bar)") {
    const auto z = s.add_noise(x0, 600, Tensor(x0.shape()));
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(std::sqrt(s.alpha_bar(600)) * x0[i]).epsilon(1e-6));
  }
  SUBCASE("eps is recovered algebraically") {
    for (int t : {1, 250, 981}) {
      const auto z = s.add_noise(x0, t, eps);
      const double ab = s.alpha_bar(t);
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double rec = (z[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0 - ab);
        CHECK(std::abs(rec - eps[i]) < (t == 1 ? 1e-4 : 1e-6));
      }
    }
  }
  SUBCASE("shape mismatch and bad t are rejected") {
    CHECK_THROWS_AS(s.add_noise(x0, 10, randn(3, {3, 4, 5})), std::invalid_argument);
    CHECK_THROWS_AS(s.add_noise(x0, 1001, eps), std::out_of_range);
  }
}

TEST_CASE("ddim_step") {
  const Scheduler s;
  const auto x0 = randn(4), eps = randn(5);
  SUBCASE("true eps recovers x0 at t_prev = 0") {
    for (int t : {981, 501, 21}) {
      CHECK(max_abs_diff(s.ddim_step(s.add_noise(x0, t, eps), eps, t, 0), x0) < 1e-5);
    }
  }
  SUBCASE("true eps lands exactly on the forward marginal") {
    const auto z = s.ddim_step(s.add_noise(x0, 801, eps), eps, 801, 401);
    CHECK(max_abs_diff(z, s.add_noise(x0, 401, eps)) < 1e-5);
  }
  SUBCASE("t = t_prev is the identity") {
    const auto z = randn(6);
    CHECK(max_abs_diff(s.ddim_step(z, eps, 300, 300), z) == 0.0);
  }
  SUBCASE("reverse step undoes a step") {
    for (int i = 0; i + 1 < 51; ++i) {
      const int t = s.anchors()[i], tp = s.anchors()[i + 1];
      const auto z = randn(100 + i);
      const auto back = s.ddim_reverse_step(s.ddim_step(z, eps, t, tp), eps, tp, t);
      CHECK(max_abs_diff(back, z) < 1e-5);
    }
  }
  SUBCASE("direction is enforced") {
    CHECK_THROWS_AS(s.ddim_step(x0, eps, 10, 20), std::invalid_argument);
    CHECK_THROWS_AS(s.ddim_reverse_step(x0, eps, 20, 10), std::invalid_argument);
  }
}

TEST_CASE("two half-steps track the dense solution better than one step") {
  const Scheduler s;
  const double var = 0.25;
  const GaussianDenoiser den{s, var};
  const Tensor z({1}, std::vector<float>{1.3f});
  for (auto [t, mid, tp] : {std::tuple{981, 881, 781}, std::tuple{601, 501, 401}, std::tuple{201, 101, 1}}) {
    const double one = s.ddim_step(z, den(z, t), t, tp)[0];
    const auto h = s.ddim_step(z, den(z, t), t, mid);
    const double two = s.ddim_step(h, den(h, mid), mid, tp)[0];
    const double ref = dense_ddim(s, z[0], t, tp, var);
    CHECK(std::abs(two - ref) <= std::abs(one - ref) + 1e-6);
  }
}

TEST_CASE("invert then sample is exact when eps depends only on t") {
  const Scheduler s;
  const auto x0 = randn(7);
  EpsFn field = [](const Tensor& z, int t, int) {
    Tensor out(z.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(std::sin(0.01 * t + i));
    return out;
  };
  std::vector<int> inv_steps;
  EpsFn recording = [&](const Tensor& z, int t, int step) {
    inv_steps.push_back(step);
    return field(z, t, step);
  };
  const auto traj = s.invert(x0, recording);
  REQUIRE(traj.latents.size() == 51);
  CHECK(traj.latents.back() == x0);
  CHECK(inv_steps.front() == 50);
  CHECK(inv_steps.back() == 1);
  std::vector<int> visited;
  const auto rec = s.sample(traj.noise(), field, [&](int step, const Tensor& z) {
    visited.push_back(step);
    CHECK(max_abs_diff(z, traj.latents[static_cast<std::size_t>(step)]) < 1e-4);
  });
  CHECK(visited.size() == 50);
  CHECK(max_abs_diff(rec, x0) < 1e-4);
  s.check_anchors(traj);
  const Scheduler other({1000, 1e-4, 0.02, 25, 7.5f});
  CHECK_THROWS_AS(other.check_anchors(traj), std::invalid_argument);
}

TEST_CASE("non-finite latents abort with the step index") {
  const Scheduler s;
  EpsFn blowup = [](const Tensor& z, int, int step) {
    Tensor out(z.shape());
    if (step == 30) out.fill(std::numeric_limits<float>::infinity());
    return out;
  };
  CHECK_THROWS_WITH_AS(s.invert(randn(8), blowup), doctest::Contains("step 30"), std::runtime_error);
  CHECK_THROWS_WITH_AS(s.sample(randn(8), blowup), doctest::Contains("step 30"), std::runtime_error);
}

TEST_CASE("classifier-free guidance") {
  denoiser::Denoiser net;
  net.init(5);
  Rng rng(3);
  for (auto& [name, t] : net.params()) {
    // zero-initialized projections would make the output prompt-independent
    if (name == "out.w" || name.ends_with(".co.w") || name.ends_with(".c2.w")) t = normal_tensor(rng, t.shape());
  }
  const auto& v = net.vocab();
  const auto pos = net.encode_prompt(v.anomaly_prompt("grid", "hole"));
  const auto neg = net.encode_prompt(v.phrase_prompt({"no hole"}));
  const auto z = randn(9, {3, 32, 32});
  const auto ep = net.predict_noise(z, 500, pos), en = net.predict_noise(z, 500, neg);
  REQUIRE(max_abs_diff(ep, en) > 0.0);

  CHECK(max_abs_diff(cfg_predict(net, z, 500, pos, neg, 1.0f), ep) == 0.0);
  CHECK(max_abs_diff(cfg_predict(net, z, 500, pos, neg, 0.0f), en) == 0.0);
  CHECK(max_abs_diff(cfg_predict(net, z, 500, pos, pos, 7.5f), ep) == 0.0);
  const auto g = cfg_predict(net, z, 500, pos, neg, 7.5f);
  for (std::size_t i = 0; i < g.size(); i += 97) CHECK(g[i] == doctest::Approx(en[i] + 7.5 * (ep[i] - en[i])).epsilon(1e-5));
  CHECK_THROWS_AS(cfg_predict(net, z, 500, pos, neg, -1.0f), std::invalid_argument);
}
