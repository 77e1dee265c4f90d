#include <doctest.h>

#include <random>

#include "../support/attention_oracles.hpp"
#include "o2mag/common/random.hpp"
#include "o2mag/edit/attention_edit.hpp"
#include "o2mag/edit/pca.hpp"
#include "o2mag/numerics/kernels.hpp"

using namespace o2mag;
using namespace o2mag::edit;
using o2mag::testing::AttentionInstance;
using o2mag::testing::InstanceKind;

namespace {

Tensor to_tensor(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  std::vector<float> f(v.begin(), v.end());
  return Tensor({rows, cols}, std::move(f));
}

struct Run {
  Tensor out;
  TriagStats stats;
};

Run run_triag(const AttentionInstance& in, std::span<const std::uint8_t> gate = {}) {
  const auto q = to_tensor(in.q, in.n, in.d);
  const auto kr = to_tensor(in.k_r, in.m, in.d), vr = to_tensor(in.v_r, in.m, in.dv);
  const auto kn = to_tensor(in.k_n, in.m, in.d), vn = to_tensor(in.v_n, in.m, in.dv);
  std::optional<DaeSelf> dae;
  if (in.dae) dae = DaeSelf{static_cast<float>(in.gamma), static_cast<float>(in.tau)};
  Run r;
  r.out = triag_attention(q, kr, vr, kn, vn, in.m_r, in.m_t, dae, nullptr, nullptr, &r.stats,
                          gate.empty() ? std::span<const std::uint8_t>(in.gate) : gate);
  return r;
}

BinaryMask random_mask(Rng& rng, std::size_t h, std::size_t w, double p) {
  BinaryMask m(h, w);
  std::bernoulli_distribution coin(p);
  for (auto& b : m.bits) b = coin(rng);
  return m;
}

}  // namespace

TEST_CASE("downsample_mask") {
  SUBCASE("all zeros stay zero") {
    const auto m = downsample_mask(BinaryMask(32, 32), 8);
    CHECK(std::count(m.begin(), m.end(), 1) == 0);
    CHECK(m.size() == 64);
  }
  SUBCASE("a single pixel in 4x4 marks one cell at 2x2") {
    BinaryMask b(4, 4);
    b.at(2, 1) = 1;
    CHECK(downsample_mask(b, 2) == FlatMask{0, 0, 1, 0});
  }
  SUBCASE("random 8x8 masks against per-cell enumeration") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const auto b = random_mask(rng, 8, 8, 0.08);
      for (std::size_t r : {4u, 2u}) {
        const auto m = downsample_mask(b, r);
        const std::size_t f = 8 / r;
        for (std::size_t cy = 0; cy < r; ++cy) {
          for (std::size_t cx = 0; cx < r; ++cx) {
            bool any = false;
            for (std::size_t y = cy * f; y < (cy + 1) * f; ++y)
              for (std::size_t x = cx * f; x < (cx + 1) * f; ++x) any = any || b.at(y, x);
            CHECK(m[cy * r + cx] == (any ? 1 : 0));
          }
        }
      }
    }
  }
  SUBCASE("non-dividing resolution is rejected") { CHECK_THROWS_AS(downsample_mask(BinaryMask(32, 32), 12), std::invalid_argument); }
  SUBCASE("pyramid") {
    BinaryMask b(32, 32);
    b.at(31, 31) = 1;
    const auto p = MaskPyramid::build(b, {16, 8});
    CHECK(p.at(16)[255] == 1);
    CHECK(p.at(8)[63] == 1);
    CHECK_THROWS_AS(p.at(4), std::invalid_argument);
  }
}

TEST_CASE("triag_attention matches the per-row oracle") {
  std::mt19937_64 rng(2024);
  const InstanceKind kinds[] = {InstanceKind::random, InstanceKind::all_fg, InstanceKind::all_bg,
                                InstanceKind::dae_collapse, InstanceKind::dae};
  for (int i = 0; i < 200; ++i) {
    const auto in = o2mag::testing::random_instance(rng, kinds[i % 5]);
    const auto got = run_triag(in);
    const auto want = o2mag::testing::oracle_triag(in);
    REQUIRE(got.out.size() == want.size());
    double err = 0;
    for (std::size_t k = 0; k < want.size(); ++k) err = std::max(err, std::abs(got.out[k] - want[k]));
    CHECK(err < 1e-5);
  }
}

TEST_CASE("the gate picks whole rows bit-exactly") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto in = o2mag::testing::random_instance(rng, i % 2 ? InstanceKind::random : InstanceKind::dae);
    const std::vector<std::uint8_t> ones(in.n, 1), zeros(in.n, 0);
    const auto mixed = run_triag(in).out;
    const auto fg = run_triag(in, ones).out;
    const auto bg = run_triag(in, zeros).out;
    for (std::size_t r = 0; r < in.n; ++r) {
      const auto& src = in.gate[r] ? fg : bg;
      CHECK(std::equal(src.ptr() + r * in.dv, src.ptr() + (r + 1) * in.dv, mixed.ptr() + r * in.dv));
    }
  }
}

TEST_CASE("triag edge cases") {
  std::mt19937_64 rng(5);
  SUBCASE("all-foreground output ignores the normal branch") {
    auto in = o2mag::testing::random_instance(rng, InstanceKind::all_fg);
    const auto a = run_triag(in);
    CHECK(a.stats.bg_skipped);
    for (auto& x : in.v_n) x += 3.0;
    CHECK(run_triag(in).out == a.out);
  }
  SUBCASE("all-background output ignores the reference branch") {
    auto in = o2mag::testing::random_instance(rng, InstanceKind::all_bg);
    const auto a = run_triag(in);
    for (auto& x : in.v_r) x -= 2.0;
    for (auto& x : in.k_r) x *= 0.5;
    CHECK(run_triag(in).out == a.out);
  }
  SUBCASE("gamma = 1, tau = 1 is bit-identical to no enhancement") {
    auto in = o2mag::testing::random_instance(rng, InstanceKind::dae_collapse);
    const auto with = run_triag(in);
    in.dae = false;
    CHECK(run_triag(in).out == with.out);
  }
  SUBCASE("empty reference mask falls back to the target's own attention") {
    auto in = o2mag::testing::random_instance(rng, InstanceKind::all_fg);
    std::fill(in.m_r.begin(), in.m_r.end(), 0);
    const auto q = to_tensor(in.q, in.n, in.d);
    const auto kt = to_tensor(in.k_n, in.m, in.d), vt = to_tensor(in.v_r, in.m, in.dv);
    TriagStats st;
    const auto out = triag_attention(q, to_tensor(in.k_r, in.m, in.d), to_tensor(in.v_r, in.m, in.dv), kt, vt, in.m_r,
                                     in.m_t, std::nullopt, &kt, &vt, &st);
    CHECK(st.fg_fallback);
    CHECK(st.fg_masked_keys == in.m);
    CHECK(max_abs_diff(out, kernels::attention_forward<float>(q, kt, vt)) < 1e-6);
    CHECK_THROWS_AS(triag_attention(q, kt, vt, kt, vt, in.m_r, in.m_t, std::nullopt), std::invalid_argument);
  }
  SUBCASE("mask statistics") {
    const auto in = o2mag::testing::random_instance(rng, InstanceKind::random);
    const auto r = run_triag(in);
    CHECK(r.stats.fg_masked_keys == static_cast<std::size_t>(std::count(in.m_r.begin(), in.m_r.end(), 0)));
    CHECK(r.stats.bg_masked_keys == static_cast<std::size_t>(std::count(in.m_t.begin(), in.m_t.end(), 1)));
  }
  SUBCASE("shape and mask mismatches are rejected") {
    const auto in = o2mag::testing::random_instance(rng, InstanceKind::random);
    const auto q = to_tensor(in.q, in.n, in.d), k = to_tensor(in.k_r, in.m, in.d), v = to_tensor(in.v_r, in.m, in.dv);
    const std::vector<std::uint8_t> short_mask(in.m - 1, 1);
    CHECK_THROWS_AS(triag_attention(q, k, v, k, v, short_mask, in.m_t, std::nullopt, nullptr, nullptr, nullptr, in.gate),
                    std::invalid_argument);
    const std::vector<std::uint8_t> short_gate(in.n + 1, 0);
    CHECK_THROWS_AS(triag_attention(q, k, v, k, v, in.m_r, in.m_t, std::nullopt, nullptr, nullptr, nullptr, short_gate),
                    std::invalid_argument);
  }
}

TEST_CASE("enhanced foreground never loses mass on reference-mask keys and sharpens with tau < 1") {
  std::mt19937_64 rng(99);
  for (int i = 0; i < 50; ++i) {
    auto in = o2mag::testing::random_instance(rng, InstanceKind::all_fg);
    // identity values expose the attention weights themselves
    in.dv = in.m;
    in.v_r.assign(in.m * in.m, 0.0);
    for (std::size_t j = 0; j < in.m; ++j) in.v_r[j * in.m + j] = 1.0;
    in.v_n = in.v_r;
    in.dae = true;
    in.gamma = 1.0;
    in.tau = 1.0;
    const auto base = run_triag(in).out;
    in.gamma = 1.1;
    in.tau = 0.7;
    const auto enh = run_triag(in).out;
    for (std::size_t r = 0; r < in.n; ++r) {
      double mass_base = 0, mass_enh = 0, max_base = 0, max_enh = 0;
      for (std::size_t j = 0; j < in.m; ++j) {
        if (!in.m_r[j]) continue;
        mass_base += base[r * in.m + j];
        mass_enh += enh[r * in.m + j];
        max_base = std::max<double>(max_base, base[r * in.m + j]);
        max_enh = std::max<double>(max_enh, enh[r * in.m + j]);
      }
      CHECK(mass_enh >= mass_base - 1e-6);
      CHECK(max_enh >= max_base - 1e-6);
    }
  }
}

TEST_CASE("dae_cross") {
  SUBCASE("worked example") {
    const Tensor p({1, 2}, std::vector<float>{0.2f, 0.8f});
    const auto e = dae_cross(p, FlatMask{1}, 1, 100.0f);
    CHECK(e[0] == 0.2f);
    CHECK(e[1] == doctest::Approx(80.0f));
  }
  Rng rng(3);
  Tensor p({2, 6, 8});
  for (auto& v : p.data()) v = std::uniform_real_distribution<float>(0, 1)(rng);
  const FlatMask m{1, 0, 0, 1, 1, 0};
  SUBCASE("C = 1 and an empty mask are identities") {
    CHECK(dae_cross(p, m, 7, 1.0f) == p);
    CHECK(dae_cross(p, FlatMask(6, 0), 7, 100.0f) == p);
  }
  SUBCASE("only column j inside the mask changes") {
    const auto e = dae_cross(p, m, 7, 100.0f);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          const std::size_t k = (b * 6 + i) * 8 + j;
          if (j == 7 && m[i]) {
            CHECK(e[k] == p[k] * 100.0f);
          } else {
            CHECK(e[k] == p[k]);
          }
        }
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(dae_cross(p, m, 8, 100.0f), std::invalid_argument);
    CHECK_THROWS_AS(dae_cross(p, FlatMask(5, 0), 7, 100.0f), std::invalid_argument);
    CHECK_THROWS_AS(dae_cross(p, m, 7, 0.5f), std::invalid_argument);
  }
}

TEST_CASE("choose_arm agrees with the standalone rule on random policies") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    EditPolicy p;
    std::uniform_int_distribution<int> step(0, 51);
    p.graft_start = std::uniform_int_distribution<int>(0, 50)(rng);
    p.self_enhance = {step(rng), step(rng)};
    p.cross_enhance = {step(rng), step(rng)};
    for (std::size_t l = 0; l < 7; ++l)
      if (rng() % 2) p.graft_layers.push_back(l);
    for (int s = 1; s <= 50; ++s) {
      for (std::size_t l = 0; l < 7; ++l) {
        for (bool cross : {false, true}) {
          const auto kind = cross ? denoiser::AttentionKind::cross : denoiser::AttentionKind::self;
          CHECK(arm_name(choose_arm(p, s, l, kind)) ==
                o2mag::testing::expected_arm(s, l, cross, p.graft_start, p.graft_layers, p.self_enhance.lo,
                                             p.self_enhance.hi, p.cross_enhance.lo, p.cross_enhance.hi));
        }
      }
    }
  }
}

TEST_CASE("dispatch examples under the default policy") {
  EditPolicy p;
  p.graft_layers = {3, 4, 5, 6};
  using K = denoiser::AttentionKind;
  CHECK(choose_arm(p, 3, 5, K::self) == EditArm::standard);
  CHECK(choose_arm(p, 5, 5, K::self) == EditArm::triag_dae);  // s = T_S: second arm
  CHECK(choose_arm(p, 5, 0, K::self) == EditArm::triag_dae);
  CHECK(choose_arm(p, 6, 5, K::self) == EditArm::triag_dae);
  CHECK(choose_arm(p, 50, 5, K::self) == EditArm::triag);
  CHECK(choose_arm(p, 50, 0, K::self) == EditArm::standard);
  CHECK(choose_arm(p, 30, 0, K::cross) == EditArm::dae_cross);
  CHECK(choose_arm(p, 40, 0, K::cross) == EditArm::standard);
  p.disable_dae();
  CHECK(choose_arm(p, 6, 5, K::self) == EditArm::triag);
  CHECK(choose_arm(p, 5, 5, K::self) == EditArm::standard);
  CHECK(choose_arm(p, 30, 0, K::cross) == EditArm::standard);
}

TEST_CASE("policy validation and layer presets") {
  EditPolicy p;
  CHECK_NOTHROW(p.validate(50));
  p.gamma = 0;
  CHECK_THROWS_AS(p.validate(50), std::invalid_argument);
  p = EditPolicy{};
  p.cross_enhance = {20, 60};
  CHECK_THROWS_AS(p.validate(50), std::invalid_argument);
  p = EditPolicy{};
  p.cross_scale = 0.5f;
  CHECK_THROWS_AS(p.validate(50), std::invalid_argument);

  denoiser::Denoiser net;
  net.init(1);
  CHECK(resolve_graft_layers("decoder", net) == std::vector<std::size_t>{3, 4, 5, 6});
  CHECK(resolve_graft_layers("decoder-skip1", net) == std::vector<std::size_t>{4, 5, 6});
  CHECK(resolve_graft_layers("2, 6", net) == std::vector<std::size_t>{2, 6});
  CHECK_THROWS_AS(resolve_graft_layers("7", net), std::invalid_argument);
  CHECK_THROWS_AS(resolve_graft_layers("x", net), std::invalid_argument);
  CHECK(EditPolicy::defaults_for(net).graft_layers == net.decoder_layers());
}

TEST_CASE("capture store") {
  CaptureStore st;
  st.put(Branch::reference, 3, 4, Tensor({1}), Tensor({1}));
  st.put(Branch::normal, 4, 4, Tensor({1}), Tensor({1}));
  CHECK(st.has(Branch::reference, 3, 4));
  CHECK_FALSE(st.has(Branch::normal, 3, 4));
  CHECK_THROWS_WITH_AS(st.get(Branch::normal, 3, 4), doctest::Contains("normal capture for step 3, layer 4"),
                       std::runtime_error);
  st.drop_before(4);
  CHECK(st.size() == 1);
  CHECK(st.has(Branch::normal, 4, 4));
}

namespace {

denoiser::Denoiser prompt_sensitive_net() {
  denoiser::Denoiser net;
  net.init(21);
  Rng rng(4);
  for (auto& [name, t] : net.params()) {
    if (name.ends_with(".o.w") || name.ends_with(".co.w") || name.ends_with(".c2.w") || name == "out.w") {
      t = normal_tensor(rng, t.shape());
      for (auto& v : t.data()) v *= 0.2f;
    }
  }
  return net;
}

}  // namespace

TEST_CASE("edit session hooks into the denoiser") {
  const auto net = prompt_sensitive_net();
  Rng rng(8);
  const auto z_ref = normal_tensor(rng, {3, 32, 32}), z_nor = normal_tensor(rng, {3, 32, 32});
  const auto z_tar = normal_tensor(rng, {3, 32, 32});
  const auto e = net.encode_prompt(net.vocab().anomaly_prompt("grid", "hole"));
  BinaryMask mr(32, 32), mt(32, 32);
  for (std::size_t y = 8; y < 16; ++y)
    for (std::size_t x = 8; x < 20; ++x) mr.at(y, x) = 1;
  for (std::size_t y = 18; y < 26; ++y)
    for (std::size_t x = 4; x < 12; ++x) mt.at(y, x) = 1;
  const auto policy = EditPolicy::defaults_for(net);

  auto run_step = [&](int s, std::vector<EditDecision>* log, bool conditional) {
    CaptureStore store;
    const auto cr = capture_hook(store, Branch::reference), cn = capture_hook(store, Branch::normal);
    net.predict_noise(z_ref, 500, e, &cr, s);
    net.predict_noise(z_nor, 500, e, &cn, s);
    EditSession session(policy, MaskPyramid::build(mr, {16, 8}), MaskPyramid::build(mt, {16, 8}), store);
    const auto hook = session.hook(conditional, log);
    return net.predict_noise(z_tar, 500, e, &hook, s);
  };

  SUBCASE("early steps are bit-equal to the hookless path") {
    std::vector<EditDecision> log;
    CHECK(run_step(3, &log, true) == net.predict_noise(z_tar, 500, e));
    CHECK(log.size() == 14);
    for (const auto& d : log) CHECK(d.arm == EditArm::standard);
  }
  SUBCASE("grafting steps change the output and log every site") {
    std::vector<EditDecision> log;
    const auto out = run_step(30, &log, true);
    CHECK(max_abs_diff(out, net.predict_noise(z_tar, 500, e)) > 1e-4);
    REQUIRE(log.size() == 14);
    for (const auto& d : log) {
      CHECK(d.step == 30);
      const auto want = choose_arm(policy, 30, d.layer, d.kind);
      CHECK(d.arm == want);
      if (d.arm == EditArm::triag_dae) CHECK(d.masked_keys > 0);
    }
  }
  SUBCASE("the unconditional pass skips cross enhancement only") {
    std::vector<EditDecision> log;
    run_step(30, &log, false);
    for (const auto& d : log) {
      if (d.kind == denoiser::AttentionKind::cross) CHECK(d.arm == EditArm::standard);
      else CHECK(d.arm == EditArm::triag_dae);
    }
  }
  SUBCASE("a missing capture names the site") {
    CaptureStore empty;
    EditSession session(policy, MaskPyramid::build(mr, {16, 8}), MaskPyramid::build(mt, {16, 8}), empty);
    const auto hook = session.hook(true);
    CHECK_THROWS_WITH_AS(net.predict_noise(z_tar, 500, e, &hook, 30), doctest::Contains("step 30, layer 0"),
                         std::runtime_error);
  }
  SUBCASE("log format") {
    const std::vector<EditDecision> log{{7, 3, denoiser::AttentionKind::self, EditArm::triag_dae, 12},
                                        {7, 3, denoiser::AttentionKind::cross, EditArm::standard, 0}};
    CHECK(format_log(log) == "step\tlayer\tkind\tarm\tmasked_keys\n7\t3\tself\ttriag+dae\t12\n7\t3\tcross\tstandard\t0\n");
  }
}

TEST_CASE("pca_attention") {
  SUBCASE("constant map gives zeros") {
    const auto out = pca_attention(Tensor({16, 16}, 0.25f));
    CHECK(out.shape() == Shape{3, 4, 4});
    for (float v : out.data()) CHECK(v == 0.0f);
  }
  SUBCASE("rank-1 map has one nonzero channel") {
    Tensor a({16, 16});
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) a[i * 16 + j] = static_cast<float>((i % 5) * (j + 1)) * 0.01f;
    const auto out = pca_attention(a);
    auto channel_max = [&](std::size_t c) { return *std::max_element(out.ptr() + c * 16, out.ptr() + (c + 1) * 16); };
    CHECK(channel_max(0) == doctest::Approx(1.0f));
    CHECK(channel_max(1) == 0.0f);
    CHECK(channel_max(2) == 0.0f);
  }
  SUBCASE("random maps against a Jacobi eigen oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor a({16, 16});
      for (auto& v : a.data()) v = std::uniform_real_distribution<float>(0, 1)(rng);
      const auto out = pca_attention(a);
      std::vector<double> x(256), mean(16, 0.0);
      for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) mean[j] += a[i * 16 + j] / 16.0;
      for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) x[i * 16 + j] = a[i * 16 + j] - mean[j];
      std::vector<double> cov(256, 0.0);
      for (std::size_t p = 0; p < 16; ++p)
        for (std::size_t q = 0; q < 16; ++q)
          for (std::size_t i = 0; i < 16; ++i) cov[p * 16 + q] += x[i * 16 + p] * x[i * 16 + q] / 15.0;
      std::vector<double> vals, vecs;
      o2mag::testing::jacobi_eigen(cov, 16, vals, vecs);
      for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> proj(16, 0.0), got(16);
        for (std::size_t i = 0; i < 16; ++i) {
          for (std::size_t j = 0; j < 16; ++j) proj[i] += x[i * 16 + j] * vecs[j * 16 + c];
          got[i] = out[c * 16 + i];
        }
        CHECK(std::abs(o2mag::testing::correlation(proj, got)) > 0.999);
      }
    }
  }
  SUBCASE("non-square inputs are rejected") {
    CHECK_THROWS_AS(pca_attention(Tensor({15, 15})), std::invalid_argument);
    CHECK_THROWS_AS(pca_attention(Tensor({4, 8})), std::invalid_argument);
  }
}
