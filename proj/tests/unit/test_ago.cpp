#include <doctest.h>

#include <filesystem>
#include <limits>

#include "o2mag/ago/ago.hpp"
#include "o2mag/common/random.hpp"
#include "o2mag/dataset/dataset.hpp"

using namespace o2mag;
using namespace o2mag::ago;

namespace {

const denoiser::Denoiser& small_net() {
  static const denoiser::Denoiser net = [] {
    denoiser::DenoiserConfig cfg;
    cfg.channels = {16, 16, 16};
    cfg.groups = 4;
    denoiser::Denoiser n(cfg);
    n.init(3);
    Rng rng(9);
    for (auto& [name, t] : n.params()) {
      if (name.ends_with(".o.w") || name.ends_with(".co.w") || name.ends_with(".c2.w") || name == "out.w") {
        t = normal_tensor(rng, t.shape());
        for (auto& v : t.data()) v *= 0.1f;
      }
    }
    return n;
  }();
  return net;
}

Image reference_image() {
  return dataset::gen_defect("grid", dataset::default_defect_spec("hole"), 5).image;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("o2mag_test_ago_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("zero steps return the input embedding bit-exactly") {
  const auto& net = small_net();
  const sched::Scheduler sched;
  const auto e = net.encode_prompt(net.vocab().anomaly_prompt("grid", "hole"));
  AgoConfig cfg;
  cfg.steps = 0;
  const auto r = optimize_embedding(e, reference_image(), net, sched, cfg);
  CHECK(r.embedding == e);
  CHECK(r.losses.empty());
}

TEST_CASE("optimization touches only the embedding") {
  auto net = small_net();
  const auto before = net.params();
  const sched::Scheduler sched;
  const auto e = net.encode_prompt(net.vocab().anomaly_prompt("grid", "hole"));
  AgoConfig cfg;
  cfg.steps = 6;
  std::size_t inspected = 0;
  const auto r = optimize_embedding(e, reference_image(), net, sched, cfg, [&](std::size_t, const Tape& tape) {
    ++inspected;
    std::vector<std::string> grad_leaves;
    for (const auto& n : tape.nodes()) {
      if (n.is_leaf() && n.requires_grad) grad_leaves.push_back(n.name);
    }
    CHECK(grad_leaves == std::vector<std::string>{"embedding"});
  });
  CHECK(inspected == 6);
  CHECK(net.params() == before);
  CHECK(r.losses.size() == 6);
  for (double l : r.losses) CHECK(std::isfinite(l));
  CHECK(max_abs_diff(r.embedding, e) > 0);
  // Adam moves every coordinate by at most ~lr per step.
  CHECK(max_abs_diff(r.embedding, e) <= 6 * cfg.lr * 1.01);
}

TEST_CASE("optimization is deterministic in the seed") {
  const auto& net = small_net();
  const sched::Scheduler sched;
  const auto e = net.encode_prompt(net.vocab().anomaly_prompt("grid", "hole"));
  AgoConfig cfg;
  cfg.steps = 3;
  const auto a = optimize_embedding(e, reference_image(), net, sched, cfg);
  const auto b = optimize_embedding(e, reference_image(), net, sched, cfg);
  CHECK(a.embedding == b.embedding);
  CHECK(a.losses == b.losses);
  cfg.seed = 1;
  CHECK(optimize_embedding(e, reference_image(), net, sched, cfg).losses != a.losses);
}

TEST_CASE("several noise draws per step average their losses") {
  const auto& net = small_net();
  const sched::Scheduler sched;
  const auto e = net.encode_prompt(net.vocab().anomaly_prompt("grid", "hole"));
  AgoConfig one;
  one.steps = 2;
  one.timesteps = TimestepRule::uniform;
  AgoConfig two = one;
  two.steps = 1;
  two.noise_draws = 2;
  // with a zero learning-rate effect on step 0, two draws in one step see the same (t, eps) as two single steps
  const auto a = optimize_embedding(e, reference_image(), net, sched, one);
  const auto b = optimize_embedding(e, reference_image(), net, sched, two);
  CHECK(b.losses[0] == doctest::Approx(0.5 * (a.losses[0] + a.losses[1])).epsilon(0.05));
}

TEST_CASE("periodic draws repeat every block") {
  const auto& net = small_net();
  const sched::Scheduler sched;
  const auto e = net.encode_prompt(net.vocab().anomaly_prompt("grid", "hole"));
  AgoConfig cfg;
  cfg.steps = 8;
  cfg.block = 4;
  cfg.lr = 1e-9f;  // embedding barely moves, so the loss only tracks the draw
  cfg.periodic = true;
  const auto a = optimize_embedding(e, reference_image(), net, sched, cfg);
  for (std::size_t k = 0; k < 4; ++k) CHECK(a.losses[k + 4] == doctest::Approx(a.losses[k]).epsilon(1e-4));
  cfg.periodic = false;
  const auto b = optimize_embedding(e, reference_image(), net, sched, cfg);
  for (std::size_t k = 0; k < 4; ++k) CHECK(b.losses[k] == doctest::Approx(a.losses[k]).epsilon(1e-4));
  CHECK(b.losses[4] != doctest::Approx(a.losses[4]).epsilon(1e-4));
}

TEST_CASE("a non-finite loss aborts with the step index") {
  auto net = small_net();
  net.params().at("out.b")[0] = std::numeric_limits<float>::quiet_NaN();
  const sched::Scheduler sched;
  const auto e = net.encode_prompt(net.vocab().anomaly_prompt("grid", "hole"));
  AgoConfig cfg;
  cfg.steps = 2;
  CHECK_THROWS_WITH_AS(optimize_embedding(e, reference_image(), net, sched, cfg),
                       doctest::Contains("non-finite loss at step 0"), std::runtime_error);
}

TEST_CASE("config validation and round trip") {
  AgoConfig cfg;
  cfg.lr = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.lr = 5e-3f;
  cfg.steps = 120;
  cfg.timesteps = TimestepRule::uniform;
  cfg.seed = 44;
  cfg.periodic = true;
  const auto back = AgoConfig::from_kv(cfg.to_kv());
  CHECK(back.steps == 120);
  CHECK(back.lr == doctest::Approx(5e-3f));
  CHECK(back.timesteps == TimestepRule::uniform);
  CHECK(back.seed == 44);
  CHECK(back.periodic);
  CHECK_THROWS_AS(parse_rule("sorted"), std::invalid_argument);
}

TEST_CASE("timestep draws") {
  AgoConfig cfg;
  SUBCASE("stratified blocks hit every stratum once") {
    const auto ts = draw_timesteps(cfg, 1000, 200);
    for (std::size_t b = 0; b < 4; ++b) {
      std::vector<int> hits(50, 0);
      for (std::size_t k = 0; k < 50; ++k) {
        const int t = ts[b * 50 + k];
        REQUIRE(t >= 1);
        REQUIRE(t <= 1000);
        ++hits[static_cast<std::size_t>((t - 1) / 20)];
      }
      CHECK(std::count(hits.begin(), hits.end(), 1) == 50);
    }
  }
  SUBCASE("uniform draws cover the range") {
    cfg.timesteps = TimestepRule::uniform;
    const auto ts = draw_timesteps(cfg, 1000, 2000);
    double mean = 0;
    for (int t : ts) {
      CHECK(t >= 1);
      CHECK(t <= 1000);
      mean += t / 2000.0;
    }
    CHECK(mean == doctest::Approx(500.5).epsilon(0.05));
  }
}

TEST_CASE("smoothed_loss") {
  const std::vector<double> l{4, 2, 6, 8};
  CHECK(smoothed_loss(l, 2, 2) == 3.0);
  CHECK(smoothed_loss(l, 4, 2) == 7.0);
  CHECK(smoothed_loss(l, 4, 4) == 5.0);
  CHECK_THROWS_AS(smoothed_loss(l, 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(smoothed_loss(l, 5, 2), std::invalid_argument);
}

TEST_CASE("negative prompt embeddings") {
  const auto& net = small_net();
  const auto& v = net.vocab();
  CHECK(build_negative_embedding(net, {}) == net.encode_prompt(v.null_prompt()));
  const auto e = build_negative_embedding(net, {"no hole"});
  const auto table = net.param("token_embedding");
  const std::size_t d = net.config().context_dim;
  const auto ids = v.tokenize("no hole");
  for (std::size_t i = 0; i < denoiser::Vocabulary::kPromptLength; ++i) {
    const std::size_t id = i < ids.size() ? ids[i] : v.id("<pad>");
    CHECK(std::equal(table.ptr() + id * d, table.ptr() + (id + 1) * d, e.ptr() + i * d));
  }
  CHECK_THROWS_AS(build_negative_embedding(net, {"intact grid", "no hole", "no scratch", "no color-patch", "clean"}),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_negative_embedding(net, {"no unicorn"}), std::invalid_argument);
  CHECK(split_phrases(" intact grid ;no hole;; ") == std::vector<std::string>{"intact grid", "no hole"});
}

TEST_CASE("embedding files and the cache") {
  const auto dir = scratch_dir("cache");
  const auto& net = small_net();
  const sched::Scheduler sched;
  AgoConfig cfg;
  cfg.steps = 2;

  KeyValues kv;
  kv.set("steps", "2");
  const Tensor e({8, 32}, 0.5f);
  save_embedding(dir / "x.emb", e, kv);
  const auto back = load_embedding(dir / "x.emb");
  CHECK(back.embedding == e);
  CHECK(back.provenance.get("steps") == "2");

  const auto img = reference_image();
  const auto first = anomaly_embedding(img, "grid", "hole", net, sched, cfg, dir / "emb");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& f : std::filesystem::directory_iterator(dir / "emb")) ++files;
  CHECK(files == 1);
  for (const char* key : {"image_hash", "ago_steps", "ago_lr", "ago_seed", "ago_timesteps", "final_loss"}) {
    CHECK(first.provenance.has(key));
  }
  const auto second = anomaly_embedding(img, "grid", "hole", net, sched, cfg, dir / "emb");
  CHECK(second.embedding == first.embedding);
  CHECK(second.provenance.serialize() == first.provenance.serialize());
  cfg.seed = 3;
  anomaly_embedding(img, "grid", "hole", net, sched, cfg, dir / "emb");
  files = 0;
  for ([[maybe_unused]] const auto& f : std::filesystem::directory_iterator(dir / "emb")) ++files;
  CHECK(files == 2);
  std::filesystem::remove_all(dir);
}
