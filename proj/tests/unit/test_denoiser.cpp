#include <doctest.h>

#include <filesystem>
#include <set>

#include "o2mag/common/random.hpp"
#include "o2mag/denoiser/training.hpp"
#include "o2mag/numerics/kernels.hpp"

using namespace o2mag;
using namespace o2mag::denoiser;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.channels = {8, 16};
  c.attention_resolutions = {16};
  c.time_dim = 16;
  c.context_dim = 8;
  return c;
}

Denoiser make_net(DenoiserConfig cfg = {}, std::uint64_t seed = 3) {
  Denoiser d(std::move(cfg));
  d.init(seed);
  // Zero-initialized output projections would hide attention; give them weight.
  Rng rng(seed + 100);
  for (auto& [name, t] : d.params()) {
    if (name.ends_with(".o.w") || name.ends_with(".co.w") || name.ends_with(".c2.w") || name == "out.w") {
      t = normal_tensor(rng, t.shape());
      for (auto& v : t.data()) v *= 0.2f;
    }
  }
  return d;
}

Tensor random_latent(std::uint64_t seed, const DenoiserConfig& c) {
  Rng rng(seed);
  return normal_tensor(rng, {c.in_channels, c.image_size, c.image_size});
}

struct Capture {
  std::vector<AttentionSite> sites;
  std::vector<Tensor> keys;
  AttentionHook hook() {
    return [this](const AttentionSite& s, const Tensor&, const Tensor& k, const Tensor&) -> std::optional<Tensor> {
      sites.push_back(s);
      keys.push_back(k);
      return std::nullopt;
    };
  }
};

TokenIds grid_hole(const Vocabulary& v) { return v.anomaly_prompt("grid", "hole"); }

}  // namespace

TEST_CASE("layer table: seven attention blocks, decoder layers last") {
  const auto net = make_net();
  const auto& layers = net.attention_layers();
  REQUIRE(layers.size() == 7);
  for (std::size_t i = 0; i < layers.size(); ++i) CHECK(layers[i].index == i);
  CHECK(layers[0].stage == Stage::encoder);
  CHECK(layers[0].resolution == 16);
  CHECK(layers[1].resolution == 8);
  CHECK(layers[2].stage == Stage::middle);
  CHECK(net.decoder_layers() == std::vector<std::size_t>{3, 4, 5, 6});
  CHECK(layers[5].resolution == 16);
}

TEST_CASE("predict_noise keeps the input shape for every t") {
  const auto net = make_net(tiny_config());
  const auto e = net.encode_prompt(grid_hole(net.vocab()));
  const auto z = random_latent(1, net.config());
  for (int t : {0, 1, 500, 1000}) CHECK(net.predict_noise(z, t, e).shape() == z.shape());
  Tensor zb({2, 3, 32, 32});
  CHECK(net.predict_noise(zb, 10, e).shape() == zb.shape());
}

TEST_CASE("a hook that recomputes attention is bit-identical to no hook") {
  const auto net = make_net();
  const auto e = net.encode_prompt(grid_hole(net.vocab()));
  const auto z = random_latent(2, net.config());
  AttentionHook same = [](const AttentionSite&, const Tensor& q, const Tensor& k, const Tensor& v) -> std::optional<Tensor> {
    return kernels::attention_forward<float>(q, k, v, nullptr);
  };
  const auto plain = net.predict_noise(z, 400, e);
  const auto hooked = net.predict_noise(z, 400, e, &same, 12);
  CHECK(plain.data().size() == hooked.data().size());
  CHECK(std::equal(plain.data().begin(), plain.data().end(), hooked.data().begin()));
}

TEST_CASE("capture hook sees one self and one cross site per attention block") {
  const auto net = make_net();
  Capture cap;
  auto hook = cap.hook();
  net.predict_noise(random_latent(3, net.config()), 100, net.encode_prompt(grid_hole(net.vocab())), &hook, 17);
  REQUIRE(cap.sites.size() == 2 * net.attention_layers().size());
  std::set<std::pair<std::size_t, int>> seen;
  for (const auto& s : cap.sites) {
    CHECK(s.step == 17);
    seen.insert({s.layer, static_cast<int>(s.kind)});
    CHECK(s.resolution == net.attention_layers()[s.layer].resolution);
  }
  CHECK(seen.size() == 14);
  // per-head keys at the 16x16 block (48 channels): spatial tokens for self, prompt tokens for cross
  CHECK(cap.keys[0].shape() == Shape{1, 1, 256, 48});
  CHECK(cap.keys[1].shape() == Shape{1, 1, Vocabulary::kPromptLength, 48});
}

TEST_CASE("hook returning a wrong shape names the site") {
  const auto net = make_net(tiny_config());
  AttentionHook bad = [](const AttentionSite&, const Tensor&, const Tensor&, const Tensor&) -> std::optional<Tensor> {
    return Tensor({1, 1, 3, 3});
  };
  try {
    net.predict_noise(random_latent(4, net.config()), 10, net.encode_prompt(grid_hole(net.vocab())), &bad, 9);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("layer 0") != std::string::npos);
    CHECK(msg.find("self") != std::string::npos);
    CHECK(msg.find("step 9") != std::string::npos);
  }
}

TEST_CASE("self-attention keys ignore the prompt; cross-attention keys ignore the latent") {
  const auto net = make_net();
  const auto& v = net.vocab();
  const auto e1 = net.encode_prompt(grid_hole(v));
  const auto e2 = net.encode_prompt(v.anomaly_prompt("stripes", "scratch"));
  const auto z1 = random_latent(5, net.config());
  const auto z2 = random_latent(6, net.config());

  auto keys = [&](const Tensor& z, const Tensor& e) {
    Capture cap;
    auto hook = cap.hook();
    net.predict_noise(z, 300, e, &hook);
    return cap;
  };
  const auto a = keys(z1, e1), b = keys(z1, e2), c = keys(z2, e1);
  // site 0 is the first self-attention; it runs before any cross-attention mixes in the prompt
  CHECK(a.sites[0].kind == AttentionKind::self);
  CHECK(max_abs_diff(a.keys[0], b.keys[0]) == 0.0);
  for (std::size_t i = 0; i < a.sites.size(); ++i) {
    if (a.sites[i].kind != AttentionKind::cross) continue;
    CHECK(max_abs_diff(a.keys[i], c.keys[i]) == 0.0);
    CHECK(max_abs_diff(a.keys[i], b.keys[i]) > 0.0);
  }
  CHECK(max_abs_diff(a.keys[0], c.keys[0]) > 0.0);
}

TEST_CASE("encode_prompt") {
  const auto net = make_net(tiny_config());
  const auto& v = net.vocab();
  const auto& table = net.param("token_embedding");
  const std::size_t d = net.config().context_dim;

  SUBCASE("empty list gives a 0 x d matrix") {
    const auto e = net.encode_prompt({});
    CHECK(e.shape() == Shape{0, d});
  }
  SUBCASE("repeated tokens give identical rows") {
    const auto e = net.encode_prompt({v.id("grid"), v.id("grid"), v.id("hole")});
    for (std::size_t j = 0; j < d; ++j) CHECK(e[j] == e[d + j]);
  }
  SUBCASE("template puts the anomaly word at the anomaly index") {
    const auto ids = grid_hole(v);
    REQUIRE(ids.size() == Vocabulary::kPromptLength);
    CHECK(v.token(ids[Vocabulary::kAnomalyIndex]) == "hole");
    CHECK(v.token(ids[4]) == "grid");
    const auto e = net.encode_prompt(ids);
    for (std::size_t j = 0; j < d; ++j) CHECK(e[Vocabulary::kAnomalyIndex * d + j] == table[v.id("hole") * d + j]);
  }
  SUBCASE("unknown ids are rejected") {
    CHECK_THROWS_AS(net.encode_prompt({v.size()}), std::invalid_argument);
    CHECK_THROWS_AS(v.tokenize("a photo of a crack"), std::invalid_argument);
  }
}

TEST_CASE("prompt builders") {
  const Vocabulary v;
  CHECK(v.phrase_prompt({}) == v.null_prompt());
  const auto n = v.phrase_prompt({"no hole", "intact"});
  CHECK(n.size() == Vocabulary::kPromptLength);
  CHECK(v.token(n[0]) == "no");
  CHECK(v.token(n[2]) == "intact");
  CHECK(v.token(n[3]) == "<pad>");
  CHECK(v.normal_prompt("speckle", "clean")[4] == v.id("clean"));
  CHECK_THROWS_AS(v.phrase_prompt({"a photo of a clean intact grid with a hole"}), std::invalid_argument);
}

TEST_CASE("checkpoint round trip preserves weights, layers and outputs") {
  const auto net = make_net();
  const auto path = std::filesystem::temp_directory_path() / "o2mag_test_ckpt.bin";
  net.save(path);
  const auto back = Denoiser::load(path);
  std::filesystem::remove(path);
  CHECK(back.config() == net.config());
  CHECK(back.vocab().tokens() == net.vocab().tokens());
  REQUIRE(back.params().size() == net.params().size());
  for (const auto& [name, t] : net.params()) CHECK(max_abs_diff(back.param(name), t) == 0.0);
  REQUIRE(back.attention_layers().size() == net.attention_layers().size());
  for (std::size_t i = 0; i < back.attention_layers().size(); ++i) {
    CHECK(back.attention_layers()[i].index == net.attention_layers()[i].index);
    CHECK(back.attention_layers()[i].stage == net.attention_layers()[i].stage);
    CHECK(back.attention_layers()[i].resolution == net.attention_layers()[i].resolution);
  }
  const auto z = random_latent(7, net.config());
  const auto e = net.encode_prompt(grid_hole(net.vocab()));
  CHECK(max_abs_diff(net.predict_noise(z, 250, e), back.predict_noise(z, 250, e)) == 0.0);
}

TEST_CASE("init is deterministic in the seed") {
  const auto a = make_net(tiny_config(), 11), b = make_net(tiny_config(), 11), c = make_net(tiny_config(), 12);
  bool any_diff = false;
  for (const auto& [name, t] : a.params()) {
    CHECK(max_abs_diff(b.param(name), t) == 0.0);
    any_diff = any_diff || max_abs_diff(c.param(name), t) > 0.0;
  }
  CHECK(any_diff);
}

TEST_CASE("config validation and key=value round trip") {
  DenoiserConfig c;
  c.channels = {30, 48};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  const auto t = tiny_config();
  CHECK(DenoiserConfig::from_kv(t.to_kv()) == t);
}

namespace {

TrainingCorpus tiny_corpus() {
  std::vector<TrainingCorpus::PoolImage> pool;
  for (const auto& cls : dataset::texture_classes()) {
    for (std::uint64_t i = 0; i < 3; ++i) pool.push_back({cls, dataset::gen_normal(cls, 1000 + i)});
  }
  return TrainingCorpus(std::move(pool), Vocabulary());
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch = 2;
  c.warmup = 2;
  c.validation_size = 4;
  c.validation_every = 2;
  return c;
}

}  // namespace

TEST_CASE("training corpus draws are deterministic and cover prompts") {
  const auto corpus = tiny_corpus();
  const Vocabulary v;
  std::set<std::string> defects;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto a = corpus.draw(s), b = corpus.draw(s);
    CHECK(max_abs_diff(a.image, b.image) == 0.0);
    CHECK(a.prompt == b.prompt);
    CHECK(std::find(a.prompt.begin(), a.prompt.end(), v.id("no")) == a.prompt.end());
    if (a.defect != "good") CHECK(a.prompt == v.anomaly_prompt(a.cls, a.defect));
    defects.insert(a.defect);
  }
  CHECK(defects.size() == 4);
}

TEST_CASE("train_denoiser") {
  const auto corpus = tiny_corpus();
  const sched::Scheduler sched;

  SUBCASE("zero steps leave the weights unchanged") {
    auto net = make_net(tiny_config());
    const auto before = net.params();
    train_denoiser(net, corpus, sched, tiny_train(0));
    for (const auto& [name, t] : before) CHECK(max_abs_diff(net.param(name), t) == 0.0);
  }
  SUBCASE("same seed twice gives identical weights") {
    auto a = make_net(tiny_config()), b = make_net(tiny_config());
    const auto ra = train_denoiser(a, corpus, sched, tiny_train(3));
    const auto rb = train_denoiser(b, corpus, sched, tiny_train(3));
    CHECK(ra.losses == rb.losses);
    bool changed = false;
    const auto init = make_net(tiny_config());
    for (const auto& [name, t] : a.params()) {
      CHECK(max_abs_diff(b.param(name), t) == 0.0);
      changed = changed || max_abs_diff(init.param(name), t) > 0.0;
    }
    CHECK(changed);
    CHECK(ra.validation.size() == 3);  // step 0, 2, 3
  }
  SUBCASE("sustained loss above the divergence threshold aborts") {
    auto net = make_net(tiny_config());
    auto cfg = tiny_train(10);
    cfg.divergence_factor = 0.0;  // every loss counts as diverged
    cfg.divergence_window = 3;
    CHECK_THROWS_WITH_AS(train_denoiser(net, corpus, sched, cfg), doctest::Contains("diverged at step 2"),
                         std::runtime_error);
  }
  SUBCASE("the validation loss drops over a short run") {
    auto net = make_net(tiny_config());
    auto cfg = tiny_train(60);
    cfg.batch = 4;
    cfg.validation_size = 16;
    cfg.validation_every = 60;
    cfg.ema_decay = 0.9f;
    const auto r = train_denoiser(net, corpus, sched, cfg);
    REQUIRE(r.validation.size() == 2);
    CHECK(r.validation.back().second < r.validation.front().second);
  }
}
