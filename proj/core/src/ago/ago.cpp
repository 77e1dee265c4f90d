#include "o2mag/ago/ago.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "o2mag/common/random.hpp"
#include "o2mag/numerics/adam.hpp"
#include "o2mag/numerics/tensor_io.hpp"

namespace o2mag::ago {

std::string rule_name(TimestepRule r) { return r == TimestepRule::uniform ? "uniform" : "stratified"; }

TimestepRule parse_rule(const std::string& s) {
  if (s == "uniform") return TimestepRule::uniform;
  if (s == "stratified") return TimestepRule::stratified;
  throw std::invalid_argument("unknown timestep rule '" + s + "' (expected uniform or stratified)");
}

void AgoConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw std::invalid_argument("ago: learning rate must be positive");
  if (noise_draws == 0) throw std::invalid_argument("ago: noise_draws must be at least 1");
  if (block == 0) throw std::invalid_argument("ago: stratification block must be at least 1");
}

KeyValues AgoConfig::to_kv() const {
  KeyValues kv;
  kv.set("ago_steps", std::to_string(steps));
  std::ostringstream lr_text;
  lr_text << lr;
  kv.set("ago_lr", lr_text.str());
  kv.set("ago_timesteps", rule_name(timesteps));
  kv.set("ago_block", std::to_string(block));
  kv.set("ago_noise_draws", std::to_string(noise_draws));
  kv.set("ago_seed", std::to_string(seed));
  kv.set("ago_periodic", periodic ? "true" : "false");
  return kv;
}

AgoConfig AgoConfig::from_kv(const KeyValues& kv) {
  AgoConfig c;
  c.steps = static_cast<std::size_t>(kv.get_int("ago_steps", static_cast<long long>(c.steps)));
  c.lr = static_cast<float>(kv.get_double("ago_lr", c.lr));
  c.timesteps = parse_rule(kv.get("ago_timesteps", rule_name(c.timesteps)));
  c.block = static_cast<std::size_t>(kv.get_int("ago_block", static_cast<long long>(c.block)));
  c.noise_draws = static_cast<std::size_t>(kv.get_int("ago_noise_draws", static_cast<long long>(c.noise_draws)));
  c.seed = static_cast<std::uint64_t>(kv.get_int("ago_seed", static_cast<long long>(c.seed)));
  c.periodic = kv.get_bool("ago_periodic", c.periodic);
  c.validate();
  return c;
}

namespace {

// Diffusion time of draw q (counting across steps).
int draw_timestep(const AgoConfig& cfg, int train_steps, std::size_t q) {
  if (cfg.timesteps == TimestepRule::uniform) {
    Rng rng(derive_seed(cfg.seed, "ago-t", q));
    return std::uniform_int_distribution<int>(1, train_steps)(rng);
  }
  const std::size_t b = q / cfg.block, k = q % cfg.block;
  Rng block_rng(derive_seed(cfg.seed, "ago-block", b));
  std::vector<std::size_t> order(cfg.block);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), block_rng);
  const std::size_t stratum = order[k];
  const double width = static_cast<double>(train_steps) / static_cast<double>(cfg.block);
  const int lo = 1 + static_cast<int>(std::floor(width * static_cast<double>(stratum)));
  const int hi = std::max(lo, static_cast<int>(std::floor(width * static_cast<double>(stratum + 1))));
  Rng rng(derive_seed(cfg.seed, "ago-t", q));
  return std::uniform_int_distribution<int>(lo, std::min(hi, train_steps))(rng);
}

}  // namespace

std::vector<int> draw_timesteps(const AgoConfig& cfg, int train_steps, std::size_t count) {
  std::vector<int> out(count);
  for (std::size_t q = 0; q < count; ++q) out[q] = draw_timestep(cfg, train_steps, q);
  return out;
}

AgoResult optimize_embedding(const Tensor& e_ori, const Image& image, const denoiser::Denoiser& model,
                             const sched::Scheduler& sched, const AgoConfig& cfg, const TapeInspector& inspect) {
  cfg.validate();
  if (e_ori.ndim() != 2) throw std::invalid_argument("optimize_embedding: embedding must be [m, d], got " + shape_string(e_ori.shape()));
  if (image.ndim() != 3) throw std::invalid_argument("optimize_embedding: image must be [C, H, W], got " + shape_string(image.shape()));

  AgoResult res;
  res.embedding = e_ori;
  Tensor* params[] = {&res.embedding};
  const Tensor* cparams[] = {&res.embedding};
  AdamState adam(cparams, AdamOptions{cfg.lr});
  const std::vector<std::string> names{"embedding"};
  const Shape ctx_shape{1, e_ori.dim(0), e_ori.dim(1)};
  Shape batch_shape = image.shape();
  batch_shape.insert(batch_shape.begin(), 1);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape tape(true);
    auto e = tape.leaf(res.embedding.reshaped(ctx_shape), true, "embedding");
    std::optional<Var> loss;
    for (std::size_t i = 0; i < cfg.noise_draws; ++i) {
      std::size_t q = step * cfg.noise_draws + i;
      if (cfg.periodic) q %= cfg.block * cfg.noise_draws;
      const int t = draw_timestep(cfg, sched.config().train_steps, q);
      Rng rng(derive_seed(cfg.seed, "ago-noise", q));
      const Tensor eps = normal_tensor(rng, batch_shape);
      const Tensor x_t = sched.add_noise(image, t, eps.reshaped(image.shape()));
      auto out = model.forward(tape, tape.leaf(x_t.reshaped(batch_shape)), {t}, e);
      auto l = ops::mse(out, tape.leaf(eps));
      loss = loss ? ops::add(*loss, l) : l;
    }
    if (cfg.noise_draws > 1) loss = ops::scale(*loss, 1.0f / static_cast<float>(cfg.noise_draws));
    const double lv = loss->value()[0];
    if (!std::isfinite(lv)) throw std::runtime_error("ago: non-finite loss at step " + std::to_string(step));
    tape.backward(*loss);
    if (inspect) inspect(step, tape);
    const Tensor grads[] = {tape.grad(e).reshaped(res.embedding.shape())};
    adam.update(params, grads, names);
    res.losses.push_back(lv);
  }
  return res;
}

double smoothed_loss(const std::vector<double>& losses, std::size_t step, std::size_t window) {
  if (window == 0 || step < window || step > losses.size()) {
    throw std::invalid_argument("smoothed_loss: window " + std::to_string(window) + " ending at step " +
                                std::to_string(step) + " does not fit " + std::to_string(losses.size()) + " losses");
  }
  double s = 0;
  for (std::size_t i = step - window; i < step; ++i) s += losses[i];
  return s / static_cast<double>(window);
}

Tensor build_negative_embedding(const denoiser::Denoiser& model, const std::vector<std::string>& phrases) {
  return model.encode_prompt(model.vocab().phrase_prompt(phrases));
}

std::vector<std::string> split_phrases(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& p : split(text, ';')) {
    auto t = trim(p);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

void save_embedding(const std::filesystem::path& path, const Tensor& e, const KeyValues& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write embedding " + path.string());
  out << "o2mag-embedding\n" << provenance.serialize() << "\n";
  write_tensor(out, e);
  if (!out) throw std::runtime_error("failed writing embedding " + path.string());
}

StoredEmbedding load_embedding(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read embedding " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "o2mag-embedding") {
    throw std::runtime_error(path.string() + ": not an embedding file");
  }
  std::string header;
  while (std::getline(in, line) && !line.empty()) header += line + "\n";
  StoredEmbedding s;
  s.provenance = KeyValues::parse(header);
  s.embedding = read_tensor(in);
  return s;
}

std::uint64_t model_hash(const denoiser::Denoiser& model) {
  std::uint64_t h = hash_string(model.config().to_kv().serialize());
  for (const auto& [name, t] : model.params()) {
    h = fnv1a(name.data(), name.size(), h);
    h = hash_tensor(t, h);
  }
  return h;
}

std::uint64_t embedding_key(const Image& image, const denoiser::TokenIds& prompt, const denoiser::Denoiser& model,
                            const AgoConfig& cfg) {
  std::uint64_t h = hash_tensor(image);
  h = fnv1a(prompt.data(), prompt.size() * sizeof(prompt[0]), h);
  const auto c = cfg.to_kv().serialize();
  h = fnv1a(c.data(), c.size(), h);
  const auto m = model_hash(model);
  return fnv1a(&m, sizeof(m), h);
}

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

StoredEmbedding anomaly_embedding(const Image& image, const std::string& cls, const std::string& anomaly,
                                  const denoiser::Denoiser& model, const sched::Scheduler& sched, const AgoConfig& cfg,
                                  const std::filesystem::path& cache_dir) {
  const auto prompt = model.vocab().anomaly_prompt(cls, anomaly);
  const auto key = embedding_key(image, prompt, model, cfg);
  const auto file = cache_dir.empty() ? std::filesystem::path{}
                                      : cache_dir / (cls + "_" + anomaly + "_" + hex(key) + ".emb");
  if (!file.empty() && std::filesystem::exists(file)) return load_embedding(file);

  const auto res = optimize_embedding(model.encode_prompt(prompt), image, model, sched, cfg);
  StoredEmbedding s{res.embedding, cfg.to_kv()};
  s.provenance.set("class", cls);
  s.provenance.set("anomaly", anomaly);
  s.provenance.set("image_hash", hex(hash_tensor(image)));
  s.provenance.set("model_hash", hex(model_hash(model)));
  s.provenance.set("key", hex(key));
  std::ostringstream fl;
  fl.precision(9);
  fl << (res.losses.empty() ? 0.0 : res.losses.back());
  s.provenance.set("final_loss", fl.str());
  if (res.losses.size() >= 50) {
    auto put = [&](const char* key, std::size_t step) {
      std::ostringstream sm;
      sm.precision(9);
      sm << smoothed_loss(res.losses, step, 50);
      s.provenance.set(key, sm.str());
    };
    put("early_smoothed_loss", 50);
    put("final_smoothed_loss", res.losses.size());
  }
  if (!file.empty()) {
    std::filesystem::create_directories(cache_dir);
    save_embedding(file, s.embedding, s.provenance);
  }
  return s;
}

}  // namespace o2mag::ago
