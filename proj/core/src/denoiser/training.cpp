#include "o2mag/denoiser/training.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "o2mag/common/random.hpp"
#include "o2mag/numerics/adam.hpp"

namespace o2mag::denoiser {

TrainingCorpus::TrainingCorpus(std::vector<PoolImage> normals, Vocabulary vocab, double defect_fraction)
    : normals_(std::move(normals)), vocab_(std::move(vocab)), defect_fraction_(defect_fraction) {
  if (normals_.empty()) throw std::invalid_argument("training corpus: empty normal pool");
  if (defect_fraction_ < 0 || defect_fraction_ > 1) throw std::invalid_argument("training corpus: defect fraction outside [0,1]");
}

TrainingCorpus TrainingCorpus::from_manifest(const dataset::Manifest& manifest, Vocabulary vocab,
                                             double defect_fraction) {
  std::vector<PoolImage> pool;
  for (const auto* r : manifest.select("train-normal")) pool.push_back({r->cls, manifest.image(*r)});
  return TrainingCorpus(std::move(pool), std::move(vocab), defect_fraction);
}

TrainingExample TrainingCorpus::draw(std::uint64_t seed) const {
  Rng rng(seed);
  const auto& src = normals_[std::uniform_int_distribution<std::size_t>(0, normals_.size() - 1)(rng)];
  TrainingExample ex;
  ex.cls = src.cls;
  ex.image = dataset::augment_normal(src.image, dataset::augment_policy_for(src.cls), rng);
  if (std::uniform_real_distribution<double>(0, 1)(rng) < defect_fraction_) {
    const auto& types = dataset::defect_types();
    ex.defect = types[std::uniform_int_distribution<std::size_t>(0, types.size() - 1)(rng)];
    const auto spec = dataset::default_defect_spec(ex.defect);
    const auto alpha = dataset::sample_defect_alpha(spec, rng);
    ex.image = dataset::composite_defect(ex.image, ex.defect, alpha, spec.intensity, rng);
    ex.prompt = vocab_.anomaly_prompt(ex.cls, ex.defect);
  } else {
    static const char* const adjectives[] = {"", "clean", "intact"};
    ex.defect = "good";
    ex.prompt = vocab_.normal_prompt(ex.cls, adjectives[std::uniform_int_distribution<int>(0, 2)(rng)]);
  }
  return ex;
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  kv.set("steps", std::to_string(steps));
  kv.set("batch", std::to_string(batch));
  kv.set("lr", std::to_string(lr));
  kv.set("warmup", std::to_string(warmup));
  kv.set("final_lr_fraction", std::to_string(final_lr_fraction));
  kv.set("clip_norm", std::to_string(clip_norm));
  kv.set("ema_decay", std::to_string(ema_decay));
  kv.set("null_prompt_rate", std::to_string(null_prompt_rate));
  kv.set("validation_size", std::to_string(validation_size));
  kv.set("validation_every", std::to_string(validation_every));
  kv.set("seed", std::to_string(seed));
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig c;
  c.steps = static_cast<std::size_t>(kv.get_int("steps", static_cast<long long>(c.steps)));
  c.batch = static_cast<std::size_t>(kv.get_int("batch", static_cast<long long>(c.batch)));
  c.lr = static_cast<float>(kv.get_double("lr", c.lr));
  c.warmup = static_cast<std::size_t>(kv.get_int("warmup", static_cast<long long>(c.warmup)));
  c.final_lr_fraction = static_cast<float>(kv.get_double("final_lr_fraction", c.final_lr_fraction));
  c.clip_norm = static_cast<float>(kv.get_double("clip_norm", c.clip_norm));
  c.ema_decay = static_cast<float>(kv.get_double("ema_decay", c.ema_decay));
  c.null_prompt_rate = kv.get_double("null_prompt_rate", c.null_prompt_rate);
  c.validation_size = static_cast<std::size_t>(kv.get_int("validation_size", static_cast<long long>(c.validation_size)));
  c.validation_every = static_cast<std::size_t>(kv.get_int("validation_every", static_cast<long long>(c.validation_every)));
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  if (c.batch == 0) throw std::invalid_argument("train config: batch must be positive");
  return c;
}

namespace {

Tensor stack(const std::vector<Tensor>& items) {
  Shape s = items.front().shape();
  s.insert(s.begin(), items.size());
  Tensor out(s);
  const std::size_t n = items.front().size();
  for (std::size_t i = 0; i < items.size(); ++i) std::copy_n(items[i].ptr(), n, out.ptr() + i * n);
  return out;
}

float learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup) return cfg.lr * static_cast<float>(step + 1) / static_cast<float>(cfg.warmup);
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg.steps - std::min(cfg.steps, cfg.warmup)));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup) / span);
  const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lr * static_cast<float>(cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * c);
}

}  // namespace

ValidationBatch make_validation_batch(const TrainingCorpus& corpus, std::size_t size, int train_steps,
                                      std::uint64_t seed) {
  ValidationBatch b;
  Rng rng(derive_seed(seed, "validation-noise"));
  for (std::size_t i = 0; i < size; ++i) {
    auto ex = corpus.draw(derive_seed(seed, "validation", i));
    b.x0.push_back(std::move(ex.image));
    b.prompts.push_back(std::move(ex.prompt));
    // evenly spread timesteps so the loss covers the whole schedule
    b.t.push_back(1 + static_cast<int>((static_cast<std::size_t>(train_steps - 1) * i) / std::max<std::size_t>(1, size - 1)));
    b.eps.push_back(normal_tensor(rng, b.x0.back().shape()));
  }
  return b;
}

double validation_loss(const Denoiser& model, const sched::Scheduler& sched, const ValidationBatch& batch) {
  double total = 0;
  std::size_t count = 0;
  constexpr std::size_t chunk = 8;
  for (std::size_t lo = 0; lo < batch.x0.size(); lo += chunk) {
    const std::size_t hi = std::min(batch.x0.size(), lo + chunk);
    std::vector<Tensor> zs, eps;
    std::vector<TokenIds> prompts;
    std::vector<int> ts;
    for (std::size_t i = lo; i < hi; ++i) {
      zs.push_back(sched.add_noise(batch.x0[i], batch.t[i], batch.eps[i]));
      eps.push_back(batch.eps[i]);
      prompts.push_back(batch.prompts[i]);
      ts.push_back(batch.t[i]);
    }
    Tape tape(false);
    auto out = model.forward(tape, tape.leaf(stack(zs)), ts, model.embed(tape, prompts, false));
    const Tensor target = stack(eps);
    for (std::size_t k = 0; k < target.size(); ++k) {
      const double d = static_cast<double>(out.value().data()[k]) - target.data()[k];
      total += d * d;
    }
    count += target.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

TrainResult train_denoiser(Denoiser& model, const TrainingCorpus& corpus, const sched::Scheduler& sched,
                           const TrainConfig& cfg, const std::function<void(const TrainProgress&)>& progress) {
  auto& params = model.params();
  std::vector<std::string> names;
  std::vector<Tensor*> ptrs;
  for (auto& [name, t] : params) {
    names.push_back(name);
    ptrs.push_back(&t);
  }
  std::vector<const Tensor*> cptrs(ptrs.begin(), ptrs.end());
  AdamState adam(cptrs, AdamOptions{cfg.lr});
  std::map<std::string, Tensor> ema = params;

  const ValidationBatch vbatch =
      make_validation_batch(corpus, cfg.validation_size, sched.config().train_steps, derive_seed(cfg.seed, "validation"));
  auto validate_ema = [&] {
    Denoiser m = model;
    m.params() = ema;
    return validation_loss(m, sched, vbatch);
  };

  TrainResult result;
  if (cfg.validation_size > 0) result.validation.emplace_back(0, validate_ema());

  const auto& vocab = model.vocab();
  double first_loss = -1, running = 0;
  std::size_t over = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, "train-step", step));
    std::uniform_int_distribution<int> pick_t(1, sched.config().train_steps);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<Tensor> zs, eps;
    std::vector<TokenIds> prompts;
    std::vector<int> ts;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      auto ex = corpus.draw(derive_seed(cfg.seed, "train-sample", step * cfg.batch + i));
      const int t = pick_t(rng);
      Tensor e = normal_tensor(rng, ex.image.shape());
      zs.push_back(sched.add_noise(ex.image, t, e));
      eps.push_back(std::move(e));
      ts.push_back(t);
      prompts.push_back(u(rng) < cfg.null_prompt_rate ? vocab.null_prompt() : ex.prompt);
    }

    Tape tape(true);
    auto ctx = model.embed(tape, prompts, true);
    auto out = model.forward(tape, tape.leaf(stack(zs)), ts, ctx, nullptr, 0, true);
    auto loss = ops::mse(out, tape.leaf(stack(eps)));
    tape.backward(loss);
    const double lv = loss.value().data()[0];

    std::map<std::string, Tensor> grads;
    for (const auto& n : tape.nodes()) {
      if (n.op != "leaf" || !n.requires_grad || n.name.empty() || n.grad.empty()) continue;
      auto [it, fresh] = grads.try_emplace(n.name, n.grad);
      if (!fresh) {
        for (std::size_t k = 0; k < n.grad.size(); ++k) it->second.data()[k] += n.grad.data()[k];
      }
    }
    std::vector<Tensor> glist;
    double sq = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
      auto it = grads.find(names[i]);
      glist.push_back(it == grads.end() ? Tensor(ptrs[i]->shape()) : std::move(it->second));
      for (float g : glist.back().data()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (cfg.clip_norm > 0 && norm > cfg.clip_norm) {
      const float s = static_cast<float>(cfg.clip_norm / norm);
      for (auto& g : glist)
        for (auto& v : g.data()) v *= s;
    }
    const float lr = learning_rate(cfg, step);
    adam.set_lr(lr);
    adam.update(ptrs, glist, names);

    // EMA with a short ramp so early checkpoints are not dominated by init.
    const float d = std::min(cfg.ema_decay, static_cast<float>(step + 1) / static_cast<float>(step + 10));
    for (std::size_t i = 0; i < names.size(); ++i) {
      auto e = ema[names[i]].data();
      const auto p = std::as_const(*ptrs[i]).data();
      for (std::size_t k = 0; k < e.size(); ++k) e[k] = d * e[k] + (1.0f - d) * p[k];
    }

    if (first_loss < 0) {
      first_loss = lv;
      running = lv;
    }
    running = 0.99 * running + 0.01 * lv;
    result.losses.push_back(lv);
    over = lv > cfg.divergence_factor * first_loss ? over + 1 : 0;
    if (over >= cfg.divergence_window) {
      throw std::runtime_error("denoiser training diverged at step " + std::to_string(step) + ": loss " +
                               std::to_string(lv) + " vs initial " + std::to_string(first_loss));
    }

    TrainProgress pr{step + 1, lv, running, lr, -1};
    if (cfg.validation_size > 0 && cfg.validation_every > 0 &&
        ((step + 1) % cfg.validation_every == 0 || step + 1 == cfg.steps)) {
      pr.validation_loss = validate_ema();
      result.validation.emplace_back(step + 1, pr.validation_loss);
    }
    if (progress) progress(pr);
  }
  result.final_running_loss = running;
  if (cfg.steps > 0) params = ema;
  return result;
}

}  // namespace o2mag::denoiser
