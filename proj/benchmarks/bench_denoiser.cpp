#include <benchmark/benchmark.h>

#include "o2mag/common/random.hpp"
#include "o2mag/denoiser/unet.hpp"

using namespace o2mag;
using namespace o2mag::denoiser;

namespace {

DenoiserConfig config_from(const benchmark::State& state) {
  DenoiserConfig cfg;
  cfg.channels = {static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                  static_cast<std::size_t>(state.range(2))};
  return cfg;
}

void BM_predict_noise(benchmark::State& state) {
  Denoiser model(config_from(state));
  model.init(1);
  Rng rng(2);
  const Tensor z = normal_tensor(rng, {3, 32, 32});
  const Tensor e = model.encode_prompt(model.vocab().anomaly_prompt("grid", "hole"));
  for (auto _ : state) {
    auto eps = model.predict_noise(z, 500, e);
    benchmark::DoNotOptimize(eps.ptr());
  }
  state.counters["params"] = static_cast<double>(model.parameter_count());
}
BENCHMARK(BM_predict_noise)->Args({32, 48, 64})->Args({32, 64, 64})->Args({24, 48, 64})->Unit(benchmark::kMillisecond);

void BM_train_step(benchmark::State& state) {
  Denoiser model(config_from(state));
  model.init(1);
  Rng rng(2);
  const std::size_t batch = static_cast<std::size_t>(state.range(3));
  const Tensor z = normal_tensor(rng, {batch, 3, 32, 32});
  std::vector<TokenIds> prompts(batch, model.vocab().anomaly_prompt("grid", "hole"));
  for (auto _ : state) {
    Tape tape;
    auto ctx = model.embed(tape, prompts, true);
    auto out = model.forward(tape, tape.leaf(z), std::vector<int>(batch, 500), ctx, nullptr, 0, true);
    auto loss = ops::mse(out, tape.leaf(z));
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.value().ptr());
  }
}
BENCHMARK(BM_train_step)->Args({32, 48, 64, 8})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
