#include <benchmark/benchmark.h>

#include <random>

#include "o2mag/numerics/gemm.hpp"
#include "o2mag/numerics/ops.hpp"

using namespace o2mag;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2), c({n, n});
  for (auto _ : state) {
    kernels::gemm<float>(false, false, n, n, n, a.ptr(), n, b.ptr(), n, c.ptr(), n, false);
    benchmark::DoNotOptimize(c.ptr());
  }
  state.counters["GFLOPS"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK(BM_gemm)->Arg(64)->Arg(256)->Arg(512);

void BM_conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random_tensor({2, c, hw, hw}, 3), w = random_tensor({c, c, 3, 3}, 4), b({c});
  for (auto _ : state) {
    Tape tape(false);
    auto y = ops::conv2d(tape.leaf(x), tape.borrow(w), tape.borrow(b), 1, 1);
    benchmark::DoNotOptimize(y.value().ptr());
  }
}
BENCHMARK(BM_conv3x3)->Args({32, 32})->Args({64, 16})->Args({128, 8});

void BM_conv3x3_backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random_tensor({8, c, hw, hw}, 3), w = random_tensor({c, c, 3, 3}, 4), b({c});
  for (auto _ : state) {
    Tape tape;
    auto wv = tape.borrow(w, true);
    auto y = ops::sum(ops::conv2d(tape.leaf(x), wv, tape.borrow(b, true), 1, 1));
    tape.backward(y);
    benchmark::DoNotOptimize(tape.grad(wv).ptr());
  }
}
BENCHMARK(BM_conv3x3_backward)->Args({32, 32})->Args({64, 16});

}  // namespace

BENCHMARK_MAIN();
