#include <benchmark/benchmark.h>

#include <random>

#include "lap/ops.hpp"
#include "lap/ot.hpp"
#include "lap/tape.hpp"
#include "lap/trainer.hpp"

namespace {

lap::Tensor random_tensor(lap::Shape shape, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  lap::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({batch, 32, 14, 14}, 1);
  const auto k = random_tensor({32, 32, 3, 3}, 2);
  for (auto _ : state) {
    lap::Tape tape;
    auto xn = tape.constant(x);
    auto kn = tape.parameter(0, k);
    auto y = lap::ops::conv2d(tape, xn, kn, {1, 1});
    auto loss = lap::ops::row_sq_norm_mean(tape, y);
    benchmark::DoNotOptimize(tape.backward(loss));
  }
  // forward + kernel gradient: two GEMMs of F*P*Q per sample
  state.counters["MAC/s"] = benchmark::Counter(
      static_cast<double>(batch) * 2.0 * 32 * 288 * 196, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_Conv2dForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({batch, 32, 14, 14}, 1);
  const auto k = random_tensor({32, 32, 3, 3}, 2);
  for (auto _ : state) {
    lap::Tape tape;
    auto y = lap::ops::conv2d(tape, tape.constant(x), tape.constant(k), {1, 1});
    benchmark::DoNotOptimize(tape.value(y));
  }
  state.counters["MAC/s"] = benchmark::Counter(
      static_cast<double>(batch) * 32 * 288 * 196, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2dForward)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_AffineForwardBackward(benchmark::State& state) {
  const auto x = random_tensor({128, 6272}, 3);
  const auto w = random_tensor({6272, 128}, 4);
  const auto b = random_tensor({128}, 5);
  for (auto _ : state) {
    lap::Tape tape;
    auto y = lap::ops::affine(tape, tape.constant(x), tape.parameter(0, w), tape.parameter(1, b));
    benchmark::DoNotOptimize(tape.backward(lap::ops::row_sq_norm_mean(tape, y)));
  }
}
BENCHMARK(BM_AffineForwardBackward)->Unit(benchmark::kMillisecond);

void BM_Hungarian(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto x = random_tensor({m, 16}, 6);
  const auto y = random_tensor({m, 16}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(lap::ot::hungarian_wp(x, y, 2.0));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Hungarian)->RangeMultiplier(2)->Range(32, 512)->Complexity()->Unit(benchmark::kMillisecond);

void BM_CirclesEpoch(benchmark::State& state) {
  lap::Architecture arch;
  arch.blocks = 9;
  arch.hidden = 8;
  arch.batch_norm = state.range(0) != 0;
  const auto split = lap::split_dataset(lap::make_circles(1000, 0.08, 0.5, 1), {});
  lap::TrainConfig cfg;
  cfg.epochs = 1;
  for (auto _ : state) {
    auto model = lap::build_model(arch, {}, 1);
    benchmark::DoNotOptimize(lap::train(model, split.train, split.test, cfg));
  }
}
BENCHMARK(BM_CirclesEpoch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
