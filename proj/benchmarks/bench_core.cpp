#include <benchmark/benchmark.h>

#include "cliplab/evaluation.hpp"
#include "cliplab/losses.hpp"
#include "cliplab/trainer.hpp"

using namespace cliplab;

namespace {

const GenerativeModel& model() {
  static const GenerativeModel gen = build_model(ModelSpec{});
  return gen;
}

BatchData batch_of(int B) {
  SampleStreams streams(1);
  return sample_batch(model(), B, streams);
}

void BM_ClipLoss(benchmark::State& state) {
  const auto batch = batch_of(static_cast<int>(state.range(0)));
  const LinearScoreModel m(completeness_weights(model()), 0.07);
  for (auto _ : state) benchmark::DoNotOptimize(clip_batch_loss(m, batch).value);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClipLoss)->Arg(16)->Arg(64)->Arg(256);

void BM_ClipGradient(benchmark::State& state) {
  const auto batch = batch_of(static_cast<int>(state.range(0)));
  const LinearScoreModel m(completeness_weights(model()), 0.07);
  for (auto _ : state) benchmark::DoNotOptimize(clip_gradient(m, batch, 0.1, RegularizerKind::positive).W.data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ClipGradient)->Arg(16)->Arg(64)->Arg(256);

void BM_TrainPool(benchmark::State& state) {
  TrainConfig cfg;
  cfg.iterations = 20;
  cfg.pool_batches = static_cast<int>(state.range(0));
  cfg.early_stop = false;
  for (auto _ : state) benchmark::DoNotOptimize(train_gd(model(), cfg, 3).model.W().data());
  state.SetItemsProcessed(state.iterations() * cfg.iterations);
}
BENCHMARK(BM_TrainPool)->Arg(16)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_ZeroShot(benchmark::State& state) {
  const LinearScoreModel m(completeness_weights(model()), 0.07);
  ZeroShotOptions opt;
  opt.n_trials = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(zero_shot_error(Scorer(m), model(), 1, opt, 5).value);
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ZeroShot)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

void BM_AlphaCurves(benchmark::State& state) {
  const LinearScoreModel m(completeness_weights(model()), 0.07);
  const auto grid = default_gamma_grid();
  for (auto _ : state)
    benchmark::DoNotOptimize(alpha_curves(Scorer(m), model(), static_cast<int>(state.range(0)), grid, 6).n_pairs);
}
BENCHMARK(BM_AlphaCurves)->Arg(20000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
