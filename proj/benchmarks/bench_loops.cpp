#include <benchmark/benchmark.h>

#include "elt/ilsd.hpp"
#include "elt/masked.hpp"
#include "elt/model.hpp"
#include "elt/synthetic.hpp"

namespace {

elt::LoopConfig bench_config(int loop_max) {
  elt::LoopConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.mlp_dim = 64;
  cfg.loop_max = loop_max;
  cfg.seq_len = 4;
  return cfg;
}

// Forward cost should grow linearly in the loop budget.
void BM_LoopForward(benchmark::State& state) {
  const int loops = static_cast<int>(state.range(0));
  const auto cfg = bench_config(8);
  elt::Rng rng(1);
  const auto params = elt::BlockParams::init(cfg, rng);
  const auto batch = elt::make_train_batch(elt::DataSpec{}, cfg, {}, 32, rng);
  elt::LoopedModel model(params, elt::LoopedModel::Binding::kFrozen);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(batch.input, loops));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_LoopForward)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMicrosecond);

// One ILSD step (capture forward, joint loss, backward) versus a vanilla step.
void BM_TrainStepGrads(benchmark::State& state) {
  const bool ilsd = state.range(0) != 0;
  const auto cfg = bench_config(4);
  elt::Rng rng(2);
  const auto params = elt::BlockParams::init(cfg, rng);
  const auto batch = elt::make_train_batch(elt::DataSpec{}, cfg, {}, 32, rng);
  const elt::IlsdConfig ic{ilsd, 1000};
  for (auto _ : state) benchmark::DoNotOptimize(elt::compute_loss_and_grads(params, batch, ic, 10, rng));
}
BENCHMARK(BM_TrainStepGrads)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

// Full 2x2 masked decode with the enumeration oracle.
void BM_OracleDecode(benchmark::State& state) {
  const auto source = elt::MarkovGridSource::cyclic({2, 2}, 4, 2, 0.85, 0.25);
  elt::EnumerationOracle oracle(source);
  elt::DecodeOptions opts;
  opts.steps = 4;
  elt::Rng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(elt::generate(oracle, {2, 2}, 4, 0, 1, opts, rng));
}
BENCHMARK(BM_OracleDecode)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
