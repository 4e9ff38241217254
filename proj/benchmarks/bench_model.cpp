#include <benchmark/benchmark.h>

#include <random>

#include "swax/model.hpp"
#include "swax/train.hpp"

namespace {

std::vector<std::int32_t> tokens(std::size_t n, std::size_t vocab) {
  std::mt19937_64 rng(4);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = static_cast<std::int32_t>(rng() % vocab);
  return t;
}

swax::ModelConfig config(swax::Architecture arch, std::size_t window) {
  swax::ModelConfig cfg;
  cfg.architecture = arch;
  cfg.default_window = window;
  return cfg;
}

// Args: architecture index, window, sequence length.
void BM_Forward(benchmark::State& state) {
  const auto cfg = config(static_cast<swax::Architecture>(state.range(0)), static_cast<std::size_t>(state.range(1)));
  const auto model = swax::build_model<float>(cfg, 1);
  const auto seq = tokens(static_cast<std::size_t>(state.range(2)), cfg.vocab_size);
  for (auto _ : state) benchmark::DoNotOptimize(swax::forward(model, std::span<const std::int32_t>(seq)));
  state.SetItemsProcessed(state.iterations() * state.range(2));
  state.SetLabel(swax::to_string(cfg.architecture));
}
BENCHMARK(BM_Forward)
    ->Args({static_cast<int>(swax::Architecture::transformer), 128, 1024})
    ->Args({static_cast<int>(swax::Architecture::swa), 128, 1024})
    ->Args({static_cast<int>(swax::Architecture::xlstm), 128, 1024})
    ->Args({static_cast<int>(swax::Architecture::swax), 16, 1024})
    ->Args({static_cast<int>(swax::Architecture::swax), 128, 1024})
    ->Unit(benchmark::kMillisecond);

// One AdamW step on a 2 x 256 batch, the desk-scale training shape.
void BM_TrainStep(benchmark::State& state) {
  const auto window = static_cast<std::size_t>(state.range(0));
  const auto cfg = config(swax::Architecture::swax, window);
  auto model = swax::build_model<float>(cfg, 1);
  auto opt = swax::OptimizerState::zeros_like(model);
  const auto batch = tokens(2 * 257, cfg.vocab_size);
  for (auto _ : state) {
    benchmark::DoNotOptimize(swax::train_step(model, batch, 2, window, opt, {}, 1e-4));
  }
  state.SetItemsProcessed(state.iterations() * 512);
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace
