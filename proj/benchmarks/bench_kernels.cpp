#include <benchmark/benchmark.h>

#include <random>

#include "swax/attention.hpp"

namespace {

using swax::AttentionBatch;
using swax::Tensor;

Tensor<float> randn(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<float> n(0.f, 1.f);
  Tensor<float> t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t.ptr()[i] = n(rng);
  return t;
}

Tensor<float> uniform(std::mt19937_64& rng, std::size_t rows, std::size_t cols, float lo, float hi) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor<float> t({rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t.ptr()[i] = u(rng);
  return t;
}

AttentionBatch<float> batch(std::size_t seq, std::size_t dim) {
  std::mt19937_64 rng(seq * 31 + dim);
  return {randn(rng, seq, dim), randn(rng, seq, dim), randn(rng, seq, dim)};
}

void BM_SlidingWindow(benchmark::State& state) {
  const auto b = batch(static_cast<std::size_t>(state.range(0)), 32);
  const auto w = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(swax::sliding_window_attention(b, w));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SlidingWindow)->ArgsProduct({{1024, 4096}, {16, 128, 1024}});

void BM_CausalSoftmax(benchmark::State& state) {
  const auto b = batch(static_cast<std::size_t>(state.range(0)), 32);
  for (auto _ : state) benchmark::DoNotOptimize(swax::causal_softmax_attention(b));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_CausalSoftmax)->Arg(1024)->Arg(4096);

void BM_LinearParallel(benchmark::State& state) {
  const auto b = batch(static_cast<std::size_t>(state.range(0)), 32);
  for (auto _ : state) benchmark::DoNotOptimize(swax::linear_attention_parallel(b, swax::FeatureMap::elu_plus_one));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_LinearParallel)->Arg(1024)->Arg(4096);

void BM_LinearRecurrent(benchmark::State& state) {
  const auto b = batch(static_cast<std::size_t>(state.range(0)), 32);
  for (auto _ : state) {
    benchmark::DoNotOptimize(swax::linear_attention_recurrent(b, swax::FeatureMap::elu_plus_one,
                                                              swax::LinearAttentionState<float>::zeros(32, 32)));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_LinearRecurrent)->Arg(1024)->Arg(4096);

void BM_GatedRecurrent(benchmark::State& state) {
  const auto seq = static_cast<std::size_t>(state.range(0));
  const auto b = batch(seq, 32);
  std::mt19937_64 rng(9);
  const swax::GateVector<float> g{uniform(rng, seq, 32, 0.f, 1.f), uniform(rng, seq, 32, 0.f, 1.f),
                                  uniform(rng, seq, 32, 0.9f, 1.f)};
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        swax::gated_linear_attention_recurrent(b, swax::FeatureMap::identity, g, Tensor<float>({32, 32})));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GatedRecurrent)->Arg(1024)->Arg(4096);

}  // namespace
