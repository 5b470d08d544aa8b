#include <benchmark/benchmark.h>

#include "duotrack/model.hpp"
#include "duotrack/pmca.hpp"

namespace {

using namespace duotrack;

Tensor random_tokens(int N, int d, std::uint64_t seed) {
  DeterministicRng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(N) * d);
  for (double& x : v) x = rng.normal(1.0);
  return Tensor::from_data({1, N, d}, std::move(v));
}

// length-2 key/value set per token: cost grows linearly with N
void BM_PixelwiseMha(benchmark::State& state) {
  const int N = static_cast<int>(state.range(0));
  const int d = 16;
  Tensor x_self = random_tokens(N, d, 11);
  Tensor x_other = random_tokens(N, d, 12);
  Tensor k = stack({x_self, x_other}, 2);
  Tensor v = stack({x_self, x_other}, 2);
  for (auto _ : state) {
    Tensor out = pixelwise_mha(x_self, k, v, {}, 1);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetComplexityN(N);
}

// dense token-to-token attention: cost grows quadratically with N
void BM_FullCrossAttention(benchmark::State& state) {
  const int N = static_cast<int>(state.range(0));
  const int d = 16;
  Tensor x_self = random_tokens(N, d, 11);
  Tensor x_other = random_tokens(N, d, 12);
  for (auto _ : state) {
    Tensor out = full_cross_attention(x_self, x_other, 1);
    benchmark::DoNotOptimize(out.data().data());
  }
  state.SetComplexityN(N);
}

void BM_ModelForward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.seed = 3;
  Model model = assemble_model(cfg);
  const BackboneConfig& b = cfg.backbone;
  DeterministicRng rng(99);
  auto plane = [&](int h, int w) {
    std::vector<double> v(static_cast<std::size_t>(b.ch) * h * w);
    for (double& x : v) x = rng.uniform(0.0, 1.0);
    return Tensor::from_data({1, b.ch, h, w}, std::move(v));
  };
  BranchImages rgb, x;
  for (int t = 0; t < cfg.T; ++t) {
    rgb.memory.push_back(plane(b.H_z, b.W_z));
    x.memory.push_back(plane(b.H_z, b.W_z));
  }
  rgb.search = plane(b.H_x, b.W_x);
  x.search = plane(b.H_x, b.W_x);
  for (auto _ : state) {
    ForwardResult out = model_forward(model, rgb, x, true);
    benchmark::DoNotOptimize(out.maps.cls.data().data());
  }
}

}  // namespace

BENCHMARK(BM_PixelwiseMha)->RangeMultiplier(2)->Range(128, 2048)->Complexity();
BENCHMARK(BM_FullCrossAttention)
    ->RangeMultiplier(2)
    ->Range(128, 2048)
    ->Complexity();
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
