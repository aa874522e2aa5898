// Serial reference vs. OpenMP kernels. Run with OMP_NUM_THREADS set to compare.

#include <benchmark/benchmark.h>

#include "hsi/nn.hpp"
#include "hsi/phantom.hpp"
#include "hsi/spectral.hpp"
#include "hsi/superpixel.hpp"

namespace {

const hsi::PhantomScene& scene() {
  static const hsi::PhantomScene s = hsi::generate_scene(hsi::standard_phantom(7));
  return s;
}

hsi::Exec exec_of(const benchmark::State& state) {
  return state.range(0) == 0 ? hsi::Exec::serial : hsi::Exec::parallel;
}

void BM_SamMap(benchmark::State& state) {
  const auto& s = scene();
  const auto ref = s.truth.at(1);
  for (auto _ : state) benchmark::DoNotOptimize(hsi::sam_map(s.cube, ref, exec_of(state)));
}
BENCHMARK(BM_SamMap)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Slic(benchmark::State& state) {
  const auto& s = scene();
  for (auto _ : state) benchmark::DoNotOptimize(hsi::slic_segment(s.cube, {}, exec_of(state)));
}
BENCHMARK(BM_Slic)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_SlicCenterCentricReference(benchmark::State& state) {
  const auto& s = scene();
  for (auto _ : state) benchmark::DoNotOptimize(hsi::slic_segment_reference(s.cube, {}));
}
BENCHMARK(BM_SlicCenterCentricReference)->Unit(benchmark::kMillisecond);

void BM_PredictProba(benchmark::State& state) {
  const auto spec = hsi::nn::tissue_cnn_spec(104, 12, {16, 32, 64}, 40, 2);
  const hsi::nn::Network net(spec, 3);
  hsi::Rng rng(5);
  std::vector<std::vector<double>> inputs(64, std::vector<double>(spec.input.size()));
  for (auto& x : inputs) {
    for (auto& v : x) v = rng.normal();
  }
  std::vector<hsi::nn::ExampleView> views;
  for (const auto& x : inputs) views.push_back({x, 0});
  for (auto _ : state) benchmark::DoNotOptimize(hsi::nn::predict_proba(net, views, 16, exec_of(state)));
}
BENCHMARK(BM_PredictProba)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
