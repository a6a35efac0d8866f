#include "fieldnet/evaluation.hpp"
#include "fieldnet/maskdissoc.hpp"
#include "fieldnet/model.hpp"
#include "fieldnet/parallel.hpp"
#include "fieldnet/rng.hpp"

#include <benchmark/benchmark.h>

#include <cmath>

namespace fieldnet {
namespace {

ad::Tensor<float> random_tensor(ad::Shape s, Rng& rng) {
  std::vector<float> v(s.numel());
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return ad::Tensor<float>::from(s, std::move(v));
}

ImagePlane random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  ImagePlane img(h, w, 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.set(c, y, x, static_cast<float>(rng.uniform()));
  return img;
}

// Arguments: channels, spatial size, stride.
void BM_Conv2dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int s = static_cast<int>(state.range(1));
  const int stride = static_cast<int>(state.range(2));
  Rng rng(1);
  const auto x = random_tensor({1, c, s, s}, rng);
  const auto w = random_tensor({c, c, 3, 3}, rng);
  const auto b = random_tensor({1, c, 1, 1}, rng);
  ad::Conv2dOptions o;
  o.stride = stride;
  o.pad = 1;
  o.pad_end = stride == 2 ? 0 : 1;
  ad::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ad::conv2d(x, w, b, o));
  const int out = s / stride;
  state.counters["flops"] = benchmark::Counter(
      static_cast<double>(conv_flops(3, c, c, out, out, true)), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2dForward)->Args({16, 64, 1})->Args({32, 64, 2})->Args({64, 32, 1})
    ->Unit(benchmark::kMillisecond);

// Single-threaded MAP inference on the desk model for K = 1 and K = 10.
void BM_InferMap(benchmark::State& state) {
  set_max_jobs(1);
  const FieldNet<float> model(ModelConfig::desk());
  const ImagePlane img = random_image(64, 64, 2);
  const int k = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(model.infer_map(img, k, 0));
}
BENCHMARK(BM_InferMap)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_DistanceTransform(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  RegionMask m(s, s);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double dy = y - s / 2.0, dx = x - s / 2.5;
      m.set(y, x, dy * dy + dx * dx < s * s / 9.0);
    }
  for (auto _ : state) benchmark::DoNotOptimize(dissociate(m));
  state.SetItemsProcessed(state.iterations() * s * s);
}
BENCHMARK(BM_DistanceTransform)->Arg(64)->Arg(256)->Arg(512);

void BM_Ssim(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const ImagePlane a = random_image(s, s, 3);
  const ImagePlane b = random_image(s, s, 4);
  for (auto _ : state) benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace fieldnet

BENCHMARK_MAIN();
