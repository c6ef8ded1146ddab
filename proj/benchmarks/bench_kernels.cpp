#include <benchmark/benchmark.h>

#include "capsroute/layers.hpp"
#include "capsroute/network.hpp"
#include "capsroute/normalizers.hpp"
#include "capsroute/routing.hpp"

using namespace capsroute;

namespace {

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t.data()) x = static_cast<T>(rng.normal());
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = randn<float>({n, n}, rng), b = randn<float>({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Arg(512);

// conv1 and primary capsules at desk width (64 filters), batch 16
void BM_Conv1Forward(benchmark::State& state) {
  Rng rng(2);
  const auto layer = make_conv_layer<float>(64, 1, 9, 1, Activation::Relu, 0.1, rng);
  const auto x = randn<float>({16, 1, 28, 28}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_forward(x, layer));
}
BENCHMARK(BM_Conv1Forward)->Unit(benchmark::kMillisecond);

void BM_PrimaryForwardBackward(benchmark::State& state) {
  Rng rng(3);
  const auto layer = make_conv_layer<float>(64, 64, 9, 2, Activation::Relu, 0.1, rng);
  const auto x = randn<float>({16, 64, 20, 20}, rng);
  for (auto _ : state) {
    const auto y = conv2d_forward(x, layer);
    const Tensor<float> g(y.shape(), 1.0f);
    benchmark::DoNotOptimize(conv2d_backward(g, x, y, layer));
  }
}
BENCHMARK(BM_PrimaryForwardBackward)->Unit(benchmark::kMillisecond);

// DigitCaps routing: batch 16, 288 children (desk) or 1152 (full), 10 parents, 16-d, r = 3
void BM_RouteSoftmax(benchmark::State& state) {
  Rng rng(4);
  const auto u = randn<float>({16, static_cast<std::size_t>(state.range(0)), 10, 16}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(route_softmax(u, 3));
}
BENCHMARK(BM_RouteSoftmax)->Arg(288)->Arg(1152)->Unit(benchmark::kMillisecond);

void BM_RouteMaxMin(benchmark::State& state) {
  Rng rng(5);
  const auto u = randn<float>({16, static_cast<std::size_t>(state.range(0)), 10, 16}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(route_maxmin(u, 3, Normalization{NormKind::MaxMin}));
}
BENCHMARK(BM_RouteMaxMin)->Arg(288)->Arg(1152)->Unit(benchmark::kMillisecond);

void BM_NetworkTrainStep(benchmark::State& state) {
  NetworkConfig cfg;
  cfg.scale_factor = 4;
  cfg.transform_init_stddev = 0.01;
  const CapsNet<float> net(cfg, 6);
  Rng rng(6);
  Tensor<float> x({16, 1, 28, 28});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  std::vector<int> labels(16);
  for (std::size_t k = 0; k < 16; ++k) labels[k] = static_cast<int>(k % 10);
  ForwardOptions<float> opts;
  opts.mask_labels = labels;
  for (auto _ : state) {
    const auto pass = net.forward(x, opts);
    benchmark::DoNotOptimize(net.backward(pass, x, labels, LossConfig{}));
  }
}
BENCHMARK(BM_NetworkTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
