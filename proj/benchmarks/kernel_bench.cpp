#include <benchmark/benchmark.h>

#include "cluda/graph.hpp"
#include "cluda/rng.hpp"

namespace {

cluda::TensorF rand_f32(cluda::Shape shape, std::uint64_t seed) {
  cluda::Rng rng(seed);
  cluda::TensorF t = cluda::TensorF::zeros(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

void BM_Conv2d3x3Forward(benchmark::State& state) {
  const int hw = static_cast<int>(state.range(0));
  const int ch = static_cast<int>(state.range(1));
  const cluda::TensorF x = rand_f32({hw, hw, ch}, 1);
  const cluda::TensorF w = rand_f32({3, 3, ch, ch}, 2);
  const cluda::TensorF b = rand_f32({ch}, 3);
  for (auto _ : state) {
    cluda::Graph<float> g(false);
    auto y = g.conv2d3x3(g.constant(x), g.constant(w), g.constant(b), 1);
    benchmark::DoNotOptimize(g.value(y).data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(hw) * hw * 9 * ch * ch);
}
BENCHMARK(BM_Conv2d3x3Forward)->Args({32, 16})->Args({64, 16})->Args({16, 64});

void BM_Conv2d3x3Backward(benchmark::State& state) {
  const int hw = static_cast<int>(state.range(0));
  const int ch = static_cast<int>(state.range(1));
  const cluda::TensorF x = rand_f32({hw, hw, ch}, 1);
  const cluda::TensorF w = rand_f32({3, 3, ch, ch}, 2);
  const cluda::TensorF b = rand_f32({ch}, 3);
  for (auto _ : state) {
    cluda::Graph<float> g;
    auto y = g.conv2d3x3(g.leaf(x, true), g.leaf(w, true), g.leaf(b, true), 1);
    g.backward(g.mean_all(y));
    benchmark::DoNotOptimize(g.node_count());
  }
}
BENCHMARK(BM_Conv2d3x3Backward)->Args({32, 16})->Args({16, 64});

void BM_BilinearResize(benchmark::State& state) {
  const cluda::TensorF x = rand_f32({16, 16, 64}, 5);
  for (auto _ : state) {
    cluda::Graph<float> g(false);
    auto y = g.bilinear_resize(g.constant(x), 64, 64);
    benchmark::DoNotOptimize(g.value(y).data.data());
  }
}
BENCHMARK(BM_BilinearResize);

void BM_SoftmaxLast(benchmark::State& state) {
  const cluda::TensorF x = rand_f32({64, 64, 8}, 6);
  for (auto _ : state) {
    cluda::Graph<float> g(false);
    auto y = g.softmax_last(g.constant(x));
    benchmark::DoNotOptimize(g.value(y).data.data());
  }
}
BENCHMARK(BM_SoftmaxLast);

}  // namespace
