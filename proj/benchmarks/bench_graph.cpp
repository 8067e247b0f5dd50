#include <benchmark/benchmark.h>

#include <random>

#include "dms/graph.hpp"

namespace {

dms::Tensor random_tensor(dms::Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  dms::Tensor t = dms::Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = dist(rng);
  return t;
}

void BM_ForwardBackwardMlp(benchmark::State& state) {
  int batch = static_cast<int>(state.range(0));
  int width = static_cast<int>(state.range(1));
  std::mt19937_64 rng(0);
  dms::Tensor x = random_tensor({batch, width}, rng);
  dms::Tensor w1 = random_tensor({width, width}, rng);
  dms::Tensor w2 = random_tensor({width, width}, rng);
  for (auto _ : state) {
    dms::Graph g;
    dms::Tensor w1l = g.leaf(w1);
    dms::Tensor w2l = g.leaf(w2);
    dms::Tensor h = g.relu(g.matmul(g.constant(x), w1l, false, true));
    dms::Tensor y = g.mean(g.matmul(h, w2l, false, true));
    auto grads = g.backward(y);
    benchmark::DoNotOptimize(grads.wrt(w1l).values.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(batch) * width * width * 2);
}
BENCHMARK(BM_ForwardBackwardMlp)->Args({32, 128})->Args({128, 256});

void BM_Matmul(benchmark::State& state) {
  int n = static_cast<int>(state.range(0));
  std::mt19937_64 rng(1);
  dms::Tensor a = random_tensor({n, n}, rng);
  dms::Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    dms::Graph g;
    dms::Tensor c = g.matmul(g.constant(a), g.constant(b));
    benchmark::DoNotOptimize(c.values.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n) * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

}  // namespace
