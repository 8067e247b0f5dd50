#include <benchmark/benchmark.h>

#include <random>

#include "dms/topk.hpp"

namespace {

void BM_NormalizeImportance(benchmark::State& state) {
  int u = static_cast<int>(state.range(0));
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> dist(0, 1);
  std::vector<double> c(static_cast<size_t>(u));
  for (double& v : c) v = dist(rng);
  for (auto _ : state) {
    auto out = dms::normalize_importance(c);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * u);
}
BENCHMARK(BM_NormalizeImportance)->Arg(100)->Arg(512)->Arg(4096);

void BM_MaskPath(benchmark::State& state) {
  int u = static_cast<int>(state.range(0));
  dms::TopkOperator op = dms::make_topk("bench", u, dms::DimensionKind::width);
  std::mt19937_64 rng(0);
  std::uniform_real_distribution<double> dist(0, 1);
  for (double& v : op.importance) v = dist(rng);
  op.a = 0.5;
  for (auto _ : state) {
    dms::Graph g;
    dms::TopkMask m = dms::build_mask(g, op);
    auto grads = g.backward(g.sum(m.mask));
    benchmark::DoNotOptimize(grads.wrt(m.a).values.data());
  }
}
BENCHMARK(BM_MaskPath)->Arg(100)->Arg(512);

}  // namespace
