#include <random>

#include <benchmark/benchmark.h>

#include "vitprune/linalg.hpp"

namespace {

using vitprune::TensorD;

TensorD random_matrix(std::size_t rows, std::size_t cols, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist;
  TensorD t({rows, cols});
  for (double& x : t.values()) x = dist(gen);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const TensorD a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(vitprune::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_MatmulNT(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const TensorD a = random_matrix(n, n, 3), b = random_matrix(n, n, 4);
  for (auto _ : state) benchmark::DoNotOptimize(vitprune::matmul_nt(a, b));
}
BENCHMARK(BM_MatmulNT)->Arg(64);

void BM_Softmax(benchmark::State& state) {
  const TensorD a = random_matrix(65, 65, 5);
  for (auto _ : state) benchmark::DoNotOptimize(vitprune::softmax_rows(a));
}
BENCHMARK(BM_Softmax);

// Per-head query-key products are (d+1) x (d+1).
void BM_Svd(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const TensorD a = random_matrix(n, n, 6);
  for (auto _ : state) benchmark::DoNotOptimize(vitprune::svd(a));
}
BENCHMARK(BM_Svd)->Arg(17)->Arg(33)->Arg(65);

}  // namespace
