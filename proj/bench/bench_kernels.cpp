// Serial reference kernels against their OpenMP counterparts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "pointdiff/kernels.hpp"

using namespace pointdiff;

namespace {

std::vector<Point> cloud(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::vector<Point> out(n);
  for (auto& p : out) p = {u(rng), u(rng), u(rng)};
  return out;
}

template <auto Fn>
void nearest(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = cloud(n, 1), b = cloud(n, 2);
  std::vector<double> out(n);
  for (auto _ : state) {
    Fn(a, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto Fn>
void fps(benchmark::State& state) {
  const auto a = cloud(static_cast<std::size_t>(state.range(0)), 3);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a, 64, 0));
}

template <auto Fn>
void knn(benchmark::State& state) {
  const auto a = cloud(static_cast<std::size_t>(state.range(0)), 4);
  const auto centers = cloud(64, 5);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a, centers, 32));
}

template <auto Fn>
void matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<float> a(n * n, 0.5f), b(n * n, 0.25f), c(n * n);
  for (auto _ : state) {
    Fn(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

}  // namespace

BENCHMARK(nearest<kernels::serial::nearest_squared>)->Name("nearest_squared/serial")->Range(512, 8192);
BENCHMARK(nearest<kernels::omp::nearest_squared>)->Name("nearest_squared/omp")->Range(512, 8192);
BENCHMARK(fps<kernels::serial::farthest_points>)->Name("farthest_points/serial")->Range(2048, 16384);
BENCHMARK(fps<kernels::omp::farthest_points>)->Name("farthest_points/omp")->Range(2048, 16384);
BENCHMARK(knn<kernels::serial::k_nearest>)->Name("k_nearest/serial")->Range(2048, 16384);
BENCHMARK(knn<kernels::omp::k_nearest>)->Name("k_nearest/omp")->Range(2048, 16384);
BENCHMARK(matmul<kernels::serial::matmul<float>>)->Name("matmul/serial")->Range(64, 256);
BENCHMARK(matmul<kernels::omp::matmul<float>>)->Name("matmul/omp")->Range(64, 256);

BENCHMARK_MAIN();
