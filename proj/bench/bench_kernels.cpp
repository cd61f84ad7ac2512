// Serial reference vs OpenMP kernels.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "nlvt/kernels.hpp"

using namespace nlvt::kernels;

namespace {

std::vector<float> random_buffer(std::size_t n) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = d(rng);
  return v;
}

template <bool Omp>
void BM_Gemm(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const GemmShape s{n, n, n};
  const auto a = random_buffer(n * n), b = random_buffer(n * n);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Omp) {
      gemm_omp<float>(s, a, b, c);
    } else {
      gemm_serial<float>(s, a, b, c);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

// Desk-scale 3x3 convolution: batch 64, C channels on an 8x8 grid, optionally grouped.
ConvGeometry conv_geometry(const benchmark::State& state) {
  ConvGeometry g;
  g.batch = 64;
  g.in_channels = g.out_channels = static_cast<std::size_t>(state.range(0));
  g.in_h = g.in_w = 8;
  g.kernel = 3;
  g.padding = 1;
  g.groups = static_cast<std::size_t>(state.range(1));
  return g;
}

template <bool Omp>
void BM_ConvForward(benchmark::State& state) {
  const ConvGeometry g = conv_geometry(state);
  const auto x = random_buffer(g.batch * g.in_channels * g.in_h * g.in_w), w = random_buffer(g.weight_size()),
             b = random_buffer(g.out_channels);
  std::vector<float> y(g.batch * g.out_channels * g.out_h() * g.out_w());
  for (auto _ : state) {
    if constexpr (Omp) {
      conv2d_forward_omp<float>(g, x, w, b, y);
    } else {
      conv2d_forward_serial<float>(g, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Omp>
void BM_ConvBackward(benchmark::State& state) {
  const ConvGeometry g = conv_geometry(state);
  const auto x = random_buffer(g.batch * g.in_channels * g.in_h * g.in_w), w = random_buffer(g.weight_size()),
             dy = random_buffer(g.batch * g.out_channels * g.out_h() * g.out_w());
  std::vector<float> dx(x.size()), dw(w.size()), db(g.out_channels);
  for (auto _ : state) {
    if constexpr (Omp) {
      conv2d_backward_omp<float>(g, x, w, dy, dx, dw, db);
    } else {
      conv2d_backward_serial<float>(g, x, w, dy, dx, dw, db);
    }
    benchmark::DoNotOptimize(dx.data());
  }
}

void BM_AvgPool(benchmark::State& state) {
  PoolGeometry g;
  g.planes = 64 * 48;
  g.in_h = g.in_w = 8;
  g.stride = static_cast<std::size_t>(state.range(0));
  const auto x = random_buffer(g.planes * g.in_h * g.in_w);
  std::vector<float> y(g.planes * g.out_h() * g.out_w());
  for (auto _ : state) {
    avg_pool2d_forward<float>(g, x, y);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/serial")->Args({64, 1})->Args({128, 16});
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/omp")->Args({64, 1})->Args({128, 16});
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/serial")->Args({64, 1})->Args({128, 16});
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/omp")->Args({64, 1})->Args({128, 16});
BENCHMARK(BM_AvgPool)->Name("avg_pool")->Arg(2)->Arg(4);

BENCHMARK_MAIN();
