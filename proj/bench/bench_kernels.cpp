// OpenMP kernels against the serial reference loops, on layer shapes from the
// toy model (batch 16, 32x32 input). Set OMP_NUM_THREADS to vary the team.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "xsite/kernels.hpp"

namespace k = xsite::kernels;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// args: in_channels, size, filters, stride
k::ConvGeometry geometry(const benchmark::State& s) {
  return k::ConvGeometry::make(16, s.range(0), s.range(1), s.range(1), s.range(2), 3, 3, s.range(3), 1);
}

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto g = geometry(state);
  const auto in = filled(g.input_size(), 1), w = filled(g.weight_size(), 2), b = filled(g.filters, 3);
  std::vector<double> out(g.output_size());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv2d_forward(g, in, w, b, out);
    } else {
      k::reference::conv2d_forward(g, in, w, b, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.counters["MFLOP/s"] = benchmark::Counter(2.0 * g.output_size() * g.in_channels * 9 * state.iterations() / 1e6,
                                                 benchmark::Counter::kIsRate);
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
  const auto g = geometry(state);
  const auto in = filled(g.input_size(), 1), w = filled(g.weight_size(), 2), go = filled(g.output_size(), 3);
  std::vector<double> gi(g.input_size()), gw(g.weight_size()), gb(g.filters);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv2d_backward(g, in, w, go, gi, gw, gb);
    } else {
      k::reference::conv2d_backward(g, in, w, go, gi, gw, gb);
    }
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Parallel>
void dense_forward(benchmark::State& state) {
  const std::size_t rows = 64, in_dim = state.range(0), out_dim = state.range(1);
  const auto in = filled(rows * in_dim, 1), w = filled(in_dim * out_dim, 2), b = filled(out_dim, 3);
  std::vector<double> out(rows * out_dim);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::dense_forward(rows, in_dim, out_dim, in, w, b, out);
    } else {
      k::reference::dense_forward(rows, in_dim, out_dim, in, w, b, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void moments(benchmark::State& state) {
  const std::size_t batch = 16, channels = state.range(0), spatial = state.range(1) * state.range(1);
  const auto in = filled(batch * channels * spatial, 1);
  std::vector<double> mean(channels), var(channels);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::channel_moments(batch, channels, spatial, in, mean, var);
    } else {
      k::reference::channel_moments(batch, channels, spatial, in, mean, var);
    }
    benchmark::DoNotOptimize(var.data());
  }
}

void conv_shapes(benchmark::internal::Benchmark* b) {
  b->Args({1, 32, 8, 2})->Args({8, 16, 16, 1})->Args({16, 8, 32, 2});
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv_forward/reference")->Apply(conv_shapes);
BENCHMARK(conv_forward<true>)->Name("conv_forward/openmp")->Apply(conv_shapes);
BENCHMARK(conv_backward<false>)->Name("conv_backward/reference")->Apply(conv_shapes);
BENCHMARK(conv_backward<true>)->Name("conv_backward/openmp")->Apply(conv_shapes);
BENCHMARK(dense_forward<false>)->Name("dense_forward/reference")->Args({32, 2})->Args({256, 64});
BENCHMARK(dense_forward<true>)->Name("dense_forward/openmp")->Args({32, 2})->Args({256, 64});
BENCHMARK(moments<false>)->Name("channel_moments/reference")->Args({8, 16})->Args({32, 4});
BENCHMARK(moments<true>)->Name("channel_moments/openmp")->Args({8, 16})->Args({32, 4});
BENCHMARK_MAIN();
