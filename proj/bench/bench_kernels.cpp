#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cvos/kernels.hpp"

namespace k = cvos::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// Encoder-sized layers: (in_channels, size, out_channels, stride).
k::ConvGeometry geometry(const benchmark::State& state) {
    k::ConvGeometry g;
    g.in_channels = static_cast<std::size_t>(state.range(0));
    g.in_height = g.in_width = static_cast<std::size_t>(state.range(1));
    g.out_channels = static_cast<std::size_t>(state.range(2));
    g.stride = static_cast<std::size_t>(state.range(3));
    return g;
}

void conv_args(benchmark::internal::Benchmark* b) {
    b->Args({6, 64, 16, 2})->Args({16, 32, 16, 1})->Args({16, 32, 16, 2})->Args({32, 16, 16, 1});
}

struct ConvData {
    k::ConvGeometry g;
    std::vector<float> in, w, bias, out, grad_out, grad_in, grad_w, grad_b;

    explicit ConvData(const k::ConvGeometry& geo) : g(geo) {
        const std::size_t hw = g.out_height() * g.out_width();
        in = random_vec(g.in_channels * g.in_height * g.in_width, 1);
        w = random_vec(g.out_channels * g.in_channels * g.kernel * g.kernel, 2);
        bias = random_vec(g.out_channels, 3);
        out.assign(g.out_channels * hw, 0.0f);
        grad_out = random_vec(g.out_channels * hw, 4);
        grad_in.assign(in.size(), 0.0f);
        grad_w.assign(w.size(), 0.0f);
        grad_b.assign(bias.size(), 0.0f);
    }
};

template <bool Parallel>
void BM_ConvForward(benchmark::State& state) {
    ConvData d(geometry(state));
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::conv2d_forward<float>(d.g, d.in, d.w, d.bias, d.out);
        } else {
            k::reference::conv2d_forward<float>(d.g, d.in, d.w, d.bias, d.out);
        }
        benchmark::DoNotOptimize(d.out.data());
    }
}

template <bool Parallel>
void BM_ConvBackwardInput(benchmark::State& state) {
    ConvData d(geometry(state));
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::conv2d_backward_input<float>(d.g, d.grad_out, d.w, d.grad_in);
        } else {
            k::reference::conv2d_backward_input<float>(d.g, d.grad_out, d.w, d.grad_in);
        }
        benchmark::DoNotOptimize(d.grad_in.data());
    }
}

template <bool Parallel>
void BM_ConvBackwardWeight(benchmark::State& state) {
    ConvData d(geometry(state));
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::conv2d_backward_weight<float>(d.g, d.grad_out, d.in, d.grad_w, d.grad_b);
        } else {
            k::reference::conv2d_backward_weight<float>(d.g, d.grad_out, d.in, d.grad_w, d.grad_b);
        }
        benchmark::DoNotOptimize(d.grad_w.data());
    }
}

// Attention-sized products: (m, k, n).
template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
    const auto m = static_cast<std::size_t>(state.range(0));
    const auto kk = static_cast<std::size_t>(state.range(1));
    const auto n = static_cast<std::size_t>(state.range(2));
    const auto a = random_vec(m * kk, 5), b = random_vec(kk * n, 6);
    std::vector<float> c(m * n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::matmul<float>(m, kk, n, a, b, c);
        } else {
            k::reference::matmul<float>(m, kk, n, a, b, c);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * kk * n));
}

void matmul_args(benchmark::internal::Benchmark* b) { b->Args({256, 8, 256})->Args({256, 8, 768})->Args({16, 768, 256}); }

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const auto cols = static_cast<std::size_t>(state.range(1));
    const auto in = random_vec(rows * cols, 7);
    std::vector<float> out(in.size());
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::softmax_rows<float>(rows, cols, in, out);
        } else {
            k::reference::softmax_rows<float>(rows, cols, in, out);
        }
        benchmark::DoNotOptimize(out.data());
    }
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference")->Apply(conv_args);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<false>)->Name("conv_backward_input/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardInput<true>)->Name("conv_backward_input/parallel")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardWeight<false>)->Name("conv_backward_weight/reference")->Apply(conv_args);
BENCHMARK(BM_ConvBackwardWeight<true>)->Name("conv_backward_weight/parallel")->Apply(conv_args);
BENCHMARK(BM_Matmul<false>)->Name("matmul/reference")->Apply(matmul_args);
BENCHMARK(BM_Matmul<true>)->Name("matmul/parallel")->Apply(matmul_args);
BENCHMARK(BM_Softmax<false>)->Name("softmax_rows/reference")->Args({256, 768});
BENCHMARK(BM_Softmax<true>)->Name("softmax_rows/parallel")->Args({256, 768});

int main(int argc, char** argv) {
    k::configure_threads();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
