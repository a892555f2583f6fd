// Serial reference vs OpenMP for the three data-parallel kernels.

#include "kmfpe/kernels.hpp"

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

using namespace kmfpe;

namespace {

struct FpeFixture {
    std::vector<double> y, p, out;
    explicit FpeFixture(int n) : y(static_cast<std::size_t>(n)), p(y.size()), out(y.size()) {
        for (int i = 0; i < n; ++i) {
            y[static_cast<std::size_t>(i)] = -40.0 + 80.0 * i / (n - 1);
            p[static_cast<std::size_t>(i)] = std::exp(-0.5 * y[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(i)]);
        }
    }
    kernels::FpeStepArgs args() {
        return {y, p, out, {1.0, 0.0, 0.5, 0.0, 0.2}, 1e-5, y[1] - y[0], kernels::Boundary::ZeroFlux};
    }
};

template <void (*Step)(const kernels::FpeStepArgs&)>
void fpe_step(benchmark::State& state) {
    FpeFixture f(static_cast<int>(state.range(0)));
    const auto a = f.args();
    for (auto _ : state) {
        Step(a);
        benchmark::DoNotOptimize(f.out.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

std::pair<std::vector<double>, std::vector<double>> pairs(std::size_t n) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    std::vector<double> x1(n), x2(n);
    for (std::size_t k = 0; k < n; ++k) {
        x1[k] = g(rng);
        x2[k] = 0.8 * x1[k] + 0.6 * g(rng);
    }
    return {x1, x2};
}

template <void (*Acc)(std::span<const double>, std::span<const double>, ConditionalDensity&)>
void accumulate_joint(benchmark::State& state) {
    const auto [x1, x2] = pairs(static_cast<std::size_t>(state.range(0)));
    const auto e = symmetric_edges(41, 6.0);
    for (auto _ : state) {
        ConditionalDensity cd(e, e, 0.0, 1.0);
        Acc(x1, x2, cd);
        benchmark::DoNotOptimize(cd.raw_counts().data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <kernels::EnsembleResult (*Run)(const kernels::EnsembleArgs&)>
void euler_maruyama(benchmark::State& state) {
    const std::vector<std::array<double, 5>> coeffs(1000, {1.0, 0.0, 0.5, 0.0, 0.2});
    const std::vector<double> x0(static_cast<std::size_t>(state.range(0)), 0.0);
    kernels::EnsembleArgs a;
    a.coeffs = coeffs;
    a.x0 = x0;
    a.record_every = 100;
    a.seed = 3;
    for (auto _ : state) benchmark::DoNotOptimize(Run(a).states.data());
    state.SetItemsProcessed(state.iterations() * state.range(0) * 1000);
}

} // namespace

BENCHMARK(fpe_step<kernels::serial::fpe_step>)->Name("fpe_step/serial")->Arg(4001)->Arg(40001);
BENCHMARK(fpe_step<kernels::omp::fpe_step>)->Name("fpe_step/omp")->Arg(4001)->Arg(40001)->UseRealTime();
BENCHMARK(accumulate_joint<kernels::serial::accumulate_joint>)->Name("accumulate_joint/serial")->Arg(1 << 20);
BENCHMARK(accumulate_joint<kernels::omp::accumulate_joint>)->Name("accumulate_joint/omp")->Arg(1 << 20)->UseRealTime();
BENCHMARK(euler_maruyama<kernels::serial::euler_maruyama>)->Name("euler_maruyama/serial")->Arg(256);
BENCHMARK(euler_maruyama<kernels::omp::euler_maruyama>)->Name("euler_maruyama/omp")->Arg(256)->UseRealTime();

BENCHMARK_MAIN();
