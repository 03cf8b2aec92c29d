#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mvlab/models.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/simulate.hpp"
#include "mvlab/transport.hpp"

using namespace mvlab;

namespace {

constexpr double kR0 = 0.5;
constexpr int kM = 20;

CoefficientModel bench_model() {
    Matrix a0(2, 2), a1(2, 2), b(2, 2);
    a0 << -1.0, 0.3, -0.3, -1.0;
    a1 << 0.2, 0.0, 0.0, 0.2;
    b << 0.8, 0.2, 0.0, 0.8;
    return make_linear_meanfield_delay(2, a0, a1, b, Matrix::Identity(2, 2), kR0);
}

EmpiricalPathMeasure bench_measure(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd;
    const PathGrid g(kR0, kM);
    std::vector<double> flat(n * g.points() * 2);
    for (double& v : flat) v = nd(gen);
    return EmpiricalPathMeasure(g, 2, std::move(flat));
}

template <bool Parallel>
void BM_AdvanceParticles(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto model = bench_model();
    const auto init = bench_measure(n, 1);
    PathStore store(init, 4 * (kM + 1));
    std::vector<double> features(model.feature_count());
    model.features(store.current(), features);
    StepContext ctx;
    ctx.model = &model;
    ctx.h = init.grid().dt();
    ctx.features = features;
    ctx.noise_key = rng::derive_key(1, "noise");
    for (auto _ : state) {
        store.reserve_next();
        if constexpr (Parallel) {
            advance_particles(store, ctx);
        } else {
            advance_particles_serial(store, ctx);
        }
        store.commit();
        ++ctx.step_index;
        ctx.t += ctx.h;
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

template <bool Parallel>
void BM_GroundCost(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = bench_measure(n, 2), b = bench_measure(n, 3);
    for (auto _ : state) {
        auto c = Parallel ? ground_cost_matrix(a.batch(), b.batch()) : ground_cost_matrix_serial(a.batch(), b.batch());
        benchmark::DoNotOptimize(c.c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}

}  // namespace

BENCHMARK(BM_AdvanceParticles<false>)->Name("advance_particles/serial")->Arg(10000)->Arg(100000);
BENCHMARK(BM_AdvanceParticles<true>)->Name("advance_particles/openmp")->Arg(10000)->Arg(100000);
BENCHMARK(BM_GroundCost<false>)->Name("ground_cost_matrix/serial")->Arg(256)->Arg(1024);
BENCHMARK(BM_GroundCost<true>)->Name("ground_cost_matrix/openmp")->Arg(256)->Arg(1024);

BENCHMARK_MAIN();
