#include <benchmark/benchmark.h>

#include <cmath>

#include "ropeforge/search.hpp"

namespace {

using namespace ropeforge;

// Search loop overhead with a trivial oracle (distance to a fixed genome).
void BM_SearchLoop(benchmark::State& state) {
    const rope::RotaryConfig cfg{32, 10000.0, 128};
    search::SearchConfig sc = search::SearchConfig::desk();
    sc.max_iterations = static_cast<int>(state.range(0));
    search::FunctionOracle oracle([](const rope::RescaleFactors& g) {
        double d = 0.0;
        for (std::size_t i = 0; i < g.factors.size(); ++i) d += std::abs(g.factors[i] - (1.0 + 0.2 * i));
        return 1.0 + d;
    });
    for (auto _ : state) benchmark::DoNotOptimize(search::run_search(oracle, cfg, 4.0, sc));
}
BENCHMARK(BM_SearchLoop)->Arg(20)->Arg(40)->Unit(benchmark::kMillisecond);

void BM_Mutate(benchmark::State& state) {
    const rope::RotaryConfig cfg{32, 10000.0, 128};
    const auto sc = search::SearchConfig::desk();
    const auto space = search::SearchSpace::make(cfg, 8.0, sc);
    const auto parent = search::baseline_seeds(space)[1].genome;
    std::uint64_t s = 0;
    for (auto _ : state) benchmark::DoNotOptimize(search::mutate(parent, space, 0.3, s++));
}
BENCHMARK(BM_Mutate);

}  // namespace
