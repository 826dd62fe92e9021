#include <benchmark/benchmark.h>

#include <vector>

#include "ropeforge/rope.hpp"

namespace {

using namespace ropeforge;

void BM_RescaledAngles(benchmark::State& state) {
    const rope::RotaryConfig cfg{static_cast<int>(state.range(0)), 10000.0, 128};
    const auto rf = rope::yarn_factors(cfg, 8.0);
    std::int64_t n = 0;
    for (auto _ : state) benchmark::DoNotOptimize(rope::rescaled_angles(cfg, rf, n++ & 4095));
}
BENCHMARK(BM_RescaledAngles)->Arg(32)->Arg(128);

void BM_ApplyRope(benchmark::State& state) {
    const rope::RotaryConfig cfg{static_cast<int>(state.range(0)), 10000.0, 128};
    const auto rf = rope::ntk_factors(cfg, 4.0);
    std::vector<double> v(static_cast<std::size_t>(cfg.head_dim), 0.5);
    std::int64_t n = 0;
    for (auto _ : state) benchmark::DoNotOptimize(rope::apply_rope(cfg, &rf, v, n++ & 4095));
}
BENCHMARK(BM_ApplyRope)->Arg(32)->Arg(128);

void BM_Generators(benchmark::State& state) {
    const rope::RotaryConfig cfg{32, 10000.0, 128};
    for (auto _ : state) {
        benchmark::DoNotOptimize(rope::pi_factors(cfg, 8.0));
        benchmark::DoNotOptimize(rope::ntk_factors(cfg, 8.0));
        benchmark::DoNotOptimize(rope::yarn_factors(cfg, 8.0));
    }
}
BENCHMARK(BM_Generators);

}  // namespace
