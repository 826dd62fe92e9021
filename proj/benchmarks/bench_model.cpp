#include <benchmark/benchmark.h>

#include "ropeforge/model.hpp"

namespace {

using namespace ropeforge;

TokenSeq tokens_of(int n) {
    TokenSeq t(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = (i * 37 + 11) % 256;
    return t;
}

void BM_Forward(benchmark::State& state) {
    const auto ckpt = model::init_model(model::ModelConfig::desk(), 1);
    const int n = static_cast<int>(state.range(0));
    const auto rf = rope::identity_factors(ckpt.config.rotary, n);
    const auto toks = tokens_of(n);
    for (auto _ : state) benchmark::DoNotOptimize(model::token_nll(ckpt, toks, &rf));
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Forward)->Arg(128)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_LossAndGrads(benchmark::State& state) {
    const auto ckpt = model::init_model(model::ModelConfig::desk(), 1);
    const int n = static_cast<int>(state.range(0));
    const auto rf = rope::identity_factors(ckpt.config.rotary, n);
    const auto toks = tokens_of(n);
    for (auto _ : state) benchmark::DoNotOptimize(model::loss_and_grads(ckpt, toks, &rf));
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_LossAndGrads)->Arg(128)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_DecodeStep(benchmark::State& state) {
    const auto ckpt = model::init_model(model::ModelConfig::desk(), 1);
    const int n = static_cast<int>(state.range(0));
    const auto rf = rope::identity_factors(ckpt.config.rotary, n + 8);
    const auto prompt = tokens_of(n);
    for (auto _ : state) benchmark::DoNotOptimize(model::generate_greedy(ckpt, prompt, &rf, 8));
}
BENCHMARK(BM_DecodeStep)->Arg(512)->Unit(benchmark::kMillisecond);

}  // namespace
