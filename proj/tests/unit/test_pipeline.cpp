#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "../support/temp_dir.hpp"
#include "ropeforge/error.hpp"
#include "ropeforge/factor_io.hpp"
#include "ropeforge/pipeline.hpp"

namespace {

using namespace ropeforge;
using namespace ropeforge::pipeline;
using ropeforge::testing::TempDir;

const rope::RotaryConfig kRot{32, 10000.0, 128};

TEST(Bundle, SelectsSmallestCoveringEntry) {
    const auto b = assemble_bundle(kRot,
                                   {{128, rope::ntk_factors(kRot, 1.0)}, {256, rope::yarn_factors(kRot, 2.0)}},
                                   rope::pi_factors(kRot, 16.0), rope::pi_factors(kRot, 128.0));
    ASSERT_EQ(b.size(), 4u);
    EXPECT_EQ(&select_factors(b, 1), &b.entries[0].factors);
    EXPECT_EQ(&select_factors(b, 128), &b.entries[0].factors);
    EXPECT_EQ(&select_factors(b, 129), &b.entries[1].factors);
    EXPECT_EQ(&select_factors(b, 2048), &b.entries[2].factors);
    EXPECT_EQ(&select_factors(b, 2049), &b.default_factors);
    EXPECT_EQ(&select_factors(b, 1 << 20), &b.default_factors);
    // Exhaustively: the chosen entry is the first whose max_len covers the length.
    for (std::int64_t n = 1; n <= 4096; ++n) {
        const auto* want = &b.default_factors;
        for (const auto& e : b.entries) {
            if (n <= e.max_len) {
                want = &e.factors;
                break;
            }
        }
        ASSERT_EQ(&select_factors(b, n), want) << n;
    }
}

TEST(Bundle, ValidateRejectsBadOrdering) {
    FactorBundle b = single_factor_bundle(kRot, rope::pi_factors(kRot, 4.0));
    EXPECT_NO_THROW(b.validate());
    b.entries = {{256, rope::pi_factors(kRot, 2.0)}, {256, rope::pi_factors(kRot, 2.0)}};
    EXPECT_THROW(b.validate(), ConfigError);
    b.entries = {{512, rope::pi_factors(kRot, 2.0)}};
    EXPECT_THROW(b.validate(), ConfigError);
    EXPECT_THROW(bundle_from_json("{}"), DataError);
}

TEST(PipelineConfig, JsonRoundTrip) {
    const auto desk = PipelineConfig::desk();
    const std::string text = config_to_json(desk);
    EXPECT_EQ(config_to_json(config_from_json(text, PipelineConfig::paper())), text);
    const auto patched = config_from_json(R"({"seed": 9, "targets": {"final_len": 8192}})", desk);
    EXPECT_EQ(patched.seed, 9u);
    EXPECT_EQ(patched.targets.final_len, 8192);
    EXPECT_EQ(patched.targets.mid_len, desk.targets.mid_len);
}

TEST(PipelineConfig, RejectsUnknownAndInconsistent) {
    const auto desk = PipelineConfig::desk();
    EXPECT_THROW(config_from_json(R"({"sead": 9})", desk), ConfigError);
    EXPECT_THROW(config_from_json(R"({"targets": {"final": 9}})", desk), ConfigError);
    EXPECT_THROW(config_from_json("[1]", desk), ConfigError);
    EXPECT_THROW(config_from_json("{", desk), ConfigError);
    EXPECT_THROW(PipelineConfig::preset("huge"), ConfigError);
    auto cfg = desk;
    cfg.targets.full_len = cfg.targets.mid_len;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = desk;
    cfg.targets.recovery_lens = {128, 512};
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(desk.validate());
    EXPECT_NO_THROW(PipelineConfig::paper().validate());
}

TEST(SecondarySeeds, ComposeWithFinetunedFactors) {
    const auto sc = search::SearchConfig::desk();
    const auto space = search::SearchSpace::for_target(kRot, 16384, sc);
    const auto finetuned = rope::pi_factors(kRot, 16.0);
    const auto seeds = secondary_seeds(space, finetuned);
    ASSERT_EQ(seeds.size(), 3u);
    EXPECT_EQ(seeds[0].provenance, search::Provenance::seed_pi);
    for (const auto& s : seeds) {
        EXPECT_TRUE(space.admits(s.genome));
        EXPECT_EQ(s.genome.target_len, 16384);
    }
    // PI composed with PI is PI at the product ratio.
    for (double f : seeds[0].genome.factors) EXPECT_EQ(f, space.grid.value(space.grid.snap(128.0)));
    // NTK and YaRN keep the highest frequency at the fine-tuned factor.
    EXPECT_EQ(seeds[1].genome.factors.front(), space.grid.value(space.grid.snap(16.0)));
}

TEST(RunLock, ExcludesSecondHolder) {
    TempDir dir;
    {
        RunLock a(dir.path());
        EXPECT_THROW(RunLock b(dir.path()), Error);
    }
    EXPECT_NO_THROW(RunLock c(dir.path()));
}

PipelineConfig tiny_pipeline(const std::filesystem::path& run_dir) {
    PipelineConfig cfg = PipelineConfig::desk();
    cfg.model.n_layers = 1;
    cfg.model.d_model = 32;
    cfg.model.n_heads = 2;
    cfg.model.head_dim = 16;
    cfg.model.ffn_mult = 2;
    cfg.model.trained_len = 16;
    cfg.model.rotary = {16, 10000.0, 16};
    cfg.base_train.steps = 10;
    cfg.base_train.batch_size = 4;
    cfg.base_train.seq_len = 16;
    cfg.base_train.warmup_steps = 2;
    cfg.finetune_steps_mid = 2;
    cfg.finetune_steps_full = 2;
    cfg.finetune.batch_size = 2;
    for (auto* sc : {&cfg.search, &cfg.search_final, &cfg.search_recovery}) sc->max_iterations = 2;
    cfg.search_docs = 2;
    cfg.search_docs_final = 2;
    cfg.targets = {32, 48, 64, {16, 32}};
    cfg.eval.ppl_lens = {16, 64};
    cfg.eval.ppl_docs = 2;
    cfg.eval.passkey_lens = {64};
    cfg.eval.passkey_iterations = 1;
    cfg.synth = {200'000, 2'000, 4'000, 3};
    cfg.run_dir = run_dir;
    cfg.threads = 1;
    return cfg;
}

TEST(RunProgressive, CompletesAndResumes) {
    TempDir dir;
    const auto cfg = tiny_pipeline(dir / "run");
    const auto first = run_progressive(cfg);
    EXPECT_TRUE(first.skipped_stages.empty());
    EXPECT_EQ(first.bundle.size(), 4u);
    ASSERT_EQ(first.bundle_ppl.rows.size(), 2u);
    const RunLayout layout{cfg.run_dir};
    for (const auto& p : {layout.base_ckpt(), layout.ft_ckpt(), layout.stage1_mid(), layout.stage1_full(),
                          layout.stage2(), layout.recovery(16), layout.recovery(32), layout.bundle(),
                          layout.manifest(), layout.search_logs() / "stage2.csv"}) {
        EXPECT_TRUE(std::filesystem::exists(p)) << p;
    }
    const std::string bundle_bytes = ropeforge::testing::slurp(layout.bundle());

    const auto second = run_progressive(cfg);
    EXPECT_EQ(second.skipped_stages.size(), 9u);
    EXPECT_EQ(ropeforge::testing::slurp(layout.bundle()), bundle_bytes);

    // Touching a search output reruns the stages that depend on it.
    rope::write_factor_file(layout.stage2(), {cfg.model.rotary, rope::pi_factors(cfg.model.rotary, 4.0)});
    const auto third = run_progressive(cfg);
    EXPECT_EQ(std::count(third.skipped_stages.begin(), third.skipped_stages.end(), "stage2"), 0);
    EXPECT_EQ(ropeforge::testing::slurp(layout.bundle()), bundle_bytes);
}

}  // namespace
