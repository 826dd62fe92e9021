#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "../support/temp_dir.hpp"
#include "ropeforge/bundle.hpp"
#include "ropeforge/checkpoint.hpp"
#include "ropeforge/corpus.hpp"
#include "ropeforge/error.hpp"
#include "ropeforge/factor_io.hpp"
#include "ropeforge/search.hpp"

namespace {

using namespace ropeforge;
using ropeforge::testing::slurp;
using ropeforge::testing::spit;
using ropeforge::testing::TempDir;

rope::FactorFile awkward_factor_file() {
    rope::FactorFile f;
    f.rotary = {8, 10000.0, 128};
    // Values that need all 17 significant digits to survive a text round trip.
    f.factors = rope::RescaleFactors::make({1.0, 1.0 + 1e-15, std::nextafter(2.0, 3.0), 1.0 / 3.0 + 2.0}, 12, 512,
                                           128);
    return f;
}

TEST(FactorFile, ValuesSurviveExactly) {
    const auto f = awkward_factor_file();
    const auto back = rope::factor_file_from_json(rope::to_json_string(f));
    EXPECT_EQ(back.rotary, f.rotary);
    EXPECT_EQ(back.factors, f.factors);
}

TEST(FactorFile, WriteReadWriteIsByteIdentical) {
    TempDir dir;
    rope::write_factor_file(dir / "a.json", awkward_factor_file());
    rope::write_factor_file(dir / "b.json", rope::read_factor_file(dir / "a.json"));
    EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
}

TEST(FactorFile, RejectsMalformedInput) {
    EXPECT_THROW(rope::factor_file_from_json("{"), InputError);
    EXPECT_THROW(rope::factor_file_from_json(R"({"head_dim": 8})"), InputError);
    EXPECT_THROW(rope::factor_file_from_json(
                     R"({"head_dim":8,"base":10000,"original_len":128,"target_len":256,"start_token":0,"factors":[1,2]})"),
                 ShapeError);
    TempDir dir;
    EXPECT_THROW(rope::read_factor_file(dir / "missing.json"), IoError);
}

model::ModelCheckpoint small_checkpoint() {
    model::ModelConfig cfg = model::ModelConfig::desk();
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.head_dim = 16;
    cfg.rotary = {16, 10000.0, 128};
    auto ckpt = model::init_model(cfg, 17);
    ckpt.train_steps = 42;
    ckpt.rng_seed = 99;
    ckpt.rescale_used = rope::pi_factors(cfg.rotary, 2.0);
    return ckpt;
}

TEST(Checkpoint, RoundTripPreservesEverything) {
    const auto ckpt = small_checkpoint();
    const auto back = model::decode_checkpoint(model::encode_checkpoint(ckpt));
    EXPECT_EQ(back.config, ckpt.config);
    EXPECT_EQ(back.train_steps, 42);
    EXPECT_EQ(back.rng_seed, 99u);
    ASSERT_TRUE(back.rescale_used);
    EXPECT_EQ(*back.rescale_used, *ckpt.rescale_used);
    ASSERT_EQ(back.params.tensors.size(), ckpt.params.tensors.size());
    for (std::size_t i = 0; i < ckpt.params.tensors.size(); ++i) {
        EXPECT_EQ(back.params.tensors[i].name, ckpt.params.tensors[i].name);
        EXPECT_EQ(back.params.tensors[i].data, ckpt.params.tensors[i].data);
    }
}

TEST(Checkpoint, WriteReadWriteIsByteIdentical) {
    TempDir dir;
    model::save_checkpoint(dir / "a.ckpt", small_checkpoint());
    model::save_checkpoint(dir / "b.ckpt", model::load_checkpoint(dir / "a.ckpt"));
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
}

TEST(Checkpoint, RejectsCorruption) {
    const std::string bytes = model::encode_checkpoint(small_checkpoint());
    EXPECT_THROW(model::decode_checkpoint("XXXX" + bytes.substr(4)), IoError);
    EXPECT_THROW(model::decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
    std::string versioned = bytes;
    versioned[4] = 9;
    EXPECT_THROW(model::decode_checkpoint(versioned), IoError);
}

TEST(Checkpoint, RejectsNonFiniteWeights) {
    auto ckpt = small_checkpoint();
    ckpt.params.tensors[1].data[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(ckpt.validate(), ConfigError);
}

TEST(TokenCache, WriteReadWriteIsByteIdentical) {
    std::mt19937 g(4);
    std::vector<corpus::Document> docs;
    for (int i = 0; i < 6; ++i) {
        corpus::Document d;
        d.name = "d" + std::to_string(i);
        d.tokens.resize(static_cast<std::size_t>(50 + 31 * i));
        for (auto& t : d.tokens) t = static_cast<Token>(g() % corpus::kVocabSize);
        docs.push_back(std::move(d));
    }
    docs.push_back({"empty", {}, corpus::Split::train});
    const auto c = corpus::from_documents(docs, {}, 1);
    TempDir dir;
    corpus::write_cache(dir / "a.tkc", c);
    const auto back = corpus::read_cache(dir / "a.tkc");
    ASSERT_EQ(back.size(), c.documents.size());
    for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back[i], c.documents[i].tokens);
    spit(dir / "b.tkc", corpus::encode_cache(back));
    EXPECT_EQ(slurp(dir / "a.tkc"), slurp(dir / "b.tkc"));
}

TEST(TokenCache, RejectsBadInput) {
    EXPECT_THROW(corpus::decode_cache("NOPE"), IoError);
    std::string truncated = corpus::encode_cache({TokenSeq{1, 2, 3}});
    truncated.pop_back();
    EXPECT_THROW(corpus::decode_cache(truncated), IoError);
    EXPECT_THROW(corpus::encode_cache({TokenSeq{1, 300}}), VocabError);
}

TEST(Bundle, WriteReadWriteIsByteIdentical) {
    const rope::RotaryConfig rot{32, 10000.0, 128};
    pipeline::FactorBundle b;
    b.rotary = rot;
    auto r = rope::ntk_factors(rot, 1.0);
    r.factors[15] = 1.25;
    b.entries.push_back({128, r});
    b.entries.push_back({2048, rope::yarn_factors(rot, 16.0)});
    b.default_factors = rope::pi_factors(rot, 128.0);
    TempDir dir;
    pipeline::write_bundle(dir / "a.json", b);
    const auto back = pipeline::read_bundle(dir / "a.json");
    ASSERT_EQ(back.entries.size(), 2u);
    EXPECT_EQ(back.entries[1].factors, b.entries[1].factors);
    EXPECT_EQ(back.default_factors, b.default_factors);
    pipeline::write_bundle(dir / "b.json", back);
    EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
}

TEST(SearchHistory, WriteReadWriteIsByteIdentical) {
    std::vector<search::HistoryRow> rows{{0, 12.5, 20.25, 16}, {1, 11.0 / 3.0, 19.0, 24}, {2, 3.5, 3.5, 32}};
    TempDir dir;
    search::write_history(dir / "a.csv", rows);
    const auto back = search::read_history(dir / "a.csv");
    ASSERT_EQ(back.size(), rows.size());
    EXPECT_EQ(back[1].best_ppl, rows[1].best_ppl);
    EXPECT_EQ(back[2].evals_total, 32);
    search::write_history(dir / "b.csv", back);
    EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
}

}  // namespace
