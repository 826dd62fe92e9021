#include <gtest/gtest.h>

#include <sstream>

#include "../support/temp_dir.hpp"
#include "ropeforge/cli.hpp"
#include "ropeforge/factor_io.hpp"

namespace {

using ropeforge::testing::TempDir;

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "ropeforge");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = ropeforge::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

TEST(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run_cli({}).code, 1);
    EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
    EXPECT_EQ(run_cli({"factors", "gen"}).code, 1);
    EXPECT_EQ(run_cli({"--preset", "huge", "pipeline"}).code, 1);
    EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST(Cli, FactorsGenAndShow) {
    TempDir dir;
    const auto stdout_json = run_cli({"factors", "gen", "--method", "ntk", "--ratio", "4"});
    ASSERT_EQ(stdout_json.code, 0) << stdout_json.err;
    const auto parsed = ropeforge::rope::factor_file_from_json(stdout_json.out);
    EXPECT_EQ(parsed.factors.target_len, 512);

    const auto all = run_cli({"factors", "gen", "--method", "all", "--ratio", "2", "--out", (dir / "f").string()});
    ASSERT_EQ(all.code, 0) << all.err;
    const auto show = run_cli({"factors", "show", (dir / "f" / "yarn.factors.json").string()});
    ASSERT_EQ(show.code, 0) << show.err;
    EXPECT_NE(show.out.find("valid (bounds and monotone)"), std::string::npos);
}

TEST(Cli, RuntimeFailuresExitTwo) {
    TempDir dir;
    const auto bad_ratio = run_cli({"factors", "gen", "--ratio", "0.5"});
    EXPECT_EQ(bad_ratio.code, 2);
    const auto missing = run_cli({"eval-ppl", "--ckpt", (dir / "none.ckpt").string(), "--lens", "128"});
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.err.find("missing artifact"), std::string::npos);
    const auto no_base = run_cli({"--run-dir", dir.path().string(), "search", "--target-len", "256"});
    EXPECT_EQ(no_base.code, 2);
    EXPECT_NE(no_base.err.find("train-base"), std::string::npos);
}

TEST(Cli, PrintConfigAppliesOverrides) {
    TempDir dir;
    ropeforge::testing::spit(dir / "c.json", R"({"eval": {"ppl_docs": 7}})");
    const auto r = run_cli({"--config", (dir / "c.json").string(), "--seed", "42", "pipeline", "--print-config"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("\"ppl_docs\": 7"), std::string::npos);
    EXPECT_NE(r.out.find("\"seed\": 42"), std::string::npos);
    ropeforge::testing::spit(dir / "bad.json", R"({"nonsense": 1})");
    EXPECT_EQ(run_cli({"--config", (dir / "bad.json").string(), "pipeline", "--print-config"}).code, 2);
}

}  // namespace
