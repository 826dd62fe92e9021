#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ropeforge/bundle.hpp"
#include "ropeforge/corpus.hpp"
#include "ropeforge/eval.hpp"
#include "ropeforge/model.hpp"
#include "ropeforge/search.hpp"
#include "ropeforge/synth.hpp"
#include "ropeforge/trainer.hpp"

namespace ropeforge::pipeline {

struct StageTargets {
    std::int64_t mid_len = 1024;    // first search, first fine-tune window
    std::int64_t full_len = 2048;   // second search, second fine-tune window
    std::int64_t final_len = 16384; // search on the fine-tuned model
    std::vector<std::int64_t> recovery_lens{128, 256};
};

struct EvalPlan {
    std::vector<std::int64_t> ppl_lens{128, 256, 512, 1024, 2048, 4096, 8192, 16384};
    int ppl_docs = 3;
    std::vector<std::int64_t> passkey_lens{512, 2048, 8192, 16384};
    int passkey_iterations = 10;
};

struct PipelineConfig {
    model::ModelConfig model = model::ModelConfig::desk();
    model::TrainConfig base_train;
    // steps and seq_len are set per stage.
    model::TrainConfig finetune;
    int finetune_steps_mid = 40;
    int finetune_steps_full = 60;
    search::SearchConfig search = search::SearchConfig::desk();
    search::SearchConfig search_final = search::SearchConfig::desk().halved();
    search::SearchConfig search_recovery = search::SearchConfig::desk();
    int search_docs = 5;
    int search_docs_final = 3;
    StageTargets targets;
    EvalPlan eval;
    // Unset: the deterministic sample corpus is generated into the run directory.
    std::optional<std::filesystem::path> corpus_dir;
    corpus::SynthOptions synth;
    corpus::SplitRatios split;
    std::filesystem::path run_dir = "run";
    std::uint64_t seed = 1;
    int threads = 1;

    // Throws ConfigError on inconsistent targets or sub-configs.
    void validate() const;

    static PipelineConfig desk();
    static PipelineConfig paper();
    static PipelineConfig preset(const std::string& name);
};

std::string config_to_json(const PipelineConfig& cfg);
// Keys present in text override the corresponding fields of base.
PipelineConfig config_from_json(const std::string& text, const PipelineConfig& base);

// Paths inside a run directory.
struct RunLayout {
    std::filesystem::path dir;

    std::filesystem::path base_ckpt() const { return dir / "base.ckpt"; }
    std::filesystem::path ft_ckpt() const { return dir / "ft.ckpt"; }
    std::filesystem::path stage1_mid() const { return dir / "stage1_mid.factors.json"; }
    std::filesystem::path stage1_full() const { return dir / "stage1_full.factors.json"; }
    std::filesystem::path stage2() const { return dir / "stage2.factors.json"; }
    std::filesystem::path recovery(std::int64_t len) const {
        return dir / ("recovery_" + std::to_string(len) + ".factors.json");
    }
    std::filesystem::path bundle() const { return dir / "bundle.json"; }
    std::filesystem::path reports() const { return dir / "reports"; }
    std::filesystem::path search_logs() const { return dir / "search_logs"; }
    std::filesystem::path manifest() const { return dir / "MANIFEST.json"; }
    std::filesystem::path corpus() const { return dir / "corpus"; }
    std::filesystem::path lock() const { return dir / ".lock"; }
};

// Exclusive advisory lock on a run directory; throws Error when another
// process holds it.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    int fd_ = -1;
};

// Perplexity of one genome over fixed documents, each cut to target_len.
class PerplexityOracle final : public search::FitnessOracle {
public:
    PerplexityOracle(const model::ModelCheckpoint& ckpt, std::vector<TokenSeq> docs, std::int64_t target_len);
    double evaluate(const rope::RescaleFactors& genome) override;

private:
    const model::ModelCheckpoint& ckpt_;
    std::vector<TokenSeq> docs_;
};

using Logger = std::function<void(const std::string&)>;

// Reads cfg.corpus_dir, or generates the sample corpus into the run directory.
corpus::Corpus load_corpus(const PipelineConfig& cfg, const Logger& log = {});

struct SearchRun {
    search::SearchResult result;
    search::SearchSpace space;
    search::SearchConfig config;
};

// Searches factors for target_len on ckpt with k validation documents. When
// seeds is empty the PI/NTK/YaRN baselines at target_len / L are used.
SearchRun search_factors(const model::ModelCheckpoint& ckpt, const corpus::Corpus& corpus, std::int64_t target_len,
                         const search::SearchConfig& sc, int k_docs, std::vector<search::Individual> seeds = {},
                         const Logger& log = {});

// Writes <factors_path>, search_logs/<name>.csv and search_logs/<name>.json.
void save_search(const RunLayout& layout, const std::string& name, const std::filesystem::path& factors_path,
                 const SearchRun& run);

// PI/NTK/YaRN at ratio final_len / finetuned.target_len (the fine-tuned
// window acting as original length), each multiplied into the fine-tuned
// factors and snapped to the space's grid.
std::vector<search::Individual> secondary_seeds(const search::SearchSpace& space,
                                                const rope::RescaleFactors& finetuned);

// Recovery entries (ascending length), the fine-tuned factors up to their
// window, and the final search winner as default.
FactorBundle assemble_bundle(const rope::RotaryConfig& rotary,
                             const std::vector<std::pair<std::int64_t, rope::RescaleFactors>>& recovery,
                             const rope::RescaleFactors& finetuned, const rope::RescaleFactors& final_factors);

struct RunSummary {
    FactorBundle bundle;
    eval::PplReport base_ppl;
    eval::PplReport bundle_ppl;
    eval::PasskeyReport passkey;
    std::vector<std::string> skipped_stages;
};

// Base training, two searches on the base model, progressive fine-tune,
// search on the fine-tuned model, recovery searches, bundle, reports. Every
// stage persists its outputs and is skipped when MANIFEST.json shows it
// complete with unchanged inputs and outputs.
RunSummary run_progressive(const PipelineConfig& cfg, const Logger& log = {});

}  // namespace ropeforge::pipeline
