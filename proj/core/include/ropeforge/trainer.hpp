#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "ropeforge/corpus.hpp"
#include "ropeforge/model.hpp"

namespace ropeforge::model {

enum class LrSchedule { constant, linear_decay };

struct TrainConfig {
    int steps = 200;
    int batch_size = 8;
    int seq_len = 128;
    double learning_rate = 3e-3;
    LrSchedule schedule = LrSchedule::linear_decay;
    int warmup_steps = 0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    // Sequences of a batch may be processed on this many threads; gradients
    // are always reduced in batch order, so results do not depend on it.
    int threads = 1;

    // Learning rate used at 0-based step t.
    double lr_at(int t) const;
};

struct TrainLogRow {
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    ModelCheckpoint checkpoint;
    std::vector<TrainLogRow> log;
};

using StepCallback = std::function<void(const TrainLogRow&)>;

// Adam on next-token cross-entropy over train-split chunks of tc.seq_len.
// Throws ConfigError (steps < 1), LengthError (seq_len beyond the factors'
// context), DataError (no full batch) or DivergenceError (non-finite loss).
TrainResult train(ModelCheckpoint ckpt, const corpus::Corpus& corpus, const TrainConfig& tc,
                  const rope::RescaleFactors* rf, const StepCallback& on_step = {});

// Two-stage context fine-tune: steps1 at rf1.target_len under rf1, then steps2
// at rf2.target_len under rf2, continuing from the first stage's weights.
TrainResult finetune_progressive(const ModelCheckpoint& base, const rope::RescaleFactors& rf1, int steps1,
                                 const rope::RescaleFactors& rf2, int steps2, const corpus::Corpus& corpus,
                                 const TrainConfig& tc, const StepCallback& on_step = {});

// CSV with header step,loss,lr.
void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log);

}  // namespace ropeforge::model
