#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ropeforge/bundle.hpp"
#include "ropeforge/corpus.hpp"
#include "ropeforge/model.hpp"

namespace ropeforge::eval {

struct WindowScore {
    double total_nll = 0.0;
    std::int64_t scored_tokens = 0;
    std::int64_t windows = 0;

    double perplexity() const;
};

// Desk default: max(1, context_len / 16).
std::int64_t default_stride(std::int64_t context_len);

// Windows of context_len start at 0, stride, 2*stride, ... while they fit, plus
// one window aligned to the document end if the last one stops short. The
// first window scores every target after its first token; later windows only
// score targets no earlier window covered. Throws LengthError when the
// document is shorter than context_len, InputError for stride < 1.
WindowScore sliding_window_nll(const model::ModelCheckpoint& ckpt, std::span<const Token> doc,
                               std::int64_t context_len, const rope::RescaleFactors* rf, std::int64_t stride);

double sliding_window_ppl(const model::ModelCheckpoint& ckpt, std::span<const Token> doc, std::int64_t context_len,
                          const rope::RescaleFactors* rf, std::int64_t stride);

struct PplRow {
    std::int64_t context_len = 0;
    double perplexity = 0.0;
    int docs = 0;
    std::int64_t scored_tokens = 0;
};

struct PplReport {
    std::vector<PplRow> rows;  // ascending context_len
};

struct SweepOptions {
    corpus::Split split = corpus::Split::test;
    // Stride per length; unset means default_stride.
    std::optional<std::int64_t> stride;
    // Score only the first context_len tokens of each document (one window).
    bool truncate_docs = true;
    int threads = 1;
};

// One row per distinct length; documents are sampled per length from
// derive(seed, length), factors chosen with select_factors. Perplexity pools
// NLL over all sampled documents. Data errors name the failing length.
PplReport ppl_sweep(const model::ModelCheckpoint& ckpt, const corpus::Corpus& corpus,
                    std::vector<std::int64_t> context_lens, const pipeline::FactorBundle& bundle, int k_docs,
                    std::uint64_t seed, const SweepOptions& opts = {});

// --- passkey retrieval ------------------------------------------------------

struct PasskeyDoc {
    TokenSeq tokens;            // BOS + rendered bytes
    std::int64_t key_position;  // token index where the key sentence starts
};

// Preamble, x filler blocks, key sentences, y filler blocks and the closing
// question, one section per line. Throws InputError unless key is 5 digits.
PasskeyDoc make_passkey_doc(int x, int y, const std::string& key);

// Longest total filler count R = x + y whose document has at most max_tokens
// tokens, or -1 when even R = 0 does not fit.
int max_filler_repeats(std::int64_t max_tokens);

// First maximal run of at least five ASCII digits in bytes, or "".
std::string extract_digits(std::string_view bytes);

// Produces continuation tokens for a prompt.
using Generator = std::function<TokenSeq(std::span<const Token> prompt, int max_new, std::int64_t context_len)>;

// Greedy decoding with the bundle entry chosen for context_len.
Generator model_generator(const model::ModelCheckpoint& ckpt, const pipeline::FactorBundle& bundle);

struct PasskeyTrial {
    std::int64_t context_len = 0;
    std::string key;
    std::int64_t key_position = 0;
    std::int64_t prompt_len = 0;
    std::string retrieved;
    bool success = false;
    std::string diagnostic;
};

struct PasskeyRow {
    std::int64_t context_len = 0;
    double accuracy = 0.0;
    int iterations = 0;
};

struct PasskeyReport {
    std::vector<PasskeyRow> rows;
    std::vector<PasskeyTrial> trials;
};

// Five key digits plus slack for leading whitespace.
inline constexpr int kPasskeyMaxNew = 8;

// Plans one trial: a random key and a filler split with x uniform over
// [0, R]. The prompt plus kPasskeyMaxNew tokens fits in context_len.
PasskeyTrial plan_passkey_trial(std::int64_t context_len, std::uint64_t stream_seed, PasskeyDoc* doc = nullptr);

PasskeyReport passkey_eval(const Generator& generate, std::vector<std::int64_t> context_lens, int iterations,
                           std::uint64_t seed);

// --- reports ------------------------------------------------------------------

void write_ppl_csv(const std::filesystem::path& path, const PplReport& report);
void write_passkey_csv(const std::filesystem::path& path, const PasskeyReport& report);
PplReport read_ppl_csv(const std::filesystem::path& path);
PasskeyReport read_passkey_csv(const std::filesystem::path& path);
std::string format_ppl_table(const PplReport& report);
std::string format_passkey_table(const PasskeyReport& report);

}  // namespace ropeforge::eval
