#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ropeforge/rope.hpp"
#include "ropeforge/types.hpp"

namespace ropeforge::model {

// Shape of the decoder-only transformer. Pre-norm blocks (RMSNorm),
// bias-free projections, GELU MLP, RoPE on queries and keys.
struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int head_dim = 32;
    int vocab_size = 258;
    int trained_len = 128;
    int ffn_mult = 4;
    bool tied_embeddings = false;
    rope::RotaryConfig rotary{32, 10000.0, 128};

    int ffn_dim() const { return ffn_mult * d_model; }

    // Throws ConfigError on inconsistent dimensions.
    void validate() const;

    // 4 layers, d_model 128, 4 heads of 32, byte vocabulary, L = 128.
    static ModelConfig desk();

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct Tensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    std::size_t size() const { return data.size(); }
};

// Named parameter (or gradient) tensors in a fixed, config-determined order.
template <class T>
class ParameterSet {
public:
    std::vector<Tensor<T>> tensors;

    Tensor<T>& at(std::string_view name);
    const Tensor<T>& at(std::string_view name) const;
    const Tensor<T>* find(std::string_view name) const;
    std::size_t total_size() const;

    // Same names and shapes, all zeros.
    ParameterSet zeros_like() const;

    template <class U>
    ParameterSet<U> cast() const {
        ParameterSet<U> out;
        out.tensors.reserve(tensors.size());
        for (const auto& t : tensors) {
            Tensor<U> c{t.name, t.rows, t.cols, {}};
            c.data.assign(t.data.begin(), t.data.end());
            out.tensors.push_back(std::move(c));
        }
        return out;
    }
};

using Parameters = ParameterSet<float>;

// Tensor names and shapes implied by a config, in storage order.
std::vector<Tensor<float>> parameter_layout(const ModelConfig& cfg);

struct ModelCheckpoint {
    ModelConfig config;
    Parameters params;
    std::int64_t train_steps = 0;
    std::optional<rope::RescaleFactors> rescale_used;
    std::uint64_t rng_seed = 0;

    // Throws ConfigError/ShapeError when tensors are missing, misshapen, or not finite.
    void validate() const;
};

ModelCheckpoint init_model(const ModelConfig& cfg, std::uint64_t seed);

// Dense row-major logits, rows = sequence length, cols = vocab.
struct Logits {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    std::span<const float> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
};

// Maximum sequence length the model may process under rf.
std::int64_t context_limit(const ModelConfig& cfg, const rope::RescaleFactors* rf);

// Throws LengthError (too long / empty), VocabError (bad id) or ShapeError (factor count).
void check_inputs(const ModelConfig& cfg, std::span<const Token> tokens,
                  const rope::RescaleFactors* rf);

Logits forward(const ModelCheckpoint& ckpt, std::span<const Token> tokens,
               const rope::RescaleFactors* rf = nullptr);

// Per-target negative log-likelihoods: entry t is -log p(tokens[t+1] | tokens[0..t]),
// accumulated in double. Size tokens.size() - 1.
std::vector<double> token_nll(const ModelCheckpoint& ckpt, std::span<const Token> tokens,
                              const rope::RescaleFactors* rf = nullptr);

template <class T>
struct LossAndGrads {
    double loss = 0.0;
    ParameterSet<T> grads;
};

// Mean next-token cross-entropy and its exact gradient for every parameter.
// Instantiated for float and double (the double path backs gradient checks).
template <class T>
LossAndGrads<T> loss_and_grads(const ModelConfig& cfg, const ParameterSet<T>& params,
                               std::span<const Token> tokens, const rope::RescaleFactors* rf);

LossAndGrads<float> loss_and_grads(const ModelCheckpoint& ckpt, std::span<const Token> tokens,
                                   const rope::RescaleFactors* rf = nullptr);

// Loss only, any precision. Used by finite-difference checks.
template <class T>
double sequence_loss(const ModelConfig& cfg, const ParameterSet<T>& params,
                     std::span<const Token> tokens, const rope::RescaleFactors* rf);

double perplexity(const ModelCheckpoint& ckpt, std::span<const Token> tokens,
                  const rope::RescaleFactors* rf = nullptr);

// Attention probabilities, indexed [layer * n_heads + head][query * n + key].
std::vector<std::vector<float>> attention_probs(const ModelCheckpoint& ckpt,
                                                std::span<const Token> tokens,
                                                const rope::RescaleFactors* rf = nullptr);

enum class DecodeMode {
    incremental,  // key/value cache, one new row per step
    recompute,    // full forward over the whole prefix every step
};

// Appends max_new argmax tokens (ties go to the lowest id).
TokenSeq generate_greedy(const ModelCheckpoint& ckpt, std::span<const Token> prompt,
                         const rope::RescaleFactors* rf, int max_new,
                         DecodeMode mode = DecodeMode::incremental);

}  // namespace ropeforge::model
