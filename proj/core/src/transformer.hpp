#pragma once

// Templated transformer core shared by inference, training and gradient checks.

#include <span>
#include <vector>

#include "ropeforge/model.hpp"

namespace ropeforge::model::detail {

template <class T>
struct RotaryTable {
    int pairs = 0;
    int length = 0;
    std::vector<T> cos;  // length x pairs
    std::vector<T> sin;

    // Angles are computed in double and rounded to T once.
    static RotaryTable build(const rope::RotaryConfig& cfg, const rope::RescaleFactors* rf, int length);

    const T* cos_row(int pos) const { return cos.data() + static_cast<std::size_t>(pos) * pairs; }
    const T* sin_row(int pos) const { return sin.data() + static_cast<std::size_t>(pos) * pairs; }
};

template <class T>
struct LayerWeights {
    const T* attn_norm;
    const T* wq;
    const T* wk;
    const T* wv;
    const T* wo;
    const T* mlp_norm;
    const T* w_up;
    const T* w_down;
};

// Saved activations of one layer, kept only when gradients are needed.
template <class T>
struct LayerActs {
    std::vector<T> x_in, h1, inv1, q, k, v, att, x_mid, h2, inv2, u, a;
    std::vector<std::vector<T>> probs;  // per head, n x n, zeros above the diagonal
};

template <class T>
struct Activations {
    int n = 0;
    std::vector<LayerActs<T>> layers;
    std::vector<T> x_out, hf, invf;
};

// Key/value cache for causal attention. Keys are stored transposed per head
// (head_dim x capacity) so score rows are formed with contiguous axpy updates.
template <class T>
struct DecodeState {
    int capacity = 0;
    int length = 0;
    RotaryTable<T> rope;
    std::vector<std::vector<T>> keys_t;  // [layer * heads + head]
    std::vector<std::vector<T>> values;  // [layer], capacity x d_model
};

template <class T>
class Transformer {
public:
    Transformer(const ModelConfig& cfg, const ParameterSet<T>& params);

    DecodeState<T> start(int capacity, const rope::RescaleFactors* rf) const;

    // Runs tokens through the network after the cached prefix. logits receives
    // tokens.size() x vocab values. acts (optional) requires an empty state.
    void extend(DecodeState<T>& state, std::span<const Token> tokens, T* logits,
                Activations<T>* acts) const;

    // Accumulates parameter gradients for dlogits into grads.
    void backward(std::span<const Token> tokens, const RotaryTable<T>& rope, const Activations<T>& acts,
                  const T* dlogits, ParameterSet<T>& grads) const;

    const ModelConfig& config() const { return cfg_; }

private:
    const ModelConfig& cfg_;
    const T* tok_emb_;
    const T* final_norm_;
    std::vector<T> lm_head_;  // d_model x vocab (transposed copy when tied)
    const T* lm_head_ptr_;
    std::vector<LayerWeights<T>> layers_;
};

inline constexpr double kNormEps = 1e-5;

}  // namespace ropeforge::model::detail
