#include "ropeforge/model.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>

#include "kernels.hpp"
#include "ropeforge/error.hpp"
#include "transformer.hpp"

namespace ropeforge::model {

namespace {

std::string layer_name(int layer, const char* role) {
    return "layers." + std::to_string(layer) + "." + role;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Cross-entropy over rows 0..n-2 against tokens[1..n-1]. Returns the mean
// loss and writes d(loss)/d(logits) when dlogits is non-null.
template <class T>
double cross_entropy(const T* logits, int n, int vocab, std::span<const Token> tokens, T* dlogits) {
    const int count = n - 1;
    double total = 0.0;
    for (int t = 0; t < count; ++t) {
        const T* row = logits + static_cast<std::size_t>(t) * vocab;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0.0;
        for (int j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(sum);
        const int target = tokens[static_cast<std::size_t>(t) + 1];
        total += lse - static_cast<double>(row[target]);
        if (dlogits) {
            T* drow = dlogits + static_cast<std::size_t>(t) * vocab;
            for (int j = 0; j < vocab; ++j) {
                const double p = std::exp(static_cast<double>(row[j]) - lse);
                drow[j] = static_cast<T>((p - (j == target ? 1.0 : 0.0)) / count);
            }
        }
    }
    if (dlogits) {
        std::fill(dlogits + static_cast<std::size_t>(count) * vocab,
                  dlogits + static_cast<std::size_t>(n) * vocab, T(0));
    }
    return total / count;
}

}  // namespace

// --- config / parameters ------------------------------------------------------

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || vocab_size < 2 || trained_len < 1 ||
        ffn_mult < 1) {
        throw ConfigError("model dimensions must be positive");
    }
    if (head_dim < 2 || head_dim % 2 != 0) {
        throw ConfigError("head_dim must be even and >= 2, got " + std::to_string(head_dim));
    }
    if (d_model != n_heads * head_dim) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") != n_heads * head_dim (" +
                          std::to_string(n_heads) + " * " + std::to_string(head_dim) + ")");
    }
    rotary.validate();
    if (rotary.head_dim != head_dim) throw ConfigError("rotary.head_dim must equal head_dim");
    if (rotary.original_len != trained_len) {
        throw ConfigError("rotary.original_len must equal trained_len");
    }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

template <class T>
Tensor<T>& ParameterSet<T>::at(std::string_view name) {
    for (auto& t : tensors) {
        if (t.name == name) return t;
    }
    throw ShapeError("no parameter named " + std::string(name));
}

template <class T>
const Tensor<T>& ParameterSet<T>::at(std::string_view name) const {
    const Tensor<T>* t = find(name);
    if (!t) throw ShapeError("no parameter named " + std::string(name));
    return *t;
}

template <class T>
const Tensor<T>* ParameterSet<T>::find(std::string_view name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

template <class T>
std::size_t ParameterSet<T>::total_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
}

template <class T>
ParameterSet<T> ParameterSet<T>::zeros_like() const {
    ParameterSet<T> out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.rows, t.cols, std::vector<T>(t.size(), T(0))});
    return out;
}

template class ParameterSet<float>;
template class ParameterSet<double>;

std::vector<Tensor<float>> parameter_layout(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.d_model;
    const int f = cfg.ffn_dim();
    std::vector<Tensor<float>> out;
    auto add = [&](std::string name, int rows, int cols) {
        out.push_back({std::move(name), rows, cols, std::vector<float>(static_cast<std::size_t>(rows) * cols)});
    };
    add("tok_emb", cfg.vocab_size, d);
    for (int l = 0; l < cfg.n_layers; ++l) {
        add(layer_name(l, "attn_norm"), 1, d);
        add(layer_name(l, "wq"), d, d);
        add(layer_name(l, "wk"), d, d);
        add(layer_name(l, "wv"), d, d);
        add(layer_name(l, "wo"), d, d);
        add(layer_name(l, "mlp_norm"), 1, d);
        add(layer_name(l, "w_up"), d, f);
        add(layer_name(l, "w_down"), f, d);
    }
    add("final_norm", 1, d);
    if (!cfg.tied_embeddings) add("lm_head", d, cfg.vocab_size);
    return out;
}

void ModelCheckpoint::validate() const {
    config.validate();
    const auto layout = parameter_layout(config);
    if (layout.size() != params.tensors.size()) {
        throw ShapeError("checkpoint has " + std::to_string(params.tensors.size()) +
                         " tensors, config implies " + std::to_string(layout.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& want = layout[i];
        const auto& got = params.tensors[i];
        if (want.name != got.name || want.rows != got.rows || want.cols != got.cols ||
            got.data.size() != want.data.size()) {
            throw ShapeError("tensor " + std::to_string(i) + " (" + got.name + ") does not match layout (" +
                             want.name + ")");
        }
        for (float v : got.data) {
            if (!std::isfinite(v)) throw ConfigError("tensor " + got.name + " holds a non-finite value");
        }
    }
}

ModelCheckpoint init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelCheckpoint ckpt;
    ckpt.config = cfg;
    ckpt.rng_seed = seed;
    ckpt.params.tensors = parameter_layout(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    const float std_base = 0.02f;
    const float std_out = std_base / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
    for (auto& t : ckpt.params.tensors) {
        const bool is_norm = t.name.ends_with("norm");
        const bool is_out = t.name.ends_with(".wo") || t.name.ends_with(".w_down");
        for (float& v : t.data) {
            v = is_norm ? 1.0f : normal(rng) * (is_out ? std_out : std_base);
        }
    }
    return ckpt;
}

// --- rotary table -------------------------------------------------------------

namespace detail {

template <class T>
RotaryTable<T> RotaryTable<T>::build(const rope::RotaryConfig& cfg, const rope::RescaleFactors* rf,
                                     int length) {
    RotaryTable<T> table;
    table.pairs = cfg.pairs();
    table.length = length;
    table.cos.resize(static_cast<std::size_t>(length) * table.pairs);
    table.sin.resize(table.cos.size());
    for (int pos = 0; pos < length; ++pos) {
        const auto angles = rf ? rope::rescaled_angles(cfg, *rf, pos) : rope::rope_angles(cfg, pos);
        for (int i = 0; i < table.pairs; ++i) {
            const std::size_t idx = static_cast<std::size_t>(pos) * table.pairs + i;
            table.cos[idx] = static_cast<T>(std::cos(angles[static_cast<std::size_t>(i)]));
            table.sin[idx] = static_cast<T>(std::sin(angles[static_cast<std::size_t>(i)]));
        }
    }
    return table;
}

// --- transformer ----------------------------------------------------------------

template <class T>
Transformer<T>::Transformer(const ModelConfig& cfg, const ParameterSet<T>& params) : cfg_(cfg) {
    tok_emb_ = params.at("tok_emb").data.data();
    final_norm_ = params.at("final_norm").data.data();
    if (cfg.tied_embeddings) {
        const int d = cfg.d_model;
        const int v = cfg.vocab_size;
        lm_head_.resize(static_cast<std::size_t>(d) * v);
        for (int tok = 0; tok < v; ++tok) {
            for (int j = 0; j < d; ++j) {
                lm_head_[static_cast<std::size_t>(j) * v + tok] = tok_emb_[static_cast<std::size_t>(tok) * d + j];
            }
        }
        lm_head_ptr_ = lm_head_.data();
    } else {
        lm_head_ptr_ = params.at("lm_head").data.data();
    }
    layers_.reserve(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        layers_.push_back({params.at(layer_name(l, "attn_norm")).data.data(),
                           params.at(layer_name(l, "wq")).data.data(),
                           params.at(layer_name(l, "wk")).data.data(),
                           params.at(layer_name(l, "wv")).data.data(),
                           params.at(layer_name(l, "wo")).data.data(),
                           params.at(layer_name(l, "mlp_norm")).data.data(),
                           params.at(layer_name(l, "w_up")).data.data(),
                           params.at(layer_name(l, "w_down")).data.data()});
    }
}

template <class T>
DecodeState<T> Transformer<T>::start(int capacity, const rope::RescaleFactors* rf) const {
    DecodeState<T> st;
    st.capacity = capacity;
    st.rope = RotaryTable<T>::build(cfg_.rotary, rf, capacity);
    const std::size_t heads = static_cast<std::size_t>(cfg_.n_layers) * cfg_.n_heads;
    const int tiles = (capacity + kernels::detail::kKeyTile - 1) / kernels::detail::kKeyTile;
    st.keys_t.assign(heads, std::vector<T>(static_cast<std::size_t>(cfg_.head_dim) * tiles * kernels::detail::kKeyTile));
    st.values.assign(static_cast<std::size_t>(cfg_.n_layers),
                     std::vector<T>(static_cast<std::size_t>(capacity) * cfg_.d_model));
    return st;
}

template <class T>
void Transformer<T>::extend(DecodeState<T>& st, std::span<const Token> tokens, T* logits,
                            Activations<T>* acts) const {
    const int m = static_cast<int>(tokens.size());
    const int t0 = st.length;
    if (t0 + m > st.capacity) throw LengthError("decode state capacity exceeded");
    const int d = cfg_.d_model;
    const int hd = cfg_.head_dim;
    const int heads = cfg_.n_heads;
    const int f = cfg_.ffn_dim();
    const int pairs = hd / 2;
    const std::size_t md = static_cast<std::size_t>(m) * d;
    const T eps = static_cast<T>(kNormEps);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    if (acts) {
        acts->n = m;
        acts->layers.assign(static_cast<std::size_t>(cfg_.n_layers), {});
    }

    std::vector<T> x(md);
    for (int r = 0; r < m; ++r) {
        const T* e = tok_emb_ + static_cast<std::size_t>(tokens[static_cast<std::size_t>(r)]) * d;
        std::copy(e, e + d, x.begin() + static_cast<std::ptrdiff_t>(r) * d);
    }

    std::vector<T> h(md), inv(static_cast<std::size_t>(m)), q(md), k(md), v(md), att(md), o(md);
    std::vector<T> u(static_cast<std::size_t>(m) * f), a(u.size());
    const std::ptrdiff_t stride = st.capacity;
    std::vector<T> probs(kernels::kAttentionBlock * static_cast<std::size_t>(stride));

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const LayerWeights<T>& w = layers_[static_cast<std::size_t>(l)];
        LayerActs<T>* la = acts ? &acts->layers[static_cast<std::size_t>(l)] : nullptr;
        if (la) la->x_in = x;

        kernels::rmsnorm_rows(x.data(), w.attn_norm, m, d, eps, h.data(), inv.data());
        kernels::matmul_rows(h.data(), m, d, w.wq, d, q.data());
        kernels::matmul_rows(h.data(), m, d, w.wk, d, k.data());
        kernels::matmul_rows(h.data(), m, d, w.wv, d, v.data());
        if (la) {
            la->h1 = h;
            la->inv1 = inv;
        }

        for (int r = 0; r < m; ++r) {
            const int pos = t0 + r;
            T* qr = q.data() + static_cast<std::size_t>(r) * d;
            T* kr = k.data() + static_cast<std::size_t>(r) * d;
            for (int hh = 0; hh < heads; ++hh) {
                kernels::rotate_pairs(qr + hh * hd, st.rope.cos_row(pos), st.rope.sin_row(pos), pairs);
                kernels::rotate_pairs(kr + hh * hd, st.rope.cos_row(pos), st.rope.sin_row(pos), pairs);
            }
            for (int j = 0; j < d; ++j) qr[j] *= scale;
            // Append keys (transposed) and values to the cache.
            for (int hh = 0; hh < heads; ++hh) {
                std::vector<T>& kt = st.keys_t[static_cast<std::size_t>(l) * heads + hh];
                for (int dd = 0; dd < hd; ++dd) {
                    kt[static_cast<std::size_t>(kernels::detail::key_index(dd, pos, hd))] = kr[hh * hd + dd];
                }
            }
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(r) * d, v.begin() + static_cast<std::ptrdiff_t>(r + 1) * d,
                      st.values[static_cast<std::size_t>(l)].begin() + static_cast<std::ptrdiff_t>(pos) * d);
        }
        if (la) {
            la->q = q;
            la->k = k;
            la->v = v;
            la->probs.assign(static_cast<std::size_t>(heads),
                             std::vector<T>(static_cast<std::size_t>(m) * m, T(0)));
        }

        const std::vector<T>& vcache = st.values[static_cast<std::size_t>(l)];
        for (int hh = 0; hh < heads; ++hh) {
            const std::vector<T>& kt = st.keys_t[static_cast<std::size_t>(l) * heads + hh];
            auto keep = [&](int r, const T* p, int len) {
                if (la) {
                    std::copy(p, p + len,
                              la->probs[static_cast<std::size_t>(hh)].begin() + static_cast<std::ptrdiff_t>(r) * m);
                }
            };
            kernels::causal_attention(q.data() + hh * hd, d, kt.data(), vcache.data() + hh * hd, d, hd, t0 + 1, m,
                                      probs.data(), stride, att.data() + hh * hd, d, keep);
        }
        kernels::matmul_rows(att.data(), m, d, w.wo, d, o.data());
        for (std::size_t i = 0; i < md; ++i) x[i] += o[i];
        if (la) {
            la->att = att;
            la->x_mid = x;
        }

        kernels::rmsnorm_rows(x.data(), w.mlp_norm, m, d, eps, h.data(), inv.data());
        kernels::matmul_rows(h.data(), m, d, w.w_up, f, u.data());
        kernels::Gelu<T>::apply(u.data(), a.data(), u.size());
        kernels::matmul_rows(a.data(), m, f, w.w_down, d, o.data());
        for (std::size_t i = 0; i < md; ++i) x[i] += o[i];
        if (la) {
            la->h2 = h;
            la->inv2 = inv;
            la->u = u;
            la->a = a;
        }
    }

    kernels::rmsnorm_rows(x.data(), final_norm_, m, d, eps, h.data(), inv.data());
    if (acts) {
        acts->x_out = x;
        acts->hf = h;
        acts->invf = inv;
    }
    kernels::matmul_rows(h.data(), m, d, lm_head_ptr_, cfg_.vocab_size, logits);
    st.length += m;
}

namespace {

// Gradient of y = x * inv * g with respect to x and g.
template <class T>
void rmsnorm_backward(const T* x, const T* g, const T* inv, const T* dy, int rows, int dim, T* dx_accum,
                      T* dg_accum) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + static_cast<std::size_t>(r) * dim;
        const T* dyr = dy + static_cast<std::size_t>(r) * dim;
        T* dxr = dx_accum + static_cast<std::size_t>(r) * dim;
        const T ir = inv[r];
        T dot = 0;
        for (int j = 0; j < dim; ++j) {
            dot += dyr[j] * g[j] * xr[j];
            dg_accum[j] += dyr[j] * xr[j] * ir;
        }
        const T coef = ir * ir * ir * dot / static_cast<T>(dim);
        for (int j = 0; j < dim; ++j) dxr[j] += ir * dyr[j] * g[j] - coef * xr[j];
    }
}

}  // namespace

template <class T>
void Transformer<T>::backward(std::span<const Token> tokens, const RotaryTable<T>& rope,
                              const Activations<T>& acts, const T* dlogits, ParameterSet<T>& grads) const {
    const int n = acts.n;
    const int d = cfg_.d_model;
    const int hd = cfg_.head_dim;
    const int heads = cfg_.n_heads;
    const int f = cfg_.ffn_dim();
    const int vocab = cfg_.vocab_size;
    const int pairs = hd / 2;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const std::size_t nd = static_cast<std::size_t>(n) * d;

    CMapMat<T> dlog(dlogits, n, vocab);
    CMapMat<T> hf(acts.hf.data(), n, d);
    CMapMat<T> lm(lm_head_ptr_, d, vocab);

    // Output projection.
    RowMat<T> dlm = hf.transpose() * dlog;
    auto& demb = grads.at("tok_emb").data;
    if (cfg_.tied_embeddings) {
        for (int j = 0; j < d; ++j) {
            for (int tok = 0; tok < vocab; ++tok) demb[static_cast<std::size_t>(tok) * d + j] += dlm(j, tok);
        }
    } else {
        MapMat<T>(grads.at("lm_head").data.data(), d, vocab) += dlm;
    }
    RowMat<T> dh = dlog * lm.transpose();

    std::vector<T> dx(nd, T(0));
    rmsnorm_backward(acts.x_out.data(), final_norm_, acts.invf.data(), dh.data(), n, d, dx.data(),
                     grads.at("final_norm").data.data());

    std::vector<T> dtmp(nd), dq(nd), dk(nd), dv(nd);
    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
        const LayerWeights<T>& w = layers_[static_cast<std::size_t>(l)];
        const LayerActs<T>& la = acts.layers[static_cast<std::size_t>(l)];

        // MLP: x_out = x_mid + gelu(h2 W_up) W_down
        CMapMat<T> dxm(dx.data(), n, d);
        CMapMat<T> am(la.a.data(), n, f);
        MapMat<T>(grads.at(layer_name(l, "w_down")).data.data(), f, d).noalias() += am.transpose() * dxm;
        RowMat<T> du = dxm * CMapMat<T>(w.w_down, f, d).transpose();
        for (Eigen::Index i = 0; i < du.size(); ++i) du.data()[i] *= kernels::Gelu<T>::derivative(la.u[static_cast<std::size_t>(i)]);
        MapMat<T>(grads.at(layer_name(l, "w_up")).data.data(), d, f).noalias() +=
            CMapMat<T>(la.h2.data(), n, d).transpose() * du;
        RowMat<T> dh2 = du * CMapMat<T>(w.w_up, d, f).transpose();
        rmsnorm_backward(la.x_mid.data(), w.mlp_norm, la.inv2.data(), dh2.data(), n, d, dx.data(),
                         grads.at(layer_name(l, "mlp_norm")).data.data());

        // Attention output projection: x_mid = x_in + att W_o
        CMapMat<T> dxa(dx.data(), n, d);
        MapMat<T>(grads.at(layer_name(l, "wo")).data.data(), d, d).noalias() +=
            CMapMat<T>(la.att.data(), n, d).transpose() * dxa;
        RowMat<T> datt = dxa * CMapMat<T>(w.wo, d, d).transpose();

        for (int hh = 0; hh < heads; ++hh) {
            CMapMat<T> p(la.probs[static_cast<std::size_t>(hh)].data(), n, n);
            CStridedMap<T> qh(la.q.data() + hh * hd, n, hd, Eigen::OuterStride<>(d));
            CStridedMap<T> kh(la.k.data() + hh * hd, n, hd, Eigen::OuterStride<>(d));
            CStridedMap<T> vh(la.v.data() + hh * hd, n, hd, Eigen::OuterStride<>(d));
            Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> doh(datt.data() + hh * hd, n, hd,
                                                                        Eigen::OuterStride<>(d));
            StridedMap<T>(dv.data() + hh * hd, n, hd, Eigen::OuterStride<>(d)).noalias() = p.transpose() * doh;
            RowMat<T> dp = doh * vh.transpose();
            // dS = P * (dP - rowsum(P * dP)); entries above the diagonal are zero in P.
            for (int r = 0; r < n; ++r) {
                T dot = 0;
                for (int c = 0; c <= r; ++c) dot += p(r, c) * dp(r, c);
                for (int c = 0; c <= r; ++c) dp(r, c) = p(r, c) * (dp(r, c) - dot);
                for (int c = r + 1; c < n; ++c) dp(r, c) = T(0);
            }
            // scores = q_scaled . k, q_scaled = scale * rot(q)
            StridedMap<T>(dq.data() + hh * hd, n, hd, Eigen::OuterStride<>(d)).noalias() = scale * (dp * kh);
            StridedMap<T>(dk.data() + hh * hd, n, hd, Eigen::OuterStride<>(d)).noalias() = dp.transpose() * qh;
        }
        for (int r = 0; r < n; ++r) {
            for (int hh = 0; hh < heads; ++hh) {
                kernels::unrotate_pairs(dq.data() + static_cast<std::size_t>(r) * d + hh * hd, rope.cos_row(r),
                                        rope.sin_row(r), pairs);
                kernels::unrotate_pairs(dk.data() + static_cast<std::size_t>(r) * d + hh * hd, rope.cos_row(r),
                                        rope.sin_row(r), pairs);
            }
        }
        CMapMat<T> h1(la.h1.data(), n, d);
        CMapMat<T> dqm(dq.data(), n, d), dkm(dk.data(), n, d), dvm(dv.data(), n, d);
        MapMat<T>(grads.at(layer_name(l, "wq")).data.data(), d, d).noalias() += h1.transpose() * dqm;
        MapMat<T>(grads.at(layer_name(l, "wk")).data.data(), d, d).noalias() += h1.transpose() * dkm;
        MapMat<T>(grads.at(layer_name(l, "wv")).data.data(), d, d).noalias() += h1.transpose() * dvm;
        MapMat<T> dh1(dtmp.data(), n, d);
        dh1.noalias() = dqm * CMapMat<T>(w.wq, d, d).transpose();
        dh1.noalias() += dkm * CMapMat<T>(w.wk, d, d).transpose();
        dh1.noalias() += dvm * CMapMat<T>(w.wv, d, d).transpose();
        rmsnorm_backward(la.x_in.data(), w.attn_norm, la.inv1.data(), dtmp.data(), n, d, dx.data(),
                         grads.at(layer_name(l, "attn_norm")).data.data());
    }

    for (int r = 0; r < n; ++r) {
        T* row = demb.data() + static_cast<std::size_t>(tokens[static_cast<std::size_t>(r)]) * d;
        const T* g = dx.data() + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) row[j] += g[j];
    }
}

template class Transformer<float>;
template class Transformer<double>;
template struct RotaryTable<float>;
template struct RotaryTable<double>;

}  // namespace detail

// --- public API ---------------------------------------------------------------

std::int64_t context_limit(const ModelConfig& cfg, const rope::RescaleFactors* rf) {
    return rf ? rf->target_len : cfg.trained_len;
}

void check_inputs(const ModelConfig& cfg, std::span<const Token> tokens, const rope::RescaleFactors* rf) {
    if (tokens.empty()) throw LengthError("empty token sequence");
    const std::int64_t limit = context_limit(cfg, rf);
    if (static_cast<std::int64_t>(tokens.size()) > limit) {
        throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context limit " +
                          std::to_string(limit));
    }
    if (rf && rf->factors.size() != static_cast<std::size_t>(cfg.rotary.pairs())) {
        throw ShapeError("rescale factors have " + std::to_string(rf->factors.size()) + " entries, model needs " +
                         std::to_string(cfg.rotary.pairs()));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) {
            throw VocabError("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                             " outside vocabulary of " + std::to_string(cfg.vocab_size));
        }
    }
}

Logits forward(const ModelCheckpoint& ckpt, std::span<const Token> tokens, const rope::RescaleFactors* rf) {
    check_inputs(ckpt.config, tokens, rf);
    detail::Transformer<float> net(ckpt.config, ckpt.params);
    const int n = static_cast<int>(tokens.size());
    auto st = net.start(n, rf);
    Logits out{n, ckpt.config.vocab_size, std::vector<float>(static_cast<std::size_t>(n) * ckpt.config.vocab_size)};
    net.extend(st, tokens, out.data.data(), nullptr);
    return out;
}

std::vector<double> token_nll(const ModelCheckpoint& ckpt, std::span<const Token> tokens,
                              const rope::RescaleFactors* rf) {
    if (tokens.size() < 2) throw LengthError("need at least two tokens to score");
    const Logits logits = forward(ckpt, tokens, rf);
    std::vector<double> out(tokens.size() - 1);
    for (int t = 0; t + 1 < logits.rows; ++t) {
        const auto row = logits.row(t);
        double mx = -std::numeric_limits<double>::infinity();
        for (float v : row) mx = std::max(mx, static_cast<double>(v));
        double sum = 0.0;
        for (float v : row) sum += std::exp(static_cast<double>(v) - mx);
        out[static_cast<std::size_t>(t)] =
            mx + std::log(sum) - static_cast<double>(row[static_cast<std::size_t>(tokens[static_cast<std::size_t>(t) + 1])]);
    }
    return out;
}

template <class T>
LossAndGrads<T> loss_and_grads(const ModelConfig& cfg, const ParameterSet<T>& params,
                               std::span<const Token> tokens, const rope::RescaleFactors* rf) {
    if (tokens.size() < 2) throw LengthError("need at least two tokens for a loss");
    check_inputs(cfg, tokens, rf);
    detail::Transformer<T> net(cfg, params);
    const int n = static_cast<int>(tokens.size());
    auto st = net.start(n, rf);
    std::vector<T> logits(static_cast<std::size_t>(n) * cfg.vocab_size);
    detail::Activations<T> acts;
    net.extend(st, tokens, logits.data(), &acts);
    std::vector<T> dlogits(logits.size());
    LossAndGrads<T> out;
    out.loss = cross_entropy(logits.data(), n, cfg.vocab_size, tokens, dlogits.data());
    out.grads = params.zeros_like();
    net.backward(tokens, st.rope, acts, dlogits.data(), out.grads);
    return out;
}

template LossAndGrads<float> loss_and_grads(const ModelConfig&, const ParameterSet<float>&,
                                            std::span<const Token>, const rope::RescaleFactors*);
template LossAndGrads<double> loss_and_grads(const ModelConfig&, const ParameterSet<double>&,
                                             std::span<const Token>, const rope::RescaleFactors*);

LossAndGrads<float> loss_and_grads(const ModelCheckpoint& ckpt, std::span<const Token> tokens,
                                   const rope::RescaleFactors* rf) {
    return loss_and_grads<float>(ckpt.config, ckpt.params, tokens, rf);
}

template <class T>
double sequence_loss(const ModelConfig& cfg, const ParameterSet<T>& params, std::span<const Token> tokens,
                     const rope::RescaleFactors* rf) {
    if (tokens.size() < 2) throw LengthError("need at least two tokens for a loss");
    check_inputs(cfg, tokens, rf);
    detail::Transformer<T> net(cfg, params);
    const int n = static_cast<int>(tokens.size());
    auto st = net.start(n, rf);
    std::vector<T> logits(static_cast<std::size_t>(n) * cfg.vocab_size);
    net.extend(st, tokens, logits.data(), nullptr);
    return cross_entropy<T>(logits.data(), n, cfg.vocab_size, tokens, nullptr);
}

template double sequence_loss(const ModelConfig&, const ParameterSet<float>&, std::span<const Token>,
                              const rope::RescaleFactors*);
template double sequence_loss(const ModelConfig&, const ParameterSet<double>&, std::span<const Token>,
                              const rope::RescaleFactors*);

double perplexity(const ModelCheckpoint& ckpt, std::span<const Token> tokens, const rope::RescaleFactors* rf) {
    const auto nll = token_nll(ckpt, tokens, rf);
    double total = 0.0;
    for (double v : nll) total += v;
    return std::exp(total / static_cast<double>(nll.size()));
}

std::vector<std::vector<float>> attention_probs(const ModelCheckpoint& ckpt, std::span<const Token> tokens,
                                                const rope::RescaleFactors* rf) {
    check_inputs(ckpt.config, tokens, rf);
    detail::Transformer<float> net(ckpt.config, ckpt.params);
    const int n = static_cast<int>(tokens.size());
    auto st = net.start(n, rf);
    std::vector<float> logits(static_cast<std::size_t>(n) * ckpt.config.vocab_size);
    detail::Activations<float> acts;
    net.extend(st, tokens, logits.data(), &acts);
    std::vector<std::vector<float>> out;
    for (auto& layer : acts.layers) {
        for (auto& p : layer.probs) out.push_back(std::move(p));
    }
    return out;
}

namespace {

Token argmax_lowest(std::span<const float> row) {
    Token best = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
        if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<Token>(j);
    }
    return best;
}

}  // namespace

TokenSeq generate_greedy(const ModelCheckpoint& ckpt, std::span<const Token> prompt,
                         const rope::RescaleFactors* rf, int max_new, DecodeMode mode) {
    if (max_new < 0) throw InputError("max_new must be >= 0");
    TokenSeq out(prompt.begin(), prompt.end());
    if (max_new == 0) return out;
    check_inputs(ckpt.config, prompt, rf);
    const std::int64_t limit = context_limit(ckpt.config, rf);
    if (static_cast<std::int64_t>(prompt.size()) + max_new > limit) {
        throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens plus " + std::to_string(max_new) +
                          " new tokens exceeds context limit " + std::to_string(limit));
    }
    const int vocab = ckpt.config.vocab_size;
    if (mode == DecodeMode::recompute) {
        for (int i = 0; i < max_new; ++i) {
            const Logits logits = forward(ckpt, out, rf);
            out.push_back(argmax_lowest(logits.row(logits.rows - 1)));
        }
        return out;
    }
    detail::Transformer<float> net(ckpt.config, ckpt.params);
    const int capacity = static_cast<int>(prompt.size()) + max_new;
    auto st = net.start(capacity, rf);
    std::vector<float> logits(prompt.size() * static_cast<std::size_t>(vocab));
    net.extend(st, prompt, logits.data(), nullptr);
    std::span<const float> last(logits.data() + (prompt.size() - 1) * static_cast<std::size_t>(vocab),
                                static_cast<std::size_t>(vocab));
    Token next = argmax_lowest(last);
    std::vector<float> step_logits(static_cast<std::size_t>(vocab));
    for (int i = 0; i < max_new; ++i) {
        out.push_back(next);
        if (i + 1 == max_new) break;
        const Token tok = next;
        net.extend(st, std::span<const Token>(&tok, 1), step_logits.data(), nullptr);
        next = argmax_lowest(step_logits);
    }
    return out;
}

}  // namespace ropeforge::model
