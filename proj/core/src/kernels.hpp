#pragma once

// Row-wise numeric kernels for the transformer forward pass.
//
// Every kernel computes each output row with a fixed operation order that
// does not depend on how many rows are processed in one call. Combined with
// -ffp-contract=off this makes prefix scoring, incremental decoding and full
// recomputation bit-identical.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <limits>

namespace ropeforge::kernels {

namespace detail {

// R rows of y = x * w over output columns [j0, j0 + NV * lanes). Each output
// element is 0 + x[r,0]*w[0,j] + x[r,1]*w[1,j] + ... in order of k; vector
// lanes compute exactly what the scalar loop would.
template <class T, int R, int NV>
inline void matmul_tile(const T* x, int in, const T* w, int out, T* y, int j0) {
    using V [[gnu::vector_size(32)]] = T;
    constexpr int kLanes = static_cast<int>(sizeof(V) / sizeof(T));
    V acc[R][NV] = {};
    for (int k = 0; k < in; ++k) {
        const T* wk = w + static_cast<std::ptrdiff_t>(k) * out + j0;
        V wv[NV];
        for (int v = 0; v < NV; ++v) std::memcpy(&wv[v], wk + v * kLanes, sizeof(V));
        for (int r = 0; r < R; ++r) {
            const T xk = x[static_cast<std::ptrdiff_t>(r) * in + k];
            for (int v = 0; v < NV; ++v) acc[r][v] += xk * wv[v];
        }
    }
    for (int r = 0; r < R; ++r) std::memcpy(y + static_cast<std::ptrdiff_t>(r) * out + j0, acc[r], sizeof(acc[r]));
}

template <class T, int R>
inline void matmul_tail(const T* x, int in, const T* w, int out, T* y, int j0) {
    for (int r = 0; r < R; ++r) {
        for (int j = j0; j < out; ++j) {
            T acc = 0;
            for (int k = 0; k < in; ++k) acc += x[static_cast<std::ptrdiff_t>(r) * in + k] * w[static_cast<std::ptrdiff_t>(k) * out + j];
            y[static_cast<std::ptrdiff_t>(r) * out + j] = acc;
        }
    }
}

template <class T, int R>
inline void matmul_block(const T* x, int in, const T* w, int out, T* y) {
    constexpr int kVectors = 2;
    constexpr int kWidth = kVectors * 32 / static_cast<int>(sizeof(T));
    int j0 = 0;
    for (; j0 + kWidth <= out; j0 += kWidth) matmul_tile<T, R, kVectors>(x, in, w, out, y, j0);
    if (j0 < out) matmul_tail<T, R>(x, in, w, out, y, j0);
}

}  // namespace detail

// y[r, :] = sum_k x[r, k] * w[k, :]   (x: rows x in, w: in x out, row-major)
template <class T>
void matmul_rows(const T* x, int rows, int in, const T* w, int out, T* y) {
    constexpr int kRows = 8;
    int r = 0;
    for (; r + kRows <= rows; r += kRows) {
        detail::matmul_block<T, kRows>(x + static_cast<std::ptrdiff_t>(r) * in, in, w, out,
                                       y + static_cast<std::ptrdiff_t>(r) * out);
    }
    for (; r < rows; ++r) {
        detail::matmul_block<T, 1>(x + static_cast<std::ptrdiff_t>(r) * in, in, w, out,
                                   y + static_cast<std::ptrdiff_t>(r) * out);
    }
}

namespace detail {

template <class T>
using Vec [[gnu::vector_size(32)]] = T;

// Keys are cached transposed in tiles of kKeyTile positions: element (dd, j)
// lives at (j / kKeyTile) * hd * kKeyTile + dd * kKeyTile + j % kKeyTile.
inline constexpr int kKeyTile = 32;

inline std::ptrdiff_t key_index(int dd, int j, int hd) {
    return static_cast<std::ptrdiff_t>(j / kKeyTile) * hd * kKeyTile + dd * kKeyTile + j % kKeyTile;
}

// Q query rows against keys [0, n): s[r][j] = q[r][0]*k[0][j] + q[r][1]*k[1][j] + ...
template <class T, int Q>
inline void scores_block(const T* q, std::ptrdiff_t qs, const T* kt, int hd, int n, T* s, std::ptrdiff_t ss) {
    using V = Vec<T>;
    constexpr int kNV = kKeyTile * static_cast<int>(sizeof(T)) / static_cast<int>(sizeof(V));
    int j0 = 0;
    for (; j0 + kKeyTile <= n; j0 += kKeyTile) {
        const T* tile = kt + key_index(0, j0, hd);
        V acc[Q][kNV];
        V kv[kNV];
        std::memcpy(kv, tile, sizeof kv);
        for (int r = 0; r < Q; ++r) {
            for (int v = 0; v < kNV; ++v) acc[r][v] = q[r * qs] * kv[v];
        }
        for (int dd = 1; dd < hd; ++dd) {
            std::memcpy(kv, tile + dd * kKeyTile, sizeof kv);
            for (int r = 0; r < Q; ++r) {
                const T qd = q[r * qs + dd];
                for (int v = 0; v < kNV; ++v) acc[r][v] += qd * kv[v];
            }
        }
        for (int r = 0; r < Q; ++r) std::memcpy(s + r * ss + j0, acc[r], sizeof acc[r]);
    }
    for (int r = 0; r < Q; ++r) {
        for (int j = j0; j < n; ++j) {
            T acc = q[r * qs] * kt[key_index(0, j, hd)];
            for (int dd = 1; dd < hd; ++dd) acc += q[r * qs + dd] * kt[key_index(dd, j, hd)];
            s[r * ss + j] = acc;
        }
    }
}

// Q rows of o[r][c] = 0 + p[r][0]*v[0][c] + p[r][1]*v[1][c] + ... over j < n.
template <class T, int Q, int NV>
inline void weighted_block(const T* p, std::ptrdiff_t ps, const T* v, std::ptrdiff_t vs, int n, T* o,
                           std::ptrdiff_t os) {
    using V = Vec<T>;
    V acc[Q][NV] = {};
    for (int j = 0; j < n; ++j) {
        V vv[NV];
        std::memcpy(vv, v + j * vs, sizeof vv);
        for (int r = 0; r < Q; ++r) {
            const T pj = p[r * ps + j];
            for (int c = 0; c < NV; ++c) acc[r][c] += pj * vv[c];
        }
    }
    for (int r = 0; r < Q; ++r) std::memcpy(o + r * os, acc[r], sizeof acc[r]);
}

template <class T, int Q>
inline void weighted_rows(const T* p, std::ptrdiff_t ps, const T* v, std::ptrdiff_t vs, int n, int hd, T* o,
                          std::ptrdiff_t os) {
    constexpr int kLanes = static_cast<int>(sizeof(Vec<T>) / sizeof(T));
    if (hd % kLanes == 0) {
        switch (hd / kLanes) {
            case 1: return weighted_block<T, Q, 1>(p, ps, v, vs, n, o, os);
            case 2: return weighted_block<T, Q, 2>(p, ps, v, vs, n, o, os);
            case 4: return weighted_block<T, Q, 4>(p, ps, v, vs, n, o, os);
            case 8: return weighted_block<T, Q, 8>(p, ps, v, vs, n, o, os);
            default: break;
        }
    }
    for (int r = 0; r < Q; ++r) {
        T* orow = o + r * os;
        std::fill(orow, orow + hd, T(0));
        for (int j = 0; j < n; ++j) {
            const T pj = p[r * ps + j];
            for (int c = 0; c < hd; ++c) orow[c] += pj * v[j * vs + c];
        }
    }
}

}  // namespace detail

template <class T>
void softmax_inplace(T* s, int n);

inline constexpr int kAttentionBlock = 8;

// Causal attention for `rows` consecutive queries of one head; query r sees
// keys [0, len0 + r). kt is the tiled key cache and must hold len0 + rows - 1
// keys. probs is scratch for kAttentionBlock rows of stride ps >= len0 + rows - 1;
// on_probs(r, weights, len) sees each row's attention weights.
// Queries should already carry the 1/sqrt(hd) scale.
template <class T, class OnProbs>
void causal_attention(const T* q, std::ptrdiff_t qs, const T* kt, const T* v, std::ptrdiff_t vs, int hd, int len0,
                      int rows, T* probs, std::ptrdiff_t ps, T* out, std::ptrdiff_t os, OnProbs&& on_probs) {
    constexpr int kQ = kAttentionBlock;
    auto block = [&]<int Q>(int r0) {
        const int n = len0 + r0 + Q - 1;
        T* p = probs;
        detail::scores_block<T, Q>(q + r0 * qs, qs, kt, hd, n, p, ps);
        for (int r = 0; r < Q; ++r) {
            const int len = len0 + r0 + r;
            softmax_inplace(p + r * ps, len);
            on_probs(r0 + r, static_cast<const T*>(p + r * ps), len);
            std::fill(p + r * ps + len, p + r * ps + n, T(0));
        }
        detail::weighted_rows<T, Q>(p, ps, v, vs, n, hd, out + r0 * os, os);
    };
    int r0 = 0;
    for (; r0 + kQ <= rows; r0 += kQ) block.template operator()<kQ>(r0);
    for (; r0 < rows; ++r0) block.template operator()<1>(r0);
}

// y = x * inv_rms(x) * gain. inv_rms_out (nullable) receives 1/rms per row.
template <class T>
void rmsnorm_rows(const T* x, const T* gain, int rows, int dim, T eps, T* y, T* inv_rms_out) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + static_cast<std::ptrdiff_t>(r) * dim;
        T* yr = y + static_cast<std::ptrdiff_t>(r) * dim;
        T ss = 0;
        for (int j = 0; j < dim; ++j) ss += xr[j] * xr[j];
        const T inv = T(1) / std::sqrt(ss / static_cast<T>(dim) + eps);
        if (inv_rms_out) inv_rms_out[r] = inv;
        for (int j = 0; j < dim; ++j) yr[j] = xr[j] * inv * gain[j];
    }
}

template <class T>
struct Gelu {
    static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
    static constexpr T kA = T(0.044715);

    static T value(T u) {
        const T t = std::tanh(kC * (u + kA * u * u * u));
        return T(0.5) * u * (T(1) + t);
    }
    // a[i] = value(u[i]) up to the vectorized tanh; elements go through fixed
    // 16-wide blocks so the result does not depend on n.
    static void apply(const T* u, T* a, std::size_t n) {
        constexpr std::size_t kBlock = 16;
        using Block = Eigen::Array<T, kBlock, 1>;
        auto eval = [](const Block& x) -> Block {
            const Block t = (kC * (x + kA * x * x * x)).tanh();
            return T(0.5) * x * (T(1) + t);
        };
        std::size_t i = 0;
        for (; i + kBlock <= n; i += kBlock) Eigen::Map<Block>(a + i) = eval(Eigen::Map<const Block>(u + i));
        if (i < n) {
            Block tail = Block::Zero();
            for (std::size_t k = 0; i + k < n; ++k) tail[static_cast<Eigen::Index>(k)] = u[i + k];
            tail = eval(tail);
            for (std::size_t k = 0; i + k < n; ++k) a[i + k] = tail[static_cast<Eigen::Index>(k)];
        }
    }
    static T derivative(T u) {
        const T t = std::tanh(kC * (u + kA * u * u * u));
        return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * kC * (T(1) + T(3) * kA * u * u);
    }
};

// In-place softmax over s[0, n). Exponentials are evaluated in fixed 16-wide
// blocks (the tail block padded with -inf) so each element always takes the
// same vectorized path.
template <class T>
void softmax_inplace(T* s, int n) {
    constexpr int kBlock = 16;
    using Block = Eigen::Array<T, kBlock, 1>;
    T mx = -std::numeric_limits<T>::infinity();
    for (int k = 0; k < n; ++k) mx = std::max(mx, s[k]);
    Block acc = Block::Zero();
    int k = 0;
    for (; k + kBlock <= n; k += kBlock) {
        Eigen::Map<Block> blk(s + k);
        blk = (blk - mx).exp();
        acc += blk;
    }
    if (k < n) {
        Block tail = Block::Constant(-std::numeric_limits<T>::infinity());
        for (int i = 0; k + i < n; ++i) tail[i] = s[k + i];
        tail = (tail - mx).exp();
        acc += tail;
        for (int i = 0; k + i < n; ++i) s[k + i] = tail[i];
    }
    T sum = 0;
    for (int i = 0; i < kBlock; ++i) sum += acc[i];
    const T inv = T(1) / sum;
    for (int i = 0; i < n; ++i) s[i] *= inv;
}

// Rotates each (v[2i], v[2i+1]) by the angle whose cos/sin are given.
template <class T>
void rotate_pairs(T* v, const T* cos_row, const T* sin_row, int pairs) {
    for (int i = 0; i < pairs; ++i) {
        const T x = v[2 * i];
        const T y = v[2 * i + 1];
        v[2 * i] = x * cos_row[i] - y * sin_row[i];
        v[2 * i + 1] = x * sin_row[i] + y * cos_row[i];
    }
}

// Inverse rotation (transpose), used to pull gradients back through RoPE.
template <class T>
void unrotate_pairs(T* v, const T* cos_row, const T* sin_row, int pairs) {
    for (int i = 0; i < pairs; ++i) {
        const T x = v[2 * i];
        const T y = v[2 * i + 1];
        v[2 * i] = x * cos_row[i] + y * sin_row[i];
        v[2 * i + 1] = -x * sin_row[i] + y * cos_row[i];
    }
}

}  // namespace ropeforge::kernels
