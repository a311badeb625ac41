// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable primitives recorded on a Tape. Every model-level computation
// is composed from these.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "deltamoe/kernels.hpp"
#include "deltamoe/tape.hpp"
#include "deltamoe/tensor.hpp"

namespace deltamoe {

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
    const auto& A = tape.value(a);
    const auto& B = tape.value(b);
    detail::require_matrix(A, "matmul");
    detail::require_matrix(B, "matmul");
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    detail::require(B.dim(0) == k, "matmul: inner dimensions disagree " + shape_str(A.shape()) + " x " +
                                       shape_str(B.shape()));
    Tensor<T> C({m, n});
    kernels::gemm<T>(false, false, m, n, k, T(1), A.ptr(), k, B.ptr(), n, T(0), C.ptr(), n);
    return tape.record("matmul", std::move(C), {a, b}, [a, b, m, k, n](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        if (t.requires_grad(a)) {
            kernels::gemm<T>(false, true, m, k, n, T(1), G.ptr(), n, t.value(b).ptr(), n, T(1),
                             t.grad_buffer(a).ptr(), k);
        }
        if (t.requires_grad(b)) {
            kernels::gemm<T>(true, false, k, n, m, T(1), t.value(a).ptr(), k, G.ptr(), n, T(1),
                             t.grad_buffer(b).ptr(), n);
        }
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& A = tape.value(a);
    const auto& B = tape.value(b);
    detail::require(A.shape() == B.shape(), "add: shape mismatch " + shape_str(A.shape()) + " vs " +
                                                shape_str(B.shape()));
    Tensor<T> C(A.shape());
    for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
    return tape.record("add", std::move(C), {a, b}, [a, b](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        for (Var in : {a, b}) {
            if (!t.requires_grad(in)) continue;
            auto& g = t.grad_buffer(in);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
        }
    });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const auto& A = tape.value(a);
    const auto& B = tape.value(b);
    detail::require(A.shape() == B.shape(), "mul: shape mismatch " + shape_str(A.shape()) + " vs " +
                                                shape_str(B.shape()));
    Tensor<T> C(A.shape());
    for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
    return tape.record("mul", std::move(C), {a, b}, [a, b](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        if (t.requires_grad(a)) {
            const auto& Bv = t.value(b);
            auto& g = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * Bv[i];
        }
        if (t.requires_grad(b)) {
            const auto& Av = t.value(a);
            auto& g = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * Av[i];
        }
    });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T c) {
    const auto& A = tape.value(a);
    Tensor<T> C(A.shape());
    for (std::size_t i = 0; i < C.size(); ++i) C[i] = c * A[i];
    return tape.record("scale", std::move(C), {a}, [a, c](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        auto& g = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * G[i];
    });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
    const auto& A = tape.value(a);
    T s = 0;
    for (T v : A.data()) s += v;
    return tape.record("sum", Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, Var out) {
        const T g0 = t.grad_ref(out)[0];
        auto& g = t.grad_buffer(a);
        for (auto& v : g.data()) v += g0;
    });
}

template <typename T>
Var sum_squares(Tape<T>& tape, Var a) {
    const auto& A = tape.value(a);
    T s = 0;
    for (T v : A.data()) s += v * v;
    return tape.record("sum_squares", Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, Var out) {
        const T g0 = t.grad_ref(out)[0];
        const auto& Av = t.value(a);
        auto& g = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * g0 * Av[i];
    });
}

template <typename T>
Var silu(Tape<T>& tape, Var x) {
    const auto& X = tape.value(x);
    Tensor<T> Y(X.shape());
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = X[i] * kernels::sigmoid(X[i]);
    return tape.record("silu", std::move(Y), {x}, [x](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        const auto& Xv = t.value(x);
        auto& g = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = kernels::sigmoid(Xv[i]);
            g[i] += G[i] * s * (T(1) + Xv[i] * (T(1) - s));
        }
    });
}

// Softmax over the last dimension.
template <typename T>
Var softmax(Tape<T>& tape, Var z) {
    Tensor<T> Y = tape.value(z);
    const std::size_t n = Y.cols(), rows = Y.rows();
    for (std::size_t r = 0; r < rows; ++r) kernels::softmax_row(Y.ptr() + r * n, n);
    return tape.record("softmax", std::move(Y), {z}, [z, n, rows](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        const auto& Yv = t.value(out);
        auto& g = t.grad_buffer(z);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = Yv.ptr() + r * n;
            const T* gy = G.ptr() + r * n;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
        }
    });
}

template <typename T>
Var rms_norm(Tape<T>& tape, Var x, Var gain, T eps = T(1e-5)) {
    const auto& X = tape.value(x);
    const auto& Gn = tape.value(gain);
    detail::require_matrix(X, "rms_norm");
    const std::size_t rows = X.dim(0), d = X.dim(1);
    detail::require(Gn.size() == d, "rms_norm: gain length " + std::to_string(Gn.size()) + " != " + std::to_string(d));
    Tensor<T> Y(X.shape());
    std::vector<T> rinv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = X.ptr() + r * d;
        T ms = 0;
        for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        rinv[r] = T(1) / std::sqrt(ms / T(d) + eps);
        for (std::size_t j = 0; j < d; ++j) Y[r * d + j] = xr[j] * rinv[r] * Gn[j];
    }
    return tape.record("rms_norm", std::move(Y), {x, gain},
                       [x, gain, rows, d, rinv = std::move(rinv)](Tape<T>& t, Var out) {
                           const auto& G = t.grad_ref(out);
                           const auto& Xv = t.value(x);
                           const auto& Gv = t.value(gain);
                           const bool need_x = t.requires_grad(x);
                           Tensor<T>* gg = t.requires_grad(gain) ? &t.grad_buffer(gain) : nullptr;
                           Tensor<T>* gx = need_x ? &t.grad_buffer(x) : nullptr;
                           for (std::size_t r = 0; r < rows; ++r) {
                               const T* xr = Xv.ptr() + r * d;
                               const T* gr = G.ptr() + r * d;
                               T dot = 0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   const T xhat = xr[j] * rinv[r];
                                   if (gg) (*gg)[j] += gr[j] * xhat;
                                   dot += gr[j] * Gv[j] * xhat;
                               }
                               if (!gx) continue;
                               const T mean = dot / T(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                   const T xhat = xr[j] * rinv[r];
                                   (*gx)[r * d + j] += rinv[r] * (gr[j] * Gv[j] - xhat * mean);
                               }
                           }
                       });
}

// Row lookup: out[i] = table[ids[i]].
template <typename T>
Var embedding(Tape<T>& tape, Var table, std::span<const TokenId> ids) {
    const auto& W = tape.value(table);
    detail::require_matrix(W, "embedding");
    const std::size_t rows = W.dim(0), d = W.dim(1);
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    Tensor<T> Y({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
            throw IndexError("embedding: id " + std::to_string(ids[i]) + " out of range " + std::to_string(rows));
        }
        std::copy_n(W.ptr() + static_cast<std::size_t>(ids[i]) * d, d, Y.ptr() + i * d);
    }
    std::vector<TokenId> saved(ids.begin(), ids.end());
    return tape.record("embedding", std::move(Y), {table}, [table, d, saved = std::move(saved)](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        auto& g = t.grad_buffer(table);
        for (std::size_t i = 0; i < saved.size(); ++i) {
            T* dst = g.ptr() + static_cast<std::size_t>(saved[i]) * d;
            const T* src = G.ptr() + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

// Multi-head causal self-attention over `batch` independent sequences of
// length `seq`. q, k, v are [batch*seq x d]; heads split d evenly.
template <typename T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
    const auto& Q = tape.value(q);
    const auto& K = tape.value(k);
    const auto& V = tape.value(v);
    detail::require_matrix(Q, "causal_attention");
    detail::require(Q.shape() == K.shape() && Q.shape() == V.shape(), "causal_attention: q/k/v shapes differ");
    const std::size_t d = Q.dim(1);
    detail::require(Q.dim(0) == batch * seq, "causal_attention: rows != batch*seq");
    detail::require(heads > 0 && d % heads == 0, "causal_attention: heads must divide d");
    const std::size_t dh = d / heads;
    const T sc = T(1) / std::sqrt(T(dh));
    std::vector<T> probs(batch * heads * seq * seq);
    Tensor<T> O({batch * seq, d});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            T* P = probs.data() + (b * heads + h) * seq * seq;
            const std::size_t off = b * seq * d + h * dh;
            kernels::gemm<T>(false, true, seq, seq, dh, sc, Q.ptr() + off, d, K.ptr() + off, d, T(0), P, seq);
            for (std::size_t i = 0; i < seq; ++i) {
                T* row = P + i * seq;
                kernels::softmax_row(row, i + 1);
                std::fill(row + i + 1, row + seq, T(0));
            }
            kernels::gemm<T>(false, false, seq, dh, seq, T(1), P, seq, V.ptr() + off, d, T(0), O.ptr() + off, d);
        }
    }
    return tape.record(
        "causal_attention", std::move(O), {q, k, v},
        [q, k, v, batch, seq, heads, d, dh, sc, probs = std::move(probs)](Tape<T>& t, Var out) {
            const auto& G = t.grad_ref(out);
            const auto& Qv = t.value(q);
            const auto& Kv = t.value(k);
            const auto& Vv = t.value(v);
            const bool nq = t.requires_grad(q), nk = t.requires_grad(k), nv = t.requires_grad(v);
            T* gq = nq ? t.grad_buffer(q).ptr() : nullptr;
            T* gk = nk ? t.grad_buffer(k).ptr() : nullptr;
            T* gv = nv ? t.grad_buffer(v).ptr() : nullptr;
            std::vector<T> dP(seq * seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const T* P = probs.data() + (b * heads + h) * seq * seq;
                    const std::size_t off = b * seq * d + h * dh;
                    if (nv) {
                        kernels::gemm<T>(true, false, seq, dh, seq, T(1), P, seq, G.ptr() + off, d, T(1), gv + off, d);
                    }
                    if (!nq && !nk) continue;
                    kernels::gemm<T>(false, true, seq, seq, dh, T(1), G.ptr() + off, d, Vv.ptr() + off, d, T(0),
                                     dP.data(), seq);
                    for (std::size_t i = 0; i < seq; ++i) {
                        T* dr = dP.data() + i * seq;
                        const T* pr = P + i * seq;
                        T dot = 0;
                        for (std::size_t j = 0; j <= i; ++j) dot += dr[j] * pr[j];
                        for (std::size_t j = 0; j <= i; ++j) dr[j] = pr[j] * (dr[j] - dot);
                        std::fill(dr + i + 1, dr + seq, T(0));
                    }
                    if (nq) {
                        kernels::gemm<T>(false, false, seq, dh, seq, sc, dP.data(), seq, Kv.ptr() + off, d, T(1),
                                         gq + off, d);
                    }
                    if (nk) {
                        kernels::gemm<T>(true, false, seq, dh, seq, sc, dP.data(), seq, Qv.ptr() + off, d, T(1),
                                         gk + off, d);
                    }
                }
            }
        });
}

// Weighted token cross-entropy: sum_r weights[r] * -log softmax(logits[r])[targets[r]].
// Rows with zero weight are ignored (their target may be any value).
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const TokenId> targets, std::span<const T> weights) {
    const auto& Z = tape.value(logits);
    detail::require_matrix(Z, "cross_entropy");
    const std::size_t rows = Z.dim(0), V = Z.dim(1);
    detail::require(targets.size() == rows && weights.size() == rows, "cross_entropy: targets/weights length mismatch");
    T loss = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (weights[r] == T(0)) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " out of range " +
                             std::to_string(V));
        }
        const T* z = Z.ptr() + r * V;
        T mx = *std::max_element(z, z + V);
        T s = 0;
        for (std::size_t j = 0; j < V; ++j) s += std::exp(z[j] - mx);
        loss += weights[r] * (std::log(s) + mx - z[targets[r]]);
    }
    std::vector<TokenId> tg(targets.begin(), targets.end());
    std::vector<T> wt(weights.begin(), weights.end());
    return tape.record("cross_entropy", Tensor<T>::scalar(loss), {logits},
                       [logits, rows, V, tg = std::move(tg), wt = std::move(wt)](Tape<T>& t, Var out) {
                           const T g0 = t.grad_ref(out)[0];
                           const auto& Zv = t.value(logits);
                           auto& g = t.grad_buffer(logits);
                           std::vector<T> p(V);
                           for (std::size_t r = 0; r < rows; ++r) {
                               if (wt[r] == T(0)) continue;
                               std::copy_n(Zv.ptr() + r * V, V, p.data());
                               kernels::softmax_row(p.data(), V);
                               const T c = g0 * wt[r];
                               T* gr = g.ptr() + r * V;
                               for (std::size_t j = 0; j < V; ++j) gr[j] += c * p[j];
                               gr[tg[r]] -= c;
                           }
                       });
}

// Mean cross-entropy over all rows.
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const TokenId> targets) {
    const std::size_t rows = tape.value(logits).rows();
    if (rows == 0) throw ArgumentError("cross_entropy: no positions");
    std::vector<T> w(rows, T(1) / T(rows));
    return cross_entropy(tape, logits, targets, std::span<const T>(w));
}

// Indices of the k largest entries, in descending value order; ties go to the lower index.
template <typename T>
std::vector<std::size_t> topk(std::span<const T> p, std::size_t k) {
    if (k < 1 || k > p.size()) {
        throw ArgumentError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(p.size()) + "]");
    }
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
    idx.resize(k);
    return idx;
}

// Per-row top-k expert choice: experts[r*k + j] is the j-th pick of row r.
struct Selection {
    std::size_t rows = 0;
    std::size_t k = 0;
    std::vector<std::uint16_t> experts;

    std::span<const std::uint16_t> row(std::size_t r) const { return {experts.data() + r * k, k}; }
};

// w[r,i] = p[r,i] / sum_{j in TopK(p[r])} p[r,j] for selected i, else 0.
template <typename T>
Var topk_renorm(Tape<T>& tape, Var probs, std::size_t k, Selection& selection) {
    const auto& Pm = tape.value(probs);
    detail::require_matrix(Pm, "topk_renorm");
    const std::size_t rows = Pm.dim(0), n = Pm.dim(1);
    selection = Selection{rows, k, std::vector<std::uint16_t>(rows * k)};
    Tensor<T> W({rows, n});
    std::vector<T> denom(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        auto sel = topk(std::span<const T>(Pm.ptr() + r * n, n), k);
        T s = 0;
        for (std::size_t j = 0; j < k; ++j) {
            selection.experts[r * k + j] = static_cast<std::uint16_t>(sel[j]);
            s += Pm[r * n + sel[j]];
        }
        denom[r] = s;
        for (auto i : sel) W[r * n + i] = Pm[r * n + i] / s;
    }
    return tape.record("topk_renorm", std::move(W), {probs},
                       [probs, rows, n, k, sel = selection.experts, denom = std::move(denom)](Tape<T>& t, Var out) {
                           const auto& G = t.grad_ref(out);
                           const auto& Pv = t.value(probs);
                           auto& g = t.grad_buffer(probs);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const T s = denom[r];
                               T acc = 0;
                               for (std::size_t j = 0; j < k; ++j) {
                                   const auto i = sel[r * k + j];
                                   acc += G[r * n + i] * Pv[r * n + i];
                               }
                               for (std::size_t j = 0; j < k; ++j) {
                                   const auto i = sel[r * k + j];
                                   g[r * n + i] += G[r * n + i] / s - acc / (s * s);
                               }
                           }
                       });
}

template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::span<const std::uint32_t> rows) {
    const auto& X = tape.value(x);
    detail::require_matrix(X, "gather_rows");
    const std::size_t d = X.dim(1);
    if (rows.empty()) throw ShapeError("gather_rows: empty row set");
    Tensor<T> Y({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= X.dim(0)) throw IndexError("gather_rows: row out of range");
        std::copy_n(X.ptr() + rows[i] * d, d, Y.ptr() + i * d);
    }
    std::vector<std::uint32_t> saved(rows.begin(), rows.end());
    return tape.record("gather_rows", std::move(Y), {x}, [x, d, saved = std::move(saved)](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        auto& g = t.grad_buffer(x);
        for (std::size_t i = 0; i < saved.size(); ++i) {
            T* dst = g.ptr() + saved[i] * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += G[i * d + j];
        }
    });
}

// out = base, then out[rows[i]] += src[i].
template <typename T>
Var index_add(Tape<T>& tape, Var base, Var src, std::span<const std::uint32_t> rows) {
    const auto& B = tape.value(base);
    const auto& S = tape.value(src);
    detail::require_matrix(B, "index_add");
    detail::require_matrix(S, "index_add");
    const std::size_t d = B.dim(1);
    detail::require(S.dim(1) == d && S.dim(0) == rows.size(), "index_add: source shape mismatch");
    Tensor<T> Y = B;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= B.dim(0)) throw IndexError("index_add: row out of range");
        T* dst = Y.ptr() + rows[i] * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += S[i * d + j];
    }
    std::vector<std::uint32_t> saved(rows.begin(), rows.end());
    return tape.record("index_add", std::move(Y), {base, src},
                       [base, src, d, saved = std::move(saved)](Tape<T>& t, Var out) {
                           const auto& G = t.grad_ref(out);
                           if (t.requires_grad(base)) {
                               auto& g = t.grad_buffer(base);
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
                           }
                           if (t.requires_grad(src)) {
                               auto& g = t.grad_buffer(src);
                               for (std::size_t i = 0; i < saved.size(); ++i) {
                                   const T* s = G.ptr() + saved[i] * d;
                                   for (std::size_t j = 0; j < d; ++j) g[i * d + j] += s[j];
                               }
                           }
                       });
}

// out[i] = m[rows[i], col].
template <typename T>
Var take_column(Tape<T>& tape, Var m, std::span<const std::uint32_t> rows, std::size_t col) {
    const auto& M = tape.value(m);
    detail::require_matrix(M, "take_column");
    const std::size_t n = M.dim(1);
    detail::require(col < n && !rows.empty(), "take_column: bad column or empty rows");
    Tensor<T> Y({rows.size()});
    for (std::size_t i = 0; i < rows.size(); ++i) Y[i] = M[rows[i] * n + col];
    std::vector<std::uint32_t> saved(rows.begin(), rows.end());
    return tape.record("take_column", std::move(Y), {m}, [m, n, col, saved = std::move(saved)](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        auto& g = t.grad_buffer(m);
        for (std::size_t i = 0; i < saved.size(); ++i) g[saved[i] * n + col] += G[i];
    });
}

// y[i,:] = s[i] * x[i,:].
template <typename T>
Var scale_rows(Tape<T>& tape, Var x, Var s) {
    const auto& X = tape.value(x);
    const auto& S = tape.value(s);
    detail::require_matrix(X, "scale_rows");
    const std::size_t rows = X.dim(0), d = X.dim(1);
    detail::require(S.size() == rows, "scale_rows: scale length mismatch");
    Tensor<T> Y(X.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) Y[r * d + j] = S[r] * X[r * d + j];
    }
    return tape.record("scale_rows", std::move(Y), {x, s}, [x, s, rows, d](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        if (t.requires_grad(x)) {
            const auto& Sv = t.value(s);
            auto& g = t.grad_buffer(x);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += Sv[r] * G[r * d + j];
            }
        }
        if (t.requires_grad(s)) {
            const auto& Xv = t.value(x);
            auto& g = t.grad_buffer(s);
            for (std::size_t r = 0; r < rows; ++r) {
                T acc = 0;
                for (std::size_t j = 0; j < d; ++j) acc += G[r * d + j] * Xv[r * d + j];
                g[r] += acc;
            }
        }
    });
}

// Column means of a matrix: [rows x n] -> [n].
template <typename T>
Var mean_rows(Tape<T>& tape, Var m) {
    const auto& M = tape.value(m);
    detail::require_matrix(M, "mean_rows");
    const std::size_t rows = M.dim(0), n = M.dim(1);
    Tensor<T> Y({n});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) Y[j] += M[r * n + j];
    }
    for (auto& v : Y.data()) v /= T(rows);
    return tape.record("mean_rows", std::move(Y), {m}, [m, rows, n](Tape<T>& t, Var out) {
        const auto& G = t.grad_ref(out);
        auto& g = t.grad_buffer(m);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += G[j] / T(rows);
        }
    });
}

// sum_i coeffs[i] * a[i], with constant coefficients.
template <typename T>
Var dot_const(Tape<T>& tape, Var a, std::span<const T> coeffs) {
    const auto& A = tape.value(a);
    detail::require(A.size() == coeffs.size(), "dot_const: length mismatch");
    T s = 0;
    for (std::size_t i = 0; i < A.size(); ++i) s += coeffs[i] * A[i];
    std::vector<T> c(coeffs.begin(), coeffs.end());
    return tape.record("dot_const", Tensor<T>::scalar(s), {a}, [a, c = std::move(c)](Tape<T>& t, Var out) {
        const T g0 = t.grad_ref(out)[0];
        auto& g = t.grad_buffer(a);
        for (std::size_t i = 0; i < c.size(); ++i) g[i] += g0 * c[i];
    });
}

}  // namespace deltamoe
