// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Top-k routed expert mixture and its load-balancing auxiliary loss.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deltamoe/ffn.hpp"
#include "deltamoe/ops.hpp"

namespace deltamoe {

template <typename T>
struct ExpertVars {
    Var gate, up, down;
};

template <typename T>
struct GateResult {
    Var probs;    // p = softmax(x * router), [T x N]
    Var weights;  // renormalised top-k weights, [T x N]
    Selection selected;
};

template <typename T>
GateResult<T> moe_gate(Tape<T>& tape, Var x, Var router, std::size_t k) {
    GateResult<T> g;
    g.probs = softmax(tape, matmul(tape, x, router));
    g.weights = topk_renorm(tape, g.probs, k, g.selected);
    return g;
}

// Token rows routed to each expert, in ascending row order.
inline std::vector<std::vector<std::uint32_t>> rows_per_expert(const Selection& sel, std::size_t n_experts) {
    std::vector<std::vector<std::uint32_t>> out(n_experts);
    for (std::size_t r = 0; r < sel.rows; ++r) {
        for (auto e : sel.row(r)) out[e].push_back(static_cast<std::uint32_t>(r));
    }
    return out;
}

// Batch accumulators behind the load-balancing loss.
template <typename T>
struct RoutingAccumulators {
    std::vector<T> fraction;  // f_i: assignments to expert i / (tokens * k)
    Var mean_prob;            // P_i: mean router probability over all tokens
};

template <typename T>
struct MoEOutput {
    Var mix;  // base + sum_i w_i E_i(x)
    GateResult<T> gate;
    RoutingAccumulators<T> acc;
};

// base + sum_i w_i * E_i(x) for every token; experts with no routed tokens are skipped.
template <typename T>
MoEOutput<T> moe_mix(Tape<T>& tape, Var x, Var router, std::span<const ExpertVars<T>> experts, std::size_t k,
                     Var base) {
    MoEOutput<T> out;
    out.gate = moe_gate(tape, x, router, k);
    const std::size_t n = experts.size();
    const std::size_t tokens = tape.value(x).rows();
    if (tape.value(router).cols() != n) throw ShapeError("moe_mix: router width != number of experts");
    auto rows = rows_per_expert(out.gate.selected, n);
    Var acc = base;
    for (std::size_t e = 0; e < n; ++e) {
        if (rows[e].empty()) continue;
        Var xs = gather_rows(tape, x, std::span<const std::uint32_t>(rows[e]));
        Var ye = ffn_forward(tape, xs, experts[e].gate, experts[e].up, experts[e].down);
        Var we = take_column(tape, out.gate.weights, std::span<const std::uint32_t>(rows[e]), e);
        acc = index_add(tape, acc, scale_rows(tape, ye, we), std::span<const std::uint32_t>(rows[e]));
    }
    out.mix = acc;
    out.acc.fraction.resize(n);
    for (std::size_t e = 0; e < n; ++e) out.acc.fraction[e] = T(rows[e].size()) / T(tokens * k);
    out.acc.mean_prob = mean_rows(tape, out.gate.probs);
    return out;
}

// y = sum_i w_i E_i(x) + x.
template <typename T>
MoEOutput<T> moe_forward(Tape<T>& tape, Var x, Var router, std::span<const ExpertVars<T>> experts, std::size_t k) {
    return moe_mix(tape, x, router, experts, k, x);
}

// N * sum_i f_i P_i on plain values.
template <typename T>
T lb_loss(std::span<const T> f, std::span<const T> p, std::size_t n) {
    if (f.size() != n || p.size() != n) throw ShapeError("lb_loss: f and P must have N entries");
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (f[i] < T(0) || p[i] < T(0)) throw ArgumentError("lb_loss: negative entry");
        s += f[i] * p[i];
    }
    return T(n) * s;
}

// Differentiable through P only; f is a constant.
template <typename T>
Var lb_loss(Tape<T>& tape, const RoutingAccumulators<T>& acc) {
    const std::size_t n = acc.fraction.size();
    std::vector<T> c(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (acc.fraction[i] < T(0)) throw ArgumentError("lb_loss: negative fraction");
        c[i] = T(n) * acc.fraction[i];
    }
    return dot_const(tape, acc.mean_prob, std::span<const T>(c));
}

}  // namespace deltamoe
