// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Decoder-only transformer: pre-norm RMSNorm blocks, learned absolute
// positions, causal multi-head attention, and either a dense SwiGLU FFN or a
// routed expert mixture per layer. No biases, no weight tying.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deltamoe/batch.hpp"
#include "deltamoe/config.hpp"
#include "deltamoe/ffn.hpp"
#include "deltamoe/moe_layer.hpp"
#include "deltamoe/ops.hpp"
#include "deltamoe/param_store.hpp"
#include "deltamoe/rng.hpp"

namespace deltamoe {

template <typename T>
struct Model {
    ModelKind kind = ModelKind::dense;
    ModelConfig config;
    ParamStore<T> params;
    std::set<std::string> frozen;

    bool is_moe() const noexcept { return kind == ModelKind::moe; }
    bool is_frozen(const std::string& name) const { return frozen.count(name) != 0; }

    template <typename U>
    Model<U> cast() const {
        return Model<U>{kind, config, params.template cast<U>(), frozen};
    }

    // Checks the store against the canonical layout for (kind, config).
    void validate() const {
        config.validate();
        auto layout = canonical_layout(kind, config);
        if (layout.size() != params.size()) {
            throw IncompatibleError("model has " + std::to_string(params.size()) + " tensors, layout expects " +
                                    std::to_string(layout.size()));
        }
        for (std::size_t i = 0; i < layout.size(); ++i) {
            const auto& [name, shape] = layout[i];
            if (params.names()[i] != name) {
                throw IncompatibleError("tensor " + std::to_string(i) + " is '" + params.names()[i] + "', expected '" +
                                        name + "'");
            }
            if (params.at(name).shape() != shape) {
                throw IncompatibleError("tensor '" + name + "' has shape " + shape_str(params.at(name).shape()) +
                                        ", expected " + shape_str(shape));
            }
        }
        for (const auto& f : frozen) {
            if (!params.contains(f)) throw IncompatibleError("frozen name '" + f + "' is not a tensor");
        }
    }
};

inline bool is_norm_name(const std::string& name) {
    return name.size() >= 5 && name.compare(name.size() - 5, 5, ".norm") == 0;
}

// normal(0, 0.02) for embeddings and projections, ones for norm scales.
template <typename T>
Model<T> init_dense(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model<T> m;
    m.kind = ModelKind::dense;
    m.config = config;
    std::mt19937_64 g(seed);
    for (auto& [name, shape] : canonical_layout(ModelKind::dense, config)) {
        Tensor<T> t(shape);
        if (is_norm_name(name)) {
            for (auto& v : t.data()) v = T(1);
        } else {
            for (auto& v : t.data()) v = static_cast<T>(0.02 * rng::normal(g));
        }
        m.params.insert(name, std::move(t));
    }
    return m;
}

// Tape leaves for every parameter of a model.
struct Bound {
    std::unordered_map<std::string, Var> vars;

    Var operator()(const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw IndexError("unbound parameter: " + name);
        return it->second;
    }
};

// Binds all parameters; names in `trainable` (if given) require gradients.
template <typename T>
Bound bind_params(Tape<T>& tape, const ParamStore<T>& params, const std::set<std::string>* trainable = nullptr) {
    Bound b;
    for (const auto& name : params.names()) {
        const bool rg = trainable != nullptr && trainable->count(name) != 0;
        b.vars.emplace(name, tape.leaf(params.at(name), rg));
    }
    return b;
}

template <typename T>
struct ForwardResult {
    Var logits;                                   // [rows*seq x V]
    std::vector<RoutingAccumulators<T>> routing;  // one per layer (MoE only)
    std::vector<Selection> selections;            // one per layer (MoE only)
};

template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const Model<T>& model, const Bound& p, std::span<const TokenId> tokens,
                         std::size_t rows, std::size_t seq) {
    const auto& c = model.config;
    if (seq == 0 || rows == 0 || tokens.size() != rows * seq) throw ShapeError("forward: tokens must be rows*seq");
    if (seq > c.max_seq_len) {
        throw ArgumentError("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                            std::to_string(c.max_seq_len));
    }
    for (auto id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
            throw IndexError("forward: token id " + std::to_string(id) + " out of vocabulary");
        }
    }
    std::vector<TokenId> positions(rows * seq);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % seq);

    ForwardResult<T> out;
    Var x = add(tape, embedding(tape, p("embed.tok"), tokens), embedding(tape, p("embed.pos"), std::span<const TokenId>(positions)));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        Var h = rms_norm(tape, x, p(names::layer(l, "attn.norm")));
        Var q = matmul(tape, h, p(names::layer(l, "attn.q")));
        Var k = matmul(tape, h, p(names::layer(l, "attn.k")));
        Var v = matmul(tape, h, p(names::layer(l, "attn.v")));
        Var a = causal_attention(tape, q, k, v, rows, seq, c.n_heads);
        x = add(tape, x, matmul(tape, a, p(names::layer(l, "attn.o"))));

        Var h2 = rms_norm(tape, x, p(names::layer(l, "ffn.norm")));
        if (model.kind == ModelKind::dense) {
            x = add(tape, x,
                    ffn_forward(tape, h2, p(names::layer(l, "ffn.gate")), p(names::layer(l, "ffn.up")),
                                p(names::layer(l, "ffn.down"))));
        } else {
            std::vector<ExpertVars<T>> experts(c.n_experts);
            for (std::size_t e = 0; e < c.n_experts; ++e) {
                experts[e] = {p(names::expert(l, e, "gate")), p(names::expert(l, e, "up")),
                              p(names::expert(l, e, "down"))};
            }
            auto moe = moe_mix(tape, h2, p(names::router(l)), std::span<const ExpertVars<T>>(experts), c.top_k, x);
            x = moe.mix;
            out.routing.push_back(std::move(moe.acc));
            out.selections.push_back(std::move(moe.gate.selected));
        }
    }
    Var hf = rms_norm(tape, x, p("final.norm"));
    out.logits = matmul(tape, hf, p("lm_head"));
    return out;
}

// Per-position weights realising mean over sequences of mean per-token loss.
template <typename T>
void ntp_targets(const Batch& batch, std::vector<TokenId>& targets, std::vector<T>& weights) {
    if (batch.rows == 0) throw ArgumentError("ntp_loss: empty batch");
    if (batch.seq < 2) throw ArgumentError("ntp_loss: sequences must have length >= 2");
    const std::size_t n = batch.rows * batch.seq;
    targets.assign(n, -1);
    weights.assign(n, T(0));
    std::vector<std::size_t> counts(batch.rows, 0);
    std::size_t live = 0;
    for (std::size_t r = 0; r < batch.rows; ++r) {
        for (std::size_t t = 1; t < batch.seq; ++t) counts[r] += batch.target(r, t) ? 1 : 0;
        live += counts[r] ? 1 : 0;
    }
    if (live == 0) throw ArgumentError("ntp_loss: batch has no supervised positions");
    for (std::size_t r = 0; r < batch.rows; ++r) {
        if (!counts[r]) continue;
        const T w = T(1) / (T(counts[r]) * T(live));
        for (std::size_t t = 1; t < batch.seq; ++t) {
            if (!batch.target(r, t)) continue;
            targets[r * batch.seq + t - 1] = batch.token(r, t);
            weights[r * batch.seq + t - 1] = w;
        }
    }
}

template <typename T>
Var ntp_loss(Tape<T>& tape, Var logits, const Batch& batch) {
    std::vector<TokenId> targets;
    std::vector<T> weights;
    ntp_targets(batch, targets, weights);
    return cross_entropy(tape, logits, std::span<const TokenId>(targets), std::span<const T>(weights));
}

template <typename T>
struct LossTerms {
    Var total;
    Var ntp;
    Var lb;  // mean over layers; unset (id == -1) for dense models
    T total_value = 0;
    T ntp_value = 0;
    T lb_value = 0;
    std::vector<Selection> selections;
};

// L = L_NTP + alpha * mean_layers(L_LB).
template <typename T>
LossTerms<T> total_loss(Tape<T>& tape, const Model<T>& model, const Bound& p, const Batch& batch, double alpha) {
    if (!(alpha >= 0.0)) throw ArgumentError("total_loss: alpha must be >= 0");
    auto fw = forward(tape, model, p, std::span<const TokenId>(batch.tokens), batch.rows, batch.seq);
    LossTerms<T> out;
    out.ntp = ntp_loss(tape, fw.logits, batch);
    out.ntp_value = tape.value(out.ntp)[0];
    out.total = out.ntp;
    if (!fw.routing.empty()) {
        Var lb = lb_loss(tape, fw.routing[0]);
        for (std::size_t l = 1; l < fw.routing.size(); ++l) lb = add(tape, lb, lb_loss(tape, fw.routing[l]));
        out.lb = scale(tape, lb, T(1) / T(fw.routing.size()));
        out.lb_value = tape.value(out.lb)[0];
        if (alpha != 0.0) out.total = add(tape, out.ntp, scale(tape, out.lb, static_cast<T>(alpha)));
    }
    out.total_value = tape.value(out.total)[0];
    out.selections = std::move(fw.selections);
    return out;
}

// Logits for a token matrix without recording gradients.
template <typename T>
Tensor<T> logits(const Model<T>& model, std::span<const TokenId> tokens, std::size_t rows, std::size_t seq,
                 std::vector<Selection>* selections = nullptr) {
    Tape<T> tape(false);
    Bound b = bind_params(tape, model.params);
    auto fw = forward(tape, model, b, tokens, rows, seq);
    if (selections) *selections = std::move(fw.selections);
    return tape.value(fw.logits);
}

}  // namespace deltamoe
