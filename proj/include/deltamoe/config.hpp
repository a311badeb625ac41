// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "deltamoe/error.hpp"
#include "deltamoe/tensor.hpp"

namespace deltamoe {

// Architecture plus MoE hyperparameters. Defaults are the desk-scale toy.
struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t ffn_dim = 128;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 272;
    std::size_t max_seq_len = 128;
    std::size_t n_experts = 4;
    std::size_t top_k = 2;
    double lb_alpha = 0.01;

    void validate() const {
        auto positive = [](std::size_t v, const char* f) {
            if (v == 0) throw ArgumentError(std::string("model config: ") + f + " must be positive");
        };
        positive(d_model, "d_model");
        positive(ffn_dim, "ffn_dim");
        positive(n_layers, "n_layers");
        positive(n_heads, "n_heads");
        positive(vocab_size, "vocab_size");
        positive(max_seq_len, "max_seq_len");
        positive(n_experts, "n_experts");
        if (d_model % n_heads != 0) throw ArgumentError("model config: n_heads must divide d_model");
        if (top_k < 1 || top_k > n_experts) throw ArgumentError("model config: top_k must be in [1, n_experts]");
        if (!(lb_alpha >= 0.0)) throw ArgumentError("model config: lb_alpha must be >= 0");
    }

    bool operator==(const ModelConfig&) const = default;
};

// Non-MoE fields agree; the precondition for moving deltas between models.
inline bool architecture_compatible(const ModelConfig& a, const ModelConfig& b) {
    return a.d_model == b.d_model && a.ffn_dim == b.ffn_dim && a.n_layers == b.n_layers && a.n_heads == b.n_heads &&
           a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len;
}

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["d_model"] = c.d_model;
    j["ffn_dim"] = c.ffn_dim;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["vocab_size"] = c.vocab_size;
    j["max_seq_len"] = c.max_seq_len;
    j["n_experts"] = c.n_experts;
    j["top_k"] = c.top_k;
    j["lb_alpha"] = c.lb_alpha;
    return j;
}

enum class ModelKind { dense, moe };

inline const char* kind_name(ModelKind k) { return k == ModelKind::dense ? "dense" : "moe"; }

namespace names {

inline std::string layer(std::size_t l, const char* leaf) { return "layers." + std::to_string(l) + "." + leaf; }

inline std::string expert(std::size_t l, std::size_t e, const char* leaf) {
    return "layers." + std::to_string(l) + ".ffn.experts." + std::to_string(e) + "." + leaf;
}

inline std::string router(std::size_t l) { return layer(l, "ffn.router"); }

inline constexpr const char* kFfnLeaves[] = {"gate", "up", "down"};

}  // namespace names

// Canonical (name, shape) list for a model of the given kind, in storage order.
inline std::vector<std::pair<std::string, Shape>> canonical_layout(ModelKind kind, const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.ffn_dim;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("embed.tok", Shape{c.vocab_size, d});
    out.emplace_back("embed.pos", Shape{c.max_seq_len, d});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        out.emplace_back(names::layer(l, "attn.norm"), Shape{d});
        for (const char* p : {"attn.q", "attn.k", "attn.v", "attn.o"}) out.emplace_back(names::layer(l, p), Shape{d, d});
        out.emplace_back(names::layer(l, "ffn.norm"), Shape{d});
        if (kind == ModelKind::dense) {
            out.emplace_back(names::layer(l, "ffn.gate"), Shape{d, f});
            out.emplace_back(names::layer(l, "ffn.up"), Shape{d, f});
            out.emplace_back(names::layer(l, "ffn.down"), Shape{f, d});
        } else {
            out.emplace_back(names::router(l), Shape{d, c.n_experts});
            for (std::size_t e = 0; e < c.n_experts; ++e) {
                out.emplace_back(names::expert(l, e, "gate"), Shape{d, f});
                out.emplace_back(names::expert(l, e, "up"), Shape{d, f});
                out.emplace_back(names::expert(l, e, "down"), Shape{f, d});
            }
        }
    }
    out.emplace_back("final.norm", Shape{d});
    out.emplace_back("lm_head", Shape{d, c.vocab_size});
    return out;
}

// Closed-form parameter count.
inline std::size_t parameter_count(ModelKind kind, const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.ffn_dim, V = c.vocab_size, S = c.max_seq_len, L = c.n_layers;
    std::size_t n = V * d + S * d + L * (2 * d + 4 * d * d + 3 * d * f) + d + d * V;
    if (kind == ModelKind::moe) n += L * (c.n_experts - 1) * (3 * d * f) + L * d * c.n_experts;
    return n;
}

}  // namespace deltamoe
