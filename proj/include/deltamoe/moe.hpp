// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Dense -> MoE upcycling and the trainable-set bookkeeping around it.

#pragma once

#include <set>
#include <string>

#include "deltamoe/model.hpp"

namespace deltamoe {

using TrainableSet = std::set<std::string>;

// Every FFN becomes N identical experts plus a zero router. Expert 0 and all
// tensors inherited from the dense model are frozen.
template <typename T>
Model<T> upcycle(const Model<T>& dense, std::size_t n_experts, std::size_t top_k) {
    if (dense.kind != ModelKind::dense) throw ArgumentError("upcycle: source must be a dense model");
    if (n_experts < 2) throw ArgumentError("upcycle: need at least 2 experts, got " + std::to_string(n_experts));
    if (top_k < 1 || top_k > n_experts) throw ArgumentError("upcycle: top_k must be in [1, N]");
    Model<T> m;
    m.kind = ModelKind::moe;
    m.config = dense.config;
    m.config.n_experts = n_experts;
    m.config.top_k = top_k;
    for (auto& [name, shape] : canonical_layout(ModelKind::moe, m.config)) {
        if (dense.params.contains(name)) {
            m.params.insert(name, dense.params.at(name));
            m.frozen.insert(name);
            continue;
        }
        // layers.{l}.ffn.router or layers.{l}.ffn.experts.{e}.{leaf}
        const auto ffn = name.find(".ffn.");
        const std::string prefix = name.substr(0, ffn);
        const std::string rest = name.substr(ffn + 5);
        if (rest == "router") {
            m.params.insert(name, Tensor<T>::zeros(shape));
            continue;
        }
        const auto dot = rest.rfind('.');
        const std::string leaf = rest.substr(dot + 1);
        const std::string expert_id = rest.substr(8, dot - 8);  // after "experts."
        m.params.insert(name, dense.params.at(prefix + ".ffn." + leaf));
        if (expert_id == "0") m.frozen.insert(name);
    }
    return m;
}

enum class Stage { pretrain, posttrain, cpt, router_tune };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::posttrain: return "posttrain";
        case Stage::cpt: return "cpt";
        case Stage::router_tune: return "router_tune";
    }
    return "?";
}

inline Stage parse_stage(const std::string& s) {
    if (s == "pretrain") return Stage::pretrain;
    if (s == "posttrain") return Stage::posttrain;
    if (s == "cpt") return Stage::cpt;
    if (s == "router_tune" || s == "router-tune") return Stage::router_tune;
    throw ArgumentError("unknown stage: " + s);
}

inline bool is_router_name(const std::string& name) {
    return name.size() > 11 && name.compare(name.size() - 11, 11, ".ffn.router") == 0;
}

// Dense stages train everything. MoE cpt trains every non-frozen tensor (the
// expansion experts and routers); router_tune trains routers only. Dense CPT
// (the baselines) trains everything.
template <typename T>
TrainableSet trainable_set(const Model<T>& model, Stage stage) {
    TrainableSet out;
    if (!model.is_moe()) {
        if (stage == Stage::router_tune) throw ArgumentError("router_tune requires an MoE model");
        for (const auto& n : model.params.names()) out.insert(n);
        return out;
    }
    switch (stage) {
        case Stage::cpt:
            for (const auto& n : model.params.names()) {
                if (!model.is_frozen(n)) out.insert(n);
            }
            break;
        case Stage::router_tune:
            for (const auto& n : model.params.names()) {
                if (is_router_name(n)) out.insert(n);
            }
            break;
        default:
            throw ArgumentError(std::string("stage ") + stage_name(stage) + " requires a dense model");
    }
    return out;
}

}  // namespace deltamoe
