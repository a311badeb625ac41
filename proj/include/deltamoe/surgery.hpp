// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Parameter deltas and model merges: delta grafting onto an upcycled MoE,
// dense task-arithmetic, and linear averaging for dense and MoE targets.

#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "deltamoe/model.hpp"
#include "deltamoe/moe.hpp"

namespace deltamoe {

// post - base for a pair of dense models. Stored in binary64 so that
// base + delta reproduces a binary32 post model exactly.
struct Delta {
    ModelConfig config;
    ParamStore<double> tensors;
    std::string base_id;
    std::string post_id;

    const std::vector<std::string>& names() const { return tensors.names(); }
};

struct MergeReport {
    std::string strategy;
    std::vector<std::string> shared_names;
    std::vector<std::string> expert_broadcast_names;
    std::vector<std::string> skipped_names;
    std::optional<double> lambda;
    std::string delta_base_id;
    std::string delta_post_id;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["strategy"] = strategy;
        j["shared_names"] = shared_names;
        j["expert_broadcast_names"] = expert_broadcast_names;
        j["skipped_names"] = skipped_names;
        if (lambda) j["lambda"] = *lambda;
        if (!delta_base_id.empty() || !delta_post_id.empty()) {
            j["delta_source"] = {{"base", delta_base_id}, {"post", delta_post_id}};
        }
        return j;
    }
};

template <typename T>
struct MergeResult {
    Model<T> model;
    MergeReport report;
};

namespace detail {

inline std::string join_names(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
    return s;
}

template <typename A, typename B>
void require_same_layout(const ParamStore<A>& a, const ParamStore<B>& b, const char* what) {
    std::vector<std::string> bad;
    std::set<std::string> an(a.names().begin(), a.names().end());
    std::set<std::string> bn(b.names().begin(), b.names().end());
    std::set_symmetric_difference(an.begin(), an.end(), bn.begin(), bn.end(), std::back_inserter(bad));
    for (const auto& n : an) {
        if (bn.count(n) && a.at(n).shape() != b.at(n).shape()) bad.push_back(n + " (shape)");
    }
    if (!bad.empty()) throw IncompatibleError(std::string(what) + ": mismatched tensors: " + join_names(bad));
}

template <typename T>
Tensor<T> plus_delta(const Tensor<T>& theta, const Tensor<double>& delta, const std::string& name) {
    if (theta.shape() != delta.shape()) {
        throw IncompatibleError("delta for '" + name + "' has shape " + shape_str(delta.shape()) + ", target has " +
                                shape_str(theta.shape()));
    }
    Tensor<T> out = theta;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (delta[i] != 0.0) out[i] = static_cast<T>(static_cast<double>(theta[i]) + delta[i]);
    }
    return out;
}

template <typename T>
Tensor<T> lerp(const Tensor<T>& a, const Tensor<T>& b, double lambda) {
    if (lambda == 1.0) return a;
    if (lambda == 0.0) return b;
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(lambda * static_cast<double>(a[i]) + (1.0 - lambda) * static_cast<double>(b[i]));
    }
    return out;
}

// For "layers.{l}.ffn.experts.{e}.{leaf}" returns "layers.{l}.ffn.{leaf}".
inline std::optional<std::string> dense_counterpart_of_expert(const std::string& name) {
    const auto pos = name.find(".ffn.experts.");
    if (pos == std::string::npos) return std::nullopt;
    const auto leaf = name.substr(name.rfind('.') + 1);
    return name.substr(0, pos) + ".ffn." + leaf;
}

inline void require_compatible(const ModelConfig& a, const ModelConfig& b, const char* what) {
    if (!architecture_compatible(a, b)) throw IncompatibleError(std::string(what) + ": architectures differ");
}

}  // namespace detail

template <typename T>
Delta compute_delta(const Model<T>& base, const Model<T>& post, std::string base_id = {}, std::string post_id = {}) {
    if (base.is_moe() || post.is_moe()) throw IncompatibleError("compute_delta: both models must be dense");
    detail::require_compatible(base.config, post.config, "compute_delta");
    detail::require_same_layout(base.params, post.params, "compute_delta");
    Delta d{base.config, {}, std::move(base_id), std::move(post_id)};
    for (const auto& name : base.params.names()) {
        const auto& b = base.params.at(name);
        const auto& p = post.params.at(name);
        Tensor<double> t(b.shape());
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(p[i]) - static_cast<double>(b[i]);
        d.tensors.insert(name, std::move(t));
    }
    return d;
}

// Shared tensors get theta + delta; the single per-layer FFN delta is added to
// every expert (the frozen one included); routers have no counterpart.
template <typename T>
MergeResult<T> graft_delta_moe(const Model<T>& moe, const Delta& delta) {
    if (!moe.is_moe()) throw ArgumentError("graft_delta_moe: target must be an MoE model");
    detail::require_compatible(moe.config, delta.config, "graft_delta_moe");
    MergeResult<T> out{Model<T>{moe.kind, moe.config, {}, moe.frozen}, {}};
    out.report.strategy = "delta_moe";
    out.report.delta_base_id = delta.base_id;
    out.report.delta_post_id = delta.post_id;
    std::set<std::string> used;
    for (const auto& name : moe.params.names()) {
        const auto& theta = moe.params.at(name);
        if (delta.tensors.contains(name)) {
            out.model.params.insert(name, detail::plus_delta(theta, delta.tensors.at(name), name));
            out.report.shared_names.push_back(name);
            used.insert(name);
        } else if (auto dense = detail::dense_counterpart_of_expert(name)) {
            if (!delta.tensors.contains(*dense)) throw IncompatibleError("graft_delta_moe: no delta for " + *dense);
            out.model.params.insert(name, detail::plus_delta(theta, delta.tensors.at(*dense), name));
            out.report.expert_broadcast_names.push_back(name);
            used.insert(*dense);
        } else if (is_router_name(name)) {
            out.model.params.insert(name, theta);
            out.report.skipped_names.push_back(name);
        } else {
            throw IncompatibleError("graft_delta_moe: tensor '" + name + "' has no delta counterpart");
        }
    }
    std::vector<std::string> unused;
    for (const auto& n : delta.names()) {
        if (!used.count(n)) unused.push_back(n);
    }
    if (!unused.empty()) throw IncompatibleError("graft_delta_moe: delta tensors not applied: " + detail::join_names(unused));
    return out;
}

template <typename T>
MergeResult<T> merge_delta_dense(const Model<T>& cpt, const Delta& delta) {
    if (cpt.is_moe()) throw ArgumentError("merge_delta_dense: target must be dense");
    detail::require_compatible(cpt.config, delta.config, "merge_delta_dense");
    detail::require_same_layout(cpt.params, delta.tensors, "merge_delta_dense");
    MergeResult<T> out{Model<T>{cpt.kind, cpt.config, {}, cpt.frozen}, {}};
    out.report.strategy = "delta";
    out.report.delta_base_id = delta.base_id;
    out.report.delta_post_id = delta.post_id;
    for (const auto& name : cpt.params.names()) {
        out.model.params.insert(name, detail::plus_delta(cpt.params.at(name), delta.tensors.at(name), name));
        out.report.shared_names.push_back(name);
    }
    return out;
}

// lambda * a + (1 - lambda) * b, name by name.
template <typename T>
MergeResult<T> merge_avg_dense(const Model<T>& a, const Model<T>& b, double lambda = 0.5) {
    if (a.is_moe() || b.is_moe()) throw ArgumentError("merge_avg_dense: both models must be dense");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("merge_avg_dense: lambda must be in [0, 1]");
    detail::require_compatible(a.config, b.config, "merge_avg_dense");
    detail::require_same_layout(a.params, b.params, "merge_avg_dense");
    MergeResult<T> out{Model<T>{a.kind, a.config, {}, a.frozen}, {}};
    out.report.strategy = "avg";
    out.report.lambda = lambda;
    for (const auto& name : a.params.names()) {
        out.model.params.insert(name, detail::lerp(a.params.at(name), b.params.at(name), lambda));
        out.report.shared_names.push_back(name);
    }
    return out;
}

// Averages every post-CPT MoE tensor 0.5/0.5 with its instruct counterpart;
// each expert pairs with the instruct FFN of its layer; routers are kept.
template <typename T>
MergeResult<T> merge_avg_moe(const Model<T>& moe_cpt, const Model<T>& instruct) {
    if (!moe_cpt.is_moe()) throw ArgumentError("merge_avg_moe: first model must be MoE");
    if (instruct.is_moe()) throw ArgumentError("merge_avg_moe: instruct model must be dense");
    detail::require_compatible(moe_cpt.config, instruct.config, "merge_avg_moe");
    MergeResult<T> out{Model<T>{moe_cpt.kind, moe_cpt.config, {}, moe_cpt.frozen}, {}};
    out.report.strategy = "moe_avg";
    out.report.lambda = 0.5;
    std::set<std::string> used;
    for (const auto& name : moe_cpt.params.names()) {
        const auto& theta = moe_cpt.params.at(name);
        std::string counterpart;
        if (instruct.params.contains(name)) {
            counterpart = name;
            out.report.shared_names.push_back(name);
        } else if (auto dense = detail::dense_counterpart_of_expert(name)) {
            counterpart = *dense;
            out.report.expert_broadcast_names.push_back(name);
        } else if (is_router_name(name)) {
            out.model.params.insert(name, theta);
            out.report.skipped_names.push_back(name);
            continue;
        } else {
            throw IncompatibleError("merge_avg_moe: tensor '" + name + "' has no dense counterpart");
        }
        if (!instruct.params.contains(counterpart)) {
            throw IncompatibleError("merge_avg_moe: instruct model lacks " + counterpart);
        }
        const auto& other = instruct.params.at(counterpart);
        if (other.shape() != theta.shape()) throw IncompatibleError("merge_avg_moe: shape mismatch for " + name);
        out.model.params.insert(name, detail::lerp(theta, other, 0.5));
        used.insert(counterpart);
    }
    std::vector<std::string> unused;
    for (const auto& n : instruct.params.names()) {
        if (!used.count(n)) unused.push_back(n);
    }
    if (!unused.empty()) throw IncompatibleError("merge_avg_moe: instruct tensors unused: " + detail::join_names(unused));
    return out;
}

}  // namespace deltamoe
