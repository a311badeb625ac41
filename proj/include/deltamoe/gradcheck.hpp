// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite differences against tape gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "deltamoe/model.hpp"

namespace deltamoe {

// A scalar loss plus the discrete routing decisions it depended on. Elements
// whose perturbation changes `routing` sit on a top-k tie boundary.
template <typename T>
struct Probe {
    Var loss;
    std::vector<std::uint16_t> routing;
};

template <typename T>
using ProbeFn = std::function<Probe<T>(Tape<T>&, const Bound&)>;

struct GradCheckOptions {
    double eps = 1e-4;
    std::size_t max_samples = 0;  // 0: every element
    std::uint64_t seed = 0;
    double floor = 1e-6;          // denominator floor of the relative error
};

struct GradCheckResult {
    double max_rel_error = 0;
    std::string worst_name;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    std::size_t skipped_ties = 0;
};

// |fd - tape| / max(|fd|, |tape|, floor), maximized over the checked elements
// of `names` (default: all parameters).
template <typename T>
GradCheckResult grad_check(const ProbeFn<T>& fn, ParamStore<T>& params, std::set<std::string> names = {},
                           const GradCheckOptions& opt = {}) {
    if (!(opt.eps > 0.0)) throw ArgumentError("grad_check: eps must be positive");
    if (names.empty()) names.insert(params.names().begin(), params.names().end());

    Tape<T> tape;
    const Bound b = bind_params(tape, params, &names);
    const Probe<T> base = fn(tape, b);
    if (!std::isfinite(static_cast<double>(tape.value(base.loss)[0]))) throw NumericError("grad_check: non-finite loss");
    tape.backward(base.loss);

    std::vector<std::pair<std::string, std::size_t>> elems;
    for (const auto& n : params.names()) {
        if (!names.count(n)) continue;
        for (std::size_t i = 0; i < params.at(n).size(); ++i) elems.emplace_back(n, i);
    }
    if (opt.max_samples && elems.size() > opt.max_samples) {
        std::mt19937_64 g(opt.seed);
        std::shuffle(elems.begin(), elems.end(), g);
    }

    auto eval = [&](std::vector<std::uint16_t>* routing) {
        Tape<T> t(false);
        const Bound bb = bind_params(t, params);
        auto p = fn(t, bb);
        if (routing) *routing = std::move(p.routing);
        return static_cast<double>(t.value(p.loss)[0]);
    };

    GradCheckResult res;
    for (const auto& [name, i] : elems) {
        if (opt.max_samples && res.checked >= opt.max_samples) break;
        auto& x = params.at(name)[i];
        const T saved = x;
        std::vector<std::uint16_t> r_plus, r_minus;
        x = static_cast<T>(saved + opt.eps);
        const double lp = eval(&r_plus);
        x = static_cast<T>(saved - opt.eps);
        const double lm = eval(&r_minus);
        x = saved;
        if (!std::isfinite(lp) || !std::isfinite(lm)) throw NumericError("grad_check: non-finite perturbed loss");
        if (r_plus != base.routing || r_minus != base.routing) {
            ++res.skipped_ties;
            continue;
        }
        const double fd = (lp - lm) / (2.0 * opt.eps);
        const double an = tape.has_grad(b(name)) ? static_cast<double>(tape.grad_ref(b(name))[i]) : 0.0;
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), opt.floor});
        if (res.checked == 0 || rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_name = name;
            res.worst_index = i;
        }
        ++res.checked;
    }
    return res;
}

// Flattened top-k selections of a forward pass, for Probe::routing.
inline std::vector<std::uint16_t> routing_signature(const std::vector<Selection>& sel) {
    std::vector<std::uint16_t> out;
    for (const auto& s : sel) out.insert(out.end(), s.experts.begin(), s.experts.end());
    return out;
}

}  // namespace deltamoe
