// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>

#include "deltamoe/error.hpp"
#include "deltamoe/tensor.hpp"

namespace deltamoe {

// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

// Reverse-mode gradient tape. Ops are appended in execution order; backward()
// replays their adjoints in reverse, visiting each recorded op once. One tape
// belongs to one training step and is not shared between threads.
template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&, Var)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        if (!value.all_finite()) throw NumericError("leaf: non-finite input value");
        nodes_.push_back(Node{"leaf", std::move(value), {}, grad_enabled_ && requires_grad, false, {}});
        return Var{nodes_.size() - 1};
    }

    Var record(std::string_view op, Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
        if (!value.all_finite()) {
            throw NumericError(std::string(op) + ": produced NaN or Inf");
        }
        bool needs = false;
        if (grad_enabled_) {
            for (Var v : inputs) needs = needs || node(v).requires_grad;
        }
        nodes_.push_back(Node{op, std::move(value), {}, needs, true, needs ? std::move(backward) : Backward{}});
        return Var{nodes_.size() - 1};
    }

    const Tensor<T>& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    std::string_view op_name(Var v) const { return node(v).op; }

    bool has_grad(Var v) const { return !node(v).grad.empty(); }

    // Gradient of the last backward() w.r.t. v; zeros if v never received one.
    Tensor<T> grad(Var v) const {
        const auto& n = node(v);
        return n.grad.empty() ? Tensor<T>::zeros(n.value.shape()) : n.grad;
    }

    const Tensor<T>& grad_ref(Var v) const { return node(v).grad; }

    // Accumulation buffer for v's gradient, zero-initialised on first use.
    Tensor<T>& grad_buffer(Var v) {
        auto& n = node(v);
        if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    void backward(Var loss) {
        if (!grad_enabled_) throw ArgumentError("backward on a tape with gradients disabled");
        auto& l = node(loss);
        if (l.value.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(l.value.shape()));
        for (auto& n : nodes_) n.grad = Tensor<T>{};
        visits_ = 0;
        if (!l.requires_grad) return;
        grad_buffer(loss)[0] = T(1);
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            auto& n = nodes_[id];
            if (!n.is_op) continue;
            ++visits_;
            if (n.requires_grad && !n.grad.empty() && n.backward) n.backward(*this, Var{id});
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    std::size_t num_ops() const noexcept {
        std::size_t c = 0;
        for (const auto& n : nodes_) c += n.is_op ? 1 : 0;
        return c;
    }

    std::size_t backward_visits() const noexcept { return visits_; }

private:
    struct Node {
        std::string_view op;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        bool is_op = false;
        Backward backward;
    };

    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw IndexError("invalid tape variable");
        return nodes_[v.id];
    }
    Node& node(Var v) {
        if (v.id >= nodes_.size()) throw IndexError("invalid tape variable");
        return nodes_[v.id];
    }

    bool grad_enabled_;
    std::deque<Node> nodes_;
    std::size_t visits_ = 0;
};

}  // namespace deltamoe
