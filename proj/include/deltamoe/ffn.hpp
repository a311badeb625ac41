// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deltamoe/ops.hpp"

namespace deltamoe {

// SwiGLU block: (SiLU(x*gate) (.) (x*up)) * down.
template <typename T>
Var ffn_forward(Tape<T>& tape, Var x, Var gate, Var up, Var down) {
    const auto& X = tape.value(x);
    const auto& G = tape.value(gate);
    const auto& U = tape.value(up);
    const auto& D = tape.value(down);
    if (G.rank() != 2 || U.shape() != G.shape() || D.rank() != 2 || D.dim(0) != G.dim(1) || D.dim(1) != G.dim(0) ||
        X.rank() != 2 || X.dim(1) != G.dim(0)) {
        throw ShapeError("ffn_forward: expected x[Txd], gate/up[dxf], down[fxd]; got x" + shape_str(X.shape()) +
                         " gate" + shape_str(G.shape()) + " up" + shape_str(U.shape()) + " down" +
                         shape_str(D.shape()));
    }
    Var h = mul(tape, silu(tape, matmul(tape, x, gate)), matmul(tape, x, up));
    return matmul(tape, h, down);
}

}  // namespace deltamoe
