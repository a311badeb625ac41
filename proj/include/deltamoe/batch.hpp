// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "deltamoe/tensor.hpp"

namespace deltamoe {

// rows x seq token matrix. mask[r*seq + t] == 1 marks token t as a loss target
// (predicted from positions < t); it is 0 on padding and on prompt spans.
struct Batch {
    std::size_t rows = 0;
    std::size_t seq = 0;
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> mask;
    std::vector<std::string> tags;

    TokenId token(std::size_t r, std::size_t t) const { return tokens[r * seq + t]; }
    bool target(std::size_t r, std::size_t t) const { return mask[r * seq + t] != 0; }
};

}  // namespace deltamoe
