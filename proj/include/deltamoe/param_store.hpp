// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "deltamoe/error.hpp"
#include "deltamoe/tensor.hpp"

namespace deltamoe {

// Insertion-ordered map from canonical parameter names to tensors.
template <typename T>
class ParamStore {
public:
    void insert(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
        index_.emplace(name, tensors_.size());
        names_.push_back(name);
        tensors_.push_back(std::move(value));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) { return tensors_[lookup(name)]; }
    const Tensor<T>& at(const std::string& name) const { return tensors_[lookup(name)]; }

    const std::vector<std::string>& names() const noexcept { return names_; }
    std::size_t size() const noexcept { return names_.size(); }

    std::size_t num_elements() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (std::size_t i = 0; i < names_.size(); ++i) out.insert(names_[i], tensors_[i].template cast<U>());
        return out;
    }

    bool bit_equal(const ParamStore& other) const {
        if (names_ != other.names_) return false;
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (!tensors_[i].bit_equal(other.tensors_[i])) return false;
        }
        return true;
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IndexError("unknown parameter: " + name);
        return it->second;
    }

    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace deltamoe
