// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Raw compute kernels. Matrix products go through CBLAS (OpenBLAS); with a
// fixed thread count the results are bit-reproducible on a given machine.

#pragma once

#include <cblas.h>

#include <cmath>
#include <cstddef>
#include <type_traits>

namespace deltamoe::kernels {

inline void set_num_threads(int n) {
#ifdef OPENBLAS_VERSION
    openblas_set_num_threads(n < 1 ? 1 : n);
#else
    (void)n;
#endif
}

// C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
    } else {
        static_assert(std::is_same_v<T, double>, "gemm supports float and double");
        cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                    static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
    }
}

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// In-place max-subtracted softmax over one row.
template <typename T>
void softmax_row(T* row, std::size_t n) {
    T mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = row[j] > mx ? row[j] : mx;
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace deltamoe::kernels
