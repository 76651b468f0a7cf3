// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "pissa/matrix.hpp"

namespace pissa {

struct QrFactors {
    Matrix q;  // m x n, orthonormal columns
    Matrix r;  // n x n, upper triangular, non-negative diagonal
};

/// Thin Householder QR of an m x n matrix with m >= n.
///
/// A column whose sub-diagonal part is exactly zero gets the identity reflector,
/// so rank-deficient input still yields a full orthonormal Q. Signs are normalized
/// so that diag(R) >= 0.
inline QrFactors qr_thin(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    if (m < n) throw ShapeError("qr_thin requires rows >= cols, got " + shape_str(m, n));

    // Work on the transpose so that each column of `a` is a contiguous row.
    Matrix cols = a.transpose();
    Matrix reflectors(n, m);  // row j holds v_j, supported on [j, m)
    std::vector<bool> active(n, false);

    for (std::size_t j = 0; j < n; ++j) {
        auto x = cols.row(j);
        Scalar norm_sq = 0;
        for (std::size_t i = j; i < m; ++i) norm_sq += x[i] * x[i];
        if (norm_sq == 0) continue;
        const Scalar norm = std::sqrt(norm_sq);
        const Scalar alpha = x[j] >= 0 ? -norm : norm;

        auto v = reflectors.row(j);
        for (std::size_t i = j; i < m; ++i) v[i] = x[i];
        v[j] -= alpha;
        Scalar v_norm_sq = 0;
        for (std::size_t i = j; i < m; ++i) v_norm_sq += v[i] * v[i];
        if (v_norm_sq == 0) continue;
        const Scalar inv = 1.0 / std::sqrt(v_norm_sq);
        for (std::size_t i = j; i < m; ++i) v[i] *= inv;
        active[j] = true;

        // H = I - 2 v v^T applied to the remaining columns
        for (std::size_t c = j; c < n; ++c) {
            auto col = cols.row(c);
            Scalar dot = 0;
            for (std::size_t i = j; i < m; ++i) dot += v[i] * col[i];
            dot *= 2;
            for (std::size_t i = j; i < m; ++i) col[i] -= dot * v[i];
        }
    }

    Matrix r(n, n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i <= j; ++i) r(i, j) = cols(j, i);

    // Q^T accumulated row-wise: start from [I_n 0] and apply reflectors in reverse.
    Matrix qt(n, m);
    for (std::size_t j = 0; j < n; ++j) qt(j, j) = 1;
    for (std::size_t jj = n; jj-- > 0;) {
        if (!active[jj]) continue;
        auto v = reflectors.row(jj);
        for (std::size_t c = 0; c < n; ++c) {
            auto col = qt.row(c);
            Scalar dot = 0;
            for (std::size_t i = jj; i < m; ++i) dot += v[i] * col[i];
            dot *= 2;
            for (std::size_t i = jj; i < m; ++i) col[i] -= dot * v[i];
        }
    }

    for (std::size_t j = 0; j < n; ++j) {
        if (r(j, j) < 0) {
            for (std::size_t c = j; c < n; ++c) r(j, c) = -r(j, c);
            for (Scalar& v : qt.row(j)) v = -v;
        }
    }
    return {qt.transpose(), std::move(r)};
}

}  // namespace pissa
