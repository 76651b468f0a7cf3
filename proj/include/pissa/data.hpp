// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <vector>

#include "pissa/matrix.hpp"
#include "pissa/qr.hpp"
#include "pissa/random.hpp"
#include "pissa/train.hpp"

namespace pissa {

/// W = U·diag(σ)·Vᵀ with Haar-like orthonormal U, V (QR of Gaussian matrices)
/// and σ_i = i^-alpha for i = 1..min(m, n).
inline Matrix generate_spectral_matrix(std::size_t m, std::size_t n, Scalar alpha, std::uint64_t seed) {
    if (!(alpha >= 0)) throw std::invalid_argument("spectrum exponent alpha must be >= 0");
    const std::size_t k = std::min(m, n);
    RandomSource rng(seed);
    Matrix u = qr_thin(rng.normal_matrix(m, k)).q;
    const Matrix v = qr_thin(rng.normal_matrix(n, k)).q;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) u(i, j) *= std::pow(static_cast<Scalar>(j + 1), -alpha);
    return matmul_nt(u, v);
}

/// Gaussian clusters around centroid_scale · e_c (class c on coordinate c mod dim).
inline Dataset generate_cluster_dataset(std::size_t classes, std::size_t dim, std::size_t per_class, Scalar noise_std,
                                        std::uint64_t seed, Scalar centroid_scale = 3.0) {
    if (classes < 2) throw std::invalid_argument("cluster dataset needs at least 2 classes");
    if (dim == 0 || per_class == 0) throw std::invalid_argument("cluster dataset needs dim >= 1 and per_class >= 1");
    if (!(noise_std >= 0)) throw std::invalid_argument("noise_std must be >= 0");
    RandomSource rng(seed);
    Matrix x(classes * per_class, dim);
    std::vector<int> y(classes * per_class);
    std::size_t row = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t k = 0; k < per_class; ++k, ++row) {
            for (std::size_t j = 0; j < dim; ++j) x(row, j) = noise_std * rng.normal();
            x(row, c % dim) += centroid_scale;
            y[row] = static_cast<int>(c);
        }
    }
    return {std::move(x), std::move(y), classes};
}

inline std::set<int> odd_classes(std::size_t classes) {
    std::set<int> s;
    for (std::size_t c = 1; c < classes; c += 2) s.insert(static_cast<int>(c));
    return s;
}

inline std::set<int> even_classes(std::size_t classes) {
    std::set<int> s;
    for (std::size_t c = 0; c < classes; c += 2) s.insert(static_cast<int>(c));
    return s;
}

}  // namespace pissa
