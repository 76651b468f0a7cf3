// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "pissa/matrix.hpp"
#include "pissa/qr.hpp"
#include "pissa/random.hpp"

namespace pissa {

/// Economy (or truncated) SVD: w ≈ u · diag(s) · vᵀ with s non-increasing.
struct SvdFactors {
    Matrix u;               // m x k
    std::vector<Scalar> s;  // k values, descending, >= 0
    Matrix v;               // n x k

    std::size_t rank() const noexcept { return s.size(); }

    Matrix reconstruct() const {
        Matrix us = u;
        for (std::size_t i = 0; i < us.rows(); ++i)
            for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s[j];
        return matmul_nt(us, v);
    }
};

struct JacobiOptions {
    Scalar tolerance = 1e-12;  // on |cos| between column pairs
    int max_sweeps = 60;
};

namespace detail {

/// One-sided Jacobi on the rows of `g` (n rows of length m, the columns of the input).
/// Optionally accumulates the rotations into `vt` (n x n, row j = column j of V).
inline void jacobi_orthogonalize(Matrix& g, Matrix* vt, const JacobiOptions& opt) {
    const std::size_t n = g.rows();
    const std::size_t m = g.cols();
    auto dot = [m](const Scalar* x, const Scalar* y) {
        Scalar s = 0;
        for (std::size_t i = 0; i < m; ++i) s += x[i] * y[i];
        return s;
    };
    auto rotate = [](Scalar* x, Scalar* y, std::size_t len, Scalar c, Scalar s) {
        for (std::size_t i = 0; i < len; ++i) {
            const Scalar xi = x[i];
            const Scalar yi = y[i];
            x[i] = c * xi - s * yi;
            y[i] = s * xi + c * yi;
        }
    };

    // Columns below this squared norm are rounding residue of a null direction
    // and are left alone; their cosine with anything is meaningless.
    Scalar total = 0;
    for (std::size_t j = 0; j < n; ++j) total += dot(g.row(j).data(), g.row(j).data());
    const Scalar floor_eps = static_cast<Scalar>(m) * std::numeric_limits<Scalar>::epsilon();
    const Scalar negligible = total * floor_eps * floor_eps;

    std::vector<Scalar> norms(n);
    Scalar worst = 0;
    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
        // squared norms are refreshed each sweep and updated in closed form within it
        for (std::size_t j = 0; j < n; ++j) norms[j] = dot(g.row(j).data(), g.row(j).data());
        bool rotated = false;
        worst = 0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const Scalar alpha = norms[p];
                const Scalar beta = norms[q];
                if (alpha <= negligible || beta <= negligible) continue;
                Scalar* gp = g.row(p).data();
                Scalar* gq = g.row(q).data();
                const Scalar gamma = dot(gp, gq);
                const Scalar cosine = std::abs(gamma) / std::sqrt(alpha * beta);
                worst = std::max(worst, cosine);
                if (cosine <= opt.tolerance) continue;
                rotated = true;
                const Scalar zeta = (beta - alpha) / (2 * gamma);
                const Scalar t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1 + zeta * zeta));
                const Scalar c = 1 / std::sqrt(1 + t * t);
                const Scalar s = c * t;
                rotate(gp, gq, m, c, s);
                if (vt) rotate(vt->row(p).data(), vt->row(q).data(), n, c, s);
                norms[p] = std::max(Scalar{0}, alpha - t * gamma);
                norms[q] = std::max(Scalar{0}, beta + t * gamma);
            }
        }
        if (!rotated) return;
    }
    throw NumericalError("exact_svd: Jacobi did not converge in " + std::to_string(opt.max_sweeps) +
                         " sweeps, largest off-diagonal cosine " + std::to_string(worst));
}

/// Descending order by value, ties kept in original index order.
inline std::vector<std::size_t> descending_order(const std::vector<Scalar>& s) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    return idx;
}

/// Makes the largest-magnitude entry of each u column non-negative, mirroring the flip on v.
inline void canonicalize_signs(Matrix& u, Matrix& v) {
    for (std::size_t j = 0; j < u.cols(); ++j) {
        std::size_t arg = 0;
        Scalar best = -1;
        for (std::size_t i = 0; i < u.rows(); ++i) {
            if (std::abs(u(i, j)) > best) {
                best = std::abs(u(i, j));
                arg = i;
            }
        }
        if (u(arg, j) < 0) {
            for (std::size_t i = 0; i < u.rows(); ++i) u(i, j) = -u(i, j);
            for (std::size_t i = 0; i < v.rows(); ++i) v(i, j) = -v(i, j);
        }
    }
}

/// Exact SVD for m >= n.
inline SvdFactors jacobi_svd_tall(const Matrix& w, const JacobiOptions& opt) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    Matrix g = w.transpose();
    Matrix vt = Matrix::identity(n);
    jacobi_orthogonalize(g, &vt, opt);

    std::vector<Scalar> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        Scalar ss = 0;
        for (Scalar x : g.row(j)) ss += x * x;
        norms[j] = std::sqrt(ss);
    }
    const auto order = descending_order(norms);
    const Scalar smax = norms[order[0]];
    const Scalar negligible = smax * static_cast<Scalar>(m) * std::numeric_limits<Scalar>::epsilon();

    SvdFactors out{Matrix(m, n), std::vector<Scalar>(n), Matrix(n, n)};
    std::size_t next_basis = 0;
    std::vector<Scalar> col(m);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        const Scalar sigma = norms[j];
        out.s[k] = sigma;
        for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vt(j, i);

        if (sigma > negligible) {
            for (std::size_t i = 0; i < m; ++i) out.u(i, k) = g(j, i) / sigma;
            continue;
        }
        // Null-space direction: the normalized column is noise, so complete U
        // with a unit vector orthogonal to the columns already placed.
        for (;;) {
            std::fill(col.begin(), col.end(), 0.0);
            if (next_basis < m) col[next_basis++] = 1;
            else throw NumericalError("exact_svd: could not complete orthonormal basis");
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t c = 0; c < k; ++c) {
                    Scalar d = 0;
                    for (std::size_t i = 0; i < m; ++i) d += out.u(i, c) * col[i];
                    for (std::size_t i = 0; i < m; ++i) col[i] -= d * out.u(i, c);
                }
            }
            Scalar nn = 0;
            for (Scalar x : col) nn += x * x;
            nn = std::sqrt(nn);
            if (nn > 0.5) {
                for (std::size_t i = 0; i < m; ++i) out.u(i, k) = col[i] / nn;
                break;
            }
        }
    }
    canonicalize_signs(out.u, out.v);
    return out;
}

}  // namespace detail

/// Full economy SVD via one-sided Jacobi; k = min(m, n).
inline SvdFactors exact_svd(const Matrix& w, const JacobiOptions& opt = {}) {
    if (!w.all_finite()) throw NumericalError("exact_svd: input has non-finite entries");
    if (w.rows() >= w.cols()) return detail::jacobi_svd_tall(w, opt);
    SvdFactors t = detail::jacobi_svd_tall(w.transpose(), opt);
    SvdFactors out{std::move(t.v), std::move(t.s), std::move(t.u)};
    detail::canonicalize_signs(out.u, out.v);
    return out;
}

/// Singular values only, descending.
inline std::vector<Scalar> singular_values(const Matrix& w, const JacobiOptions& opt = {}) {
    if (!w.all_finite()) throw NumericalError("singular_values: input has non-finite entries");
    Matrix g = w.rows() >= w.cols() ? w.transpose() : w;
    detail::jacobi_orthogonalize(g, nullptr, opt);
    std::vector<Scalar> s(g.rows());
    for (std::size_t j = 0; j < g.rows(); ++j) {
        Scalar ss = 0;
        for (Scalar x : g.row(j)) ss += x * x;
        s[j] = std::sqrt(ss);
    }
    std::stable_sort(s.begin(), s.end(), std::greater<>{});
    return s;
}

/// Sum of singular values.
inline Scalar nuclear_norm(const Matrix& m) {
    const auto s = singular_values(m);
    return std::accumulate(s.begin(), s.end(), Scalar{0});
}

/// Keeps the leading r triplets.
inline SvdFactors truncate(const SvdFactors& f, std::size_t r) {
    if (r == 0 || r > f.rank()) throw ShapeError("truncate: rank " + std::to_string(r) + " out of range");
    return {f.u.col_range(0, r), std::vector<Scalar>(f.s.begin(), f.s.begin() + static_cast<std::ptrdiff_t>(r)),
            f.v.col_range(0, r)};
}

inline void check_rank(const Matrix& w, std::size_t r, const char* who) {
    const std::size_t k = std::min(w.rows(), w.cols());
    if (r < 1 || r > k)
        throw ShapeError(std::string(who) + ": rank " + std::to_string(r) + " outside [1, " + std::to_string(k) + "]");
}

struct RandomizedSvdOptions {
    std::size_t oversampling = 10;
};

/// Halko-Martinsson-Tropp randomized range finder with `niter` rounds of
/// re-orthonormalized subspace iteration, followed by an exact SVD of the
/// small projected matrix. Returns the leading r triplets.
inline SvdFactors randomized_svd(const Matrix& w, std::size_t r, std::size_t niter, RandomSource& rng,
                                 const RandomizedSvdOptions& opt = {}) {
    check_rank(w, r, "randomized_svd");
    const std::size_t k = std::min(r + opt.oversampling, std::min(w.rows(), w.cols()));

    const Matrix omega = rng.normal_matrix(w.cols(), k);
    Matrix q = qr_thin(matmul(w, omega)).q;
    for (std::size_t it = 0; it < niter; ++it) {
        const Matrix z = qr_thin(matmul_tn(w, q)).q;
        q = qr_thin(matmul(w, z)).q;
    }
    const Matrix projected = matmul_tn(q, w);  // k x n
    SvdFactors small = exact_svd(projected);
    SvdFactors out{matmul(q, small.u), std::move(small.s), std::move(small.v)};
    detail::canonicalize_signs(out.u, out.v);
    return truncate(out, r);
}

}  // namespace pissa
