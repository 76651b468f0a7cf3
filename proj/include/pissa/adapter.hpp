// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>

#include "pissa/matrix.hpp"
#include "pissa/nf4.hpp"
#include "pissa/random.hpp"
#include "pissa/svd.hpp"

namespace pissa {

/// Trainable low-rank pair; the layer adds scale · a · b to its frozen base.
struct AdapterPair {
    Matrix a;  // m x r
    Matrix b;  // r x n
    Scalar scale = 1;

    AdapterPair() = default;
    AdapterPair(Matrix a_, Matrix b_, Scalar scale_ = 1) : a(std::move(a_)), b(std::move(b_)), scale(scale_) {
        if (a.cols() != b.rows())
            throw ShapeError("adapter rank mismatch: A is " + shape_str(a.rows(), a.cols()) + ", B is " +
                             shape_str(b.rows(), b.cols()));
        if (!(scale > 0)) throw std::invalid_argument("adapter scale must be positive");
    }

    std::size_t rank() const noexcept { return a.cols(); }
    std::size_t in_features() const noexcept { return a.rows(); }
    std::size_t out_features() const noexcept { return b.cols(); }

    /// scale · a · b
    Matrix product() const { return matmul(a, b) * scale; }
};

enum class Origin { pissa, lora, medium, minor, qpissa, loftq, qlora };

inline std::string_view to_string(Origin o) {
    switch (o) {
        case Origin::pissa: return "pissa";
        case Origin::lora: return "lora";
        case Origin::medium: return "medium";
        case Origin::minor: return "minor";
        case Origin::qpissa: return "qpissa";
        case Origin::loftq: return "loftq";
        case Origin::qlora: return "qlora";
    }
    return "unknown";
}

inline Origin parse_origin(std::string_view s) {
    for (Origin o : {Origin::pissa, Origin::lora, Origin::medium, Origin::minor, Origin::qpissa, Origin::loftq,
                     Origin::qlora})
        if (to_string(o) == s) return o;
    throw std::invalid_argument("unknown adapter origin '" + std::string(s) + "'");
}

/// Which singular window seeds the adapter.
enum class InitStrategy { principal, medium, minor, gaussian_zero };

inline std::string_view to_string(InitStrategy s) {
    switch (s) {
        case InitStrategy::principal: return "principal";
        case InitStrategy::medium: return "medium";
        case InitStrategy::minor: return "minor";
        case InitStrategy::gaussian_zero: return "gaussian_zero";
    }
    return "unknown";
}

/// Frozen base (full precision or NF4) plus a trainable adapter.
class DecomposedLayer {
public:
    using Base = std::variant<Matrix, QuantizedMatrix>;

    DecomposedLayer(Base base, AdapterPair adapter, Origin origin)
        : base_(std::move(base)), adapter_(std::move(adapter)), origin_(origin) {
        dense_ = std::visit(
            [](const auto& b) -> Matrix {
                if constexpr (std::is_same_v<std::decay_t<decltype(b)>, Matrix>) return b;
                else return dequantize(b);
            },
            base_);
        if (dense_.rows() != adapter_.in_features() || dense_.cols() != adapter_.out_features())
            throw ShapeError("base " + shape_str(dense_.rows(), dense_.cols()) + " does not match adapter " +
                             shape_str(adapter_.in_features(), adapter_.out_features()));
    }

    const Base& base() const noexcept { return base_; }
    bool quantized() const noexcept { return std::holds_alternative<QuantizedMatrix>(base_); }
    /// The base as a dense matrix (dequantized when stored as NF4).
    const Matrix& dense_base() const noexcept { return dense_; }
    const AdapterPair& adapter() const noexcept { return adapter_; }
    /// Parameter updates go through here; the base stays untouched.
    AdapterPair& mutable_adapter() noexcept { return adapter_; }
    Origin origin() const noexcept { return origin_; }

    std::size_t in_features() const noexcept { return dense_.rows(); }
    std::size_t out_features() const noexcept { return dense_.cols(); }

private:
    Base base_;
    Matrix dense_;
    AdapterPair adapter_;
    Origin origin_;
};

namespace detail {

/// Splits the singular window [begin, begin + r) into A = U√S, B = √S Vᵀ and
/// returns the complementary components as the residual.
inline std::pair<AdapterPair, Matrix> split_window(const Matrix& w, const SvdFactors& f, std::size_t begin,
                                                   std::size_t r) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    Matrix a(m, r);
    Matrix b(r, n);
    for (std::size_t j = 0; j < r; ++j) {
        const Scalar root = std::sqrt(f.s[begin + j]);
        for (std::size_t i = 0; i < m; ++i) a(i, j) = f.u(i, begin + j) * root;
        for (std::size_t i = 0; i < n; ++i) b(j, i) = root * f.v(i, begin + j);
    }
    Matrix residual(m, n);
    for (std::size_t c = 0; c < f.rank(); ++c) {
        if (c >= begin && c < begin + r) continue;
        const Scalar sigma = f.s[c];
        if (sigma == 0) continue;
        for (std::size_t i = 0; i < m; ++i) {
            const Scalar us = f.u(i, c) * sigma;
            if (us == 0) continue;
            Scalar* row = residual.row(i).data();
            for (std::size_t j = 0; j < n; ++j) row[j] += us * f.v(j, c);
        }
    }
    return {AdapterPair(std::move(a), std::move(b)), std::move(residual)};
}

/// First singular index of the window each strategy selects out of k.
inline std::size_t window_begin(InitStrategy strategy, std::size_t k, std::size_t r) {
    switch (strategy) {
        case InitStrategy::principal: return 0;
        case InitStrategy::medium: return (k - r) / 2;
        case InitStrategy::minor: return k - r;
        case InitStrategy::gaussian_zero: break;
    }
    throw std::invalid_argument("window_begin: strategy has no singular window");
}

inline Origin origin_of(InitStrategy s) {
    switch (s) {
        case InitStrategy::principal: return Origin::pissa;
        case InitStrategy::medium: return Origin::medium;
        case InitStrategy::minor: return Origin::minor;
        case InitStrategy::gaussian_zero: return Origin::lora;
    }
    return Origin::lora;
}

}  // namespace detail

/// Adapter from a precomputed factorization, using the singular window of `strategy`.
inline DecomposedLayer variant_init_from(const Matrix& w, const SvdFactors& f, std::size_t r, InitStrategy strategy) {
    check_rank(w, r, "variant_init");
    if (r > f.rank()) throw ShapeError("variant_init: factorization has fewer than r triplets");
    auto [adapter, residual] = detail::split_window(w, f, detail::window_begin(strategy, f.rank(), r), r);
    return {std::move(residual), std::move(adapter), detail::origin_of(strategy)};
}

/// Adapter seeded with the principal, medium or minor singular window of w; the
/// remaining components form the frozen residual.
inline DecomposedLayer variant_init(const Matrix& w, std::size_t r, InitStrategy strategy) {
    check_rank(w, r, "variant_init");
    if (strategy == InitStrategy::gaussian_zero)
        throw std::invalid_argument("variant_init: gaussian_zero has no singular window, use lora_init");
    return variant_init_from(w, exact_svd(w), r, strategy);
}

/// A = U[:, :r]·√S, B = √S·V[:, :r]ᵀ, base = W^res.
inline DecomposedLayer pissa_init(const Matrix& w, std::size_t r) {
    return variant_init(w, r, InitStrategy::principal);
}

/// PiSSA with the randomized SVD; the residual is w - A·B since the fast
/// factorization does not return the tail components.
inline DecomposedLayer pissa_init_fast(const Matrix& w, std::size_t r, std::size_t niter, RandomSource& rng) {
    const SvdFactors f = randomized_svd(w, r, niter, rng);
    auto [adapter, unused] = detail::split_window(w, f, 0, r);
    Matrix residual = w - adapter.product();
    return {std::move(residual), std::move(adapter), Origin::pissa};
}

/// Default standard deviation of LoRA's Gaussian A entries: sqrt(1/r).
inline Scalar lora_default_stddev(std::size_t r) { return 1.0 / std::sqrt(static_cast<Scalar>(r)); }

/// A ~ N(0, stddev²), B = 0, base = w.
inline DecomposedLayer lora_init(const Matrix& w, std::size_t r, RandomSource& rng,
                                 std::optional<Scalar> stddev = std::nullopt) {
    check_rank(w, r, "lora_init");
    Matrix a = rng.normal_matrix(w.rows(), r, stddev.value_or(lora_default_stddev(r)));
    return {w, AdapterPair(std::move(a), Matrix(r, w.cols())), Origin::lora};
}

/// x · dense(base) + scale · (x · A) · B
inline Matrix forward(const DecomposedLayer& layer, const Matrix& x) {
    if (x.cols() != layer.in_features())
        throw ShapeError("forward: input " + shape_str(x.rows(), x.cols()) + " against layer with " +
                         std::to_string(layer.in_features()) + " inputs");
    Matrix y = matmul(x, layer.dense_base());
    const auto& ad = layer.adapter();
    y += matmul(matmul(x, ad.a), ad.b) * ad.scale;
    return y;
}

struct AdapterGradients {
    Matrix da;  // m x r
    Matrix db;  // r x n
};

/// Gradients of the loss with respect to A and B given dL/dY for Y = X·base + scale·X·A·B.
inline AdapterGradients adapter_gradients(const Matrix& x, const Matrix& dy, const AdapterPair& adapter) {
    if (x.rows() != dy.rows() || x.cols() != adapter.in_features() || dy.cols() != adapter.out_features())
        throw ShapeError("adapter_gradients: X " + shape_str(x.rows(), x.cols()) + ", dY " +
                         shape_str(dy.rows(), dy.cols()) + ", adapter " +
                         shape_str(adapter.in_features(), adapter.out_features()));
    const Matrix xt_dy = matmul_tn(x, dy);  // m x n
    Matrix da = matmul_nt(xt_dy, adapter.b) * adapter.scale;
    Matrix db = matmul_tn(adapter.a, xt_dy) * adapter.scale;
    return {std::move(da), std::move(db)};
}

/// dense(base) + scale · A · B
inline Matrix merge(const DecomposedLayer& layer) { return layer.dense_base() + layer.adapter().product(); }

/// ‖w - merge(layer)‖_F / max(1, ‖w‖_F)
inline Scalar reconstruction_error(const Matrix& w, const DecomposedLayer& layer) {
    w.require_same_shape(layer.dense_base(), "reconstruction_error");
    return relative_error(w, merge(layer));
}

/// Re-expresses a trained adapter as an update to the original weight:
/// ΔA = [A' A], ΔB = [B'; -B], so W + ΔA·ΔB = W^res + A'·B'.
/// The returned pair carries the common scale of both inputs.
inline AdapterPair to_lora_delta(const AdapterPair& initial, const AdapterPair& trained) {
    initial.a.require_same_shape(trained.a, "to_lora_delta (A)");
    initial.b.require_same_shape(trained.b, "to_lora_delta (B)");
    if (initial.scale != trained.scale) throw std::invalid_argument("to_lora_delta: adapters use different scales");
    return AdapterPair(hconcat(trained.a, initial.a), vconcat(trained.b, -initial.b), trained.scale);
}

}  // namespace pissa
