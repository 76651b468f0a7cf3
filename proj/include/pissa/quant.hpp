// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "pissa/adapter.hpp"
#include "pissa/nf4.hpp"
#include "pissa/svd.hpp"

namespace pissa {

/// ‖w - (dense(base) + scale·A·B)‖_*
inline Scalar quantization_error_nuclear(const Matrix& w, const DecomposedLayer& layer) {
    return nuclear_norm(w - merge(layer));
}

/// ‖w - (dense(base) + scale·A·B)‖_F
inline Scalar quantization_error_frobenius(const Matrix& w, const DecomposedLayer& layer) {
    return frobenius_norm(w - merge(layer));
}

/// ‖w - nf4(w)‖_*
inline Scalar qlora_error(const Matrix& w, const QuantConfig& cfg = {}) {
    return nuclear_norm(w - dequantize(quantize(w, cfg)));
}

/// Quantized w with LoRA's Gaussian/zero adapter; the adapter contributes nothing at init.
inline DecomposedLayer qlora_init(const Matrix& w, std::size_t r, RandomSource& rng, const QuantConfig& cfg = {}) {
    check_rank(w, r, "qlora_init");
    Matrix a = rng.normal_matrix(w.rows(), r, lora_default_stddev(r));
    return {quantize(w, cfg), AdapterPair(std::move(a), Matrix(r, w.cols())), Origin::qlora};
}

/// Called after every alternating round t = 1..T with the layer as it stands.
using IterationObserver = std::function<void(std::size_t t, const DecomposedLayer& layer)>;

namespace detail {
inline void check_iterations(std::size_t iters, const char* who) {
    if (iters < 1) throw std::invalid_argument(std::string(who) + ": iteration count T must be >= 1");
}

inline AdapterPair principal_pair(const Matrix& target, std::size_t r) {
    return split_window(target, exact_svd(target), 0, r).first;
}
}  // namespace detail

/// QPiSSA with T alternating rounds. Round 1 takes the principal adapter of w and
/// quantizes the residual; each later round refits the adapter to w - nf4(W^res)
/// and re-quantizes w - A·B.
inline DecomposedLayer qpissa_init(const Matrix& w, std::size_t r, std::size_t iters, const QuantConfig& cfg = {},
                                   const IterationObserver& observe = {}) {
    check_rank(w, r, "qpissa_init");
    detail::check_iterations(iters, "qpissa_init");
    AdapterPair adapter = detail::principal_pair(w, r);
    QuantizedMatrix base = quantize(w - adapter.product(), cfg);
    if (observe) observe(1, DecomposedLayer(base, adapter, Origin::qpissa));
    for (std::size_t t = 2; t <= iters; ++t) {
        adapter = detail::principal_pair(w - dequantize(base), r);
        base = quantize(w - adapter.product(), cfg);
        if (observe) observe(t, DecomposedLayer(base, adapter, Origin::qpissa));
    }
    return {std::move(base), std::move(adapter), Origin::qpissa};
}

/// LoftQ with T alternating rounds, starting from a zero adapter: quantize
/// w - A·B, then fit A·B to the rank-r truncation of w - nf4(·).
inline DecomposedLayer loftq_init(const Matrix& w, std::size_t r, std::size_t iters, const QuantConfig& cfg = {},
                                  const IterationObserver& observe = {}) {
    check_rank(w, r, "loftq_init");
    detail::check_iterations(iters, "loftq_init");
    QuantizedMatrix base = quantize(w, cfg);
    AdapterPair adapter = detail::principal_pair(w - dequantize(base), r);
    if (observe) observe(1, DecomposedLayer(base, adapter, Origin::loftq));
    for (std::size_t t = 2; t <= iters; ++t) {
        base = quantize(w - adapter.product(), cfg);
        adapter = detail::principal_pair(w - dequantize(base), r);
        if (observe) observe(t, DecomposedLayer(base, adapter, Origin::loftq));
    }
    return {std::move(base), std::move(adapter), Origin::loftq};
}

/// (1 - ‖w - merge(layer)‖_* / ‖w - nf4(w)‖_*) · 100; empty when direct
/// quantization is already lossless.
inline std::optional<Scalar> error_reduction_ratio(const Matrix& w, const DecomposedLayer& layer,
                                                   const QuantConfig& cfg = {}) {
    const Scalar baseline = qlora_error(w, cfg);
    if (baseline == 0) return std::nullopt;
    return (1 - quantization_error_nuclear(w, layer) / baseline) * 100;
}

struct QuantReport {
    std::string method;  // qlora | loftq | qpissa
    std::size_t rank = 0;
    std::size_t iters = 0;
    Scalar nuclear_error = 0;
    Scalar frobenius_error = 0;
    std::optional<Scalar> reduction_ratio_percent;
};

inline QuantReport make_quant_report(const Matrix& w, const DecomposedLayer& layer, std::size_t iters,
                                     const QuantConfig& cfg = {}) {
    QuantReport rep;
    rep.method = std::string(to_string(layer.origin()));
    rep.rank = layer.adapter().rank();
    rep.iters = iters;
    rep.nuclear_error = quantization_error_nuclear(w, layer);
    rep.frobenius_error = quantization_error_frobenius(w, layer);
    const Scalar baseline = qlora_error(w, cfg);
    if (baseline != 0) rep.reduction_ratio_percent = (1 - rep.nuclear_error / baseline) * 100;
    return rep;
}

struct DistributionFit {
    Scalar gaussian_std = 0;
    Scalar student_t_dof = 0;  // +inf when the Gaussian limit fits best
};

/// Sample standard deviation of the entries and the maximum-likelihood Student-t
/// degrees of freedom over {1, ..., 30, inf}. For each candidate the scale is
/// moment-matched (sd·sqrt((ν-2)/ν)); for ν <= 2 the variance does not exist and
/// the scale is matched to the median absolute deviation instead.
inline DistributionFit distribution_diagnostics(const Matrix& m) {
    const auto x = m.data();
    const std::size_t n = x.size();
    if (n < 2) throw std::invalid_argument("distribution_diagnostics needs at least 2 entries");

    Scalar mean = 0;
    for (Scalar v : x) mean += v;
    mean /= static_cast<Scalar>(n);
    Scalar ss = 0;
    for (Scalar v : x) ss += (v - mean) * (v - mean);
    const Scalar sd = std::sqrt(ss / static_cast<Scalar>(n - 1));

    constexpr Scalar inf = std::numeric_limits<Scalar>::infinity();
    if (sd == 0) return {0, inf};

    std::vector<Scalar> dev(n);
    for (std::size_t i = 0; i < n; ++i) dev[i] = std::abs(x[i] - mean);
    std::nth_element(dev.begin(), dev.begin() + static_cast<std::ptrdiff_t>(n / 2), dev.end());
    const Scalar mad = dev[n / 2];

    auto t_loglik = [&](Scalar nu, Scalar scale) {
        const Scalar c = std::lgamma((nu + 1) / 2) - std::lgamma(nu / 2) - 0.5 * std::log(nu * std::numbers::pi) -
                         std::log(scale);
        Scalar ll = 0;
        for (Scalar v : x) {
            const Scalar z = (v - mean) / scale;
            ll += c - (nu + 1) / 2 * std::log1p(z * z / nu);
        }
        return ll;
    };

    // Gaussian limit
    Scalar best_ll = 0;
    {
        const Scalar c = -0.5 * std::log(2 * std::numbers::pi) - std::log(sd);
        for (Scalar v : x) {
            const Scalar z = (v - mean) / sd;
            best_ll += c - 0.5 * z * z;
        }
    }
    Scalar best_dof = inf;
    for (int dof = 30; dof >= 1; --dof) {
        const Scalar nu = dof;
        Scalar scale;
        if (dof > 2) {
            scale = sd * std::sqrt((nu - 2) / nu);
        } else {
            const boost::math::students_t_distribution<Scalar> t(nu);
            scale = mad / boost::math::quantile(t, 0.75);
        }
        if (!(scale > 0)) continue;
        const Scalar ll = t_loglik(nu, scale);
        if (ll > best_ll) {
            best_ll = ll;
            best_dof = nu;
        }
    }
    return {sd, best_dof};
}

}  // namespace pissa
