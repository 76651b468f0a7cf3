// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "pissa/adapter.hpp"
#include "pissa/matrix.hpp"
#include "pissa/quant.hpp"
#include "pissa/random.hpp"

namespace pissa {

struct Dataset {
    Matrix features;          // N x d
    std::vector<int> labels;  // N values in [0, classes)
    std::size_t classes = 0;

    Dataset() = default;
    Dataset(Matrix f, std::vector<int> l, std::size_t c) : features(std::move(f)), labels(std::move(l)), classes(c) {
        if (labels.size() != features.rows())
            throw ShapeError("dataset has " + std::to_string(features.rows()) + " rows but " +
                             std::to_string(labels.size()) + " labels");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= classes)
                throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
        if (!features.all_finite()) throw NumericalError("dataset features must be finite");
    }

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return features.cols(); }

    /// Rows whose label is in `keep`; labels keep their original values.
    Dataset subset(const std::set<int>& keep) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (keep.contains(labels[i])) idx.push_back(i);
        return gather(idx);
    }

    Dataset gather(const std::vector<std::size_t>& idx) const {
        if (idx.empty()) throw std::invalid_argument("empty dataset selection");
        Matrix f(idx.size(), dim());
        std::vector<int> l(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            std::copy(features.row(idx[k]).begin(), features.row(idx[k]).end(), f.row(k).begin());
            l[k] = labels[idx[k]];
        }
        return {std::move(f), std::move(l), classes};
    }
};

/// Linear map x·W + bias where W is a trainable dense matrix (pretraining) or a
/// frozen base with an adapter (fine-tuning).
struct Linear {
    std::variant<Matrix, DecomposedLayer> weight;
    Matrix bias;  // 1 x n

    std::size_t in_features() const {
        return std::visit([](const auto& w) -> std::size_t {
            if constexpr (std::is_same_v<std::decay_t<decltype(w)>, Matrix>) return w.rows();
            else return w.in_features();
        }, weight);
    }
    std::size_t out_features() const { return bias.cols(); }
    bool has_adapter() const noexcept { return std::holds_alternative<DecomposedLayer>(weight); }

    /// Effective dense weight.
    Matrix dense_weight() const {
        if (const auto* m = std::get_if<Matrix>(&weight)) return *m;
        return merge(std::get<DecomposedLayer>(weight));
    }

    Matrix apply(const Matrix& x) const {
        Matrix y = std::visit([&](const auto& w) -> Matrix {
            if constexpr (std::is_same_v<std::decay_t<decltype(w)>, Matrix>) return matmul(x, w);
            else return forward(w, x);
        }, weight);
        for (std::size_t i = 0; i < y.rows(); ++i)
            for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += bias(0, j);
        return y;
    }
};

/// layer2(relu(layer1(x)))
struct MlpModel {
    Linear layer1;  // d x h
    Linear layer2;  // h x c

    std::size_t classes() const { return layer2.out_features(); }
};

/// He-initialized dense model with zero biases.
inline MlpModel make_mlp(std::size_t in, std::size_t hidden, std::size_t classes, RandomSource& rng) {
    MlpModel model;
    model.layer1 = {rng.normal_matrix(in, hidden, std::sqrt(2.0 / static_cast<Scalar>(in))), Matrix(1, hidden)};
    model.layer2 = {rng.normal_matrix(hidden, classes, std::sqrt(2.0 / static_cast<Scalar>(hidden))), Matrix(1, classes)};
    if (model.layer1.out_features() != model.layer2.in_features()) throw ShapeError("mlp layers do not chain");
    return model;
}

struct LossAndGrad {
    Scalar loss = 0;
    Matrix dlogits;
};

/// Mean softmax cross-entropy; dlogits = (softmax - onehot) / b.
inline LossAndGrad cross_entropy_with_grad(const Matrix& logits, std::span<const int> labels) {
    const std::size_t b = logits.rows();
    const std::size_t c = logits.cols();
    if (labels.size() != b) throw ShapeError("cross_entropy: label count does not match batch");
    LossAndGrad out{0, Matrix(b, c)};
    for (std::size_t i = 0; i < b; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c) throw std::invalid_argument("cross_entropy: label out of range");
        const auto row = logits.row(i);
        const Scalar mx = *std::max_element(row.begin(), row.end());
        Scalar z = 0;
        for (Scalar v : row) z += std::exp(v - mx);
        const Scalar log_z = mx + std::log(z);
        out.loss += log_z - row[static_cast<std::size_t>(y)];
        for (std::size_t j = 0; j < c; ++j) out.dlogits(i, j) = std::exp(row[j] - log_z) / static_cast<Scalar>(b);
        out.dlogits(i, static_cast<std::size_t>(y)) -= 1.0 / static_cast<Scalar>(b);
    }
    out.loss /= static_cast<Scalar>(b);
    return out;
}

struct LayerGrad {
    std::optional<Matrix> dweight;            // dense layers only
    std::optional<AdapterGradients> adapter;  // decomposed layers only; the base gets nothing
    Matrix dbias;
};

struct ModelGrad {
    Scalar loss = 0;
    LayerGrad layer1;
    LayerGrad layer2;

    /// Global L2 norm over adapter A/B gradients (biases excluded).
    Scalar adapter_grad_norm() const {
        Scalar ss = 0;
        for (const LayerGrad* g : {&layer1, &layer2}) {
            if (!g->adapter) continue;
            for (Scalar v : g->adapter->da.data()) ss += v * v;
            for (Scalar v : g->adapter->db.data()) ss += v * v;
        }
        return std::sqrt(ss);
    }
};

namespace detail {

inline LayerGrad linear_backward(const Linear& layer, const Matrix& x, const Matrix& dy, Matrix* dx) {
    LayerGrad g;
    g.dbias = Matrix(1, dy.cols());
    for (std::size_t i = 0; i < dy.rows(); ++i)
        for (std::size_t j = 0; j < dy.cols(); ++j) g.dbias(0, j) += dy(i, j);

    if (const auto* w = std::get_if<Matrix>(&layer.weight)) {
        g.dweight = matmul_tn(x, dy);
        if (dx) *dx = matmul_nt(dy, *w);
    } else {
        const auto& dl = std::get<DecomposedLayer>(layer.weight);
        const auto& ad = dl.adapter();
        g.adapter = adapter_gradients(x, dy, ad);
        if (dx) {
            *dx = matmul_nt(dy, dl.dense_base());
            *dx += matmul_nt(matmul_nt(dy, ad.b), ad.a) * ad.scale;
        }
    }
    return g;
}

}  // namespace detail

inline Matrix relu(Matrix z) {
    for (Scalar& v : z.data()) v = v > 0 ? v : 0;
    return z;
}

inline Matrix model_forward(const MlpModel& model, const Matrix& x) {
    return model.layer2.apply(relu(model.layer1.apply(x)));
}

inline Scalar model_loss(const MlpModel& model, const Matrix& x, std::span<const int> labels) {
    return cross_entropy_with_grad(model_forward(model, x), labels).loss;
}

/// Loss and gradients. Decomposed layers report only adapter and bias
/// gradients; their bases are treated as constants.
inline ModelGrad model_forward_backward(const MlpModel& model, const Matrix& x, std::span<const int> labels) {
    if (x.cols() != model.layer1.in_features())
        throw ShapeError("model input has " + std::to_string(x.cols()) + " features, model expects " +
                         std::to_string(model.layer1.in_features()));
    const Matrix pre = model.layer1.apply(x);
    const Matrix hidden = relu(pre);
    const Matrix logits = model.layer2.apply(hidden);
    auto [loss, dlogits] = cross_entropy_with_grad(logits, labels);

    ModelGrad out;
    out.loss = loss;
    Matrix dhidden;
    out.layer2 = detail::linear_backward(model.layer2, hidden, dlogits, &dhidden);
    for (std::size_t k = 0; k < dhidden.size(); ++k)
        if (!(pre.data()[k] > 0)) dhidden.data()[k] = 0;
    out.layer1 = detail::linear_backward(model.layer1, x, dhidden, nullptr);
    return out;
}

struct TrainConfig {
    Scalar lr = 1e-3;
    std::size_t batch_size = 128;
    std::size_t steps = 300;
    Scalar warmup_ratio = 0.03;
    Scalar weight_decay = 0;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be finite and >= 0");
        if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
        if (steps == 0) throw std::invalid_argument("steps must be positive");
        if (!(warmup_ratio >= 0 && warmup_ratio < 1)) throw std::invalid_argument("warmup_ratio must be in [0, 1)");
        if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
    }

    std::size_t warmup_steps() const {
        return static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<Scalar>(steps)));
    }
};

/// Linear ramp over the warmup steps (first tick lr/warmup, not 0), then cosine
/// decay reaching 0 at step `steps - 1`.
inline Scalar cosine_warmup_lr(std::size_t step, const TrainConfig& cfg) {
    if (step >= cfg.steps) throw std::out_of_range("cosine_warmup_lr: step beyond schedule");
    const std::size_t w = cfg.warmup_steps();
    if (step < w) return cfg.lr * static_cast<Scalar>(step + 1) / static_cast<Scalar>(w);
    const std::size_t span = cfg.steps - 1 - w;
    if (span == 0) return cfg.lr;
    const Scalar progress = static_cast<Scalar>(step - w) / static_cast<Scalar>(span);
    return cfg.lr * 0.5 * (1 + std::cos(std::numbers::pi * progress));
}

/// Adam moments for a fixed list of parameter tensors.
struct AdamWState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::size_t t = 0;
};

/// One decoupled-weight-decay Adam update, applied in place.
inline void adamw_step(AdamWState& state, std::span<Matrix* const> params, std::span<const Matrix* const> grads,
                       Scalar lr, const TrainConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("adamw_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const Matrix* p : params) {
            state.m.emplace_back(p->rows(), p->cols());
            state.v.emplace_back(p->rows(), p->cols());
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adamw_step: state does not match parameters");
    ++state.t;
    const Scalar bc1 = 1 - std::pow(cfg.beta1, static_cast<Scalar>(state.t));
    const Scalar bc2 = 1 - std::pow(cfg.beta2, static_cast<Scalar>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& p = *params[k];
        const Matrix& g = *grads[k];
        p.require_same_shape(g, "adamw_step");
        p.require_same_shape(state.m[k], "adamw_step state");
        auto pd = p.data();
        auto gd = g.data();
        auto md = state.m[k].data();
        auto vd = state.v[k].data();
        for (std::size_t i = 0; i < pd.size(); ++i) {
            md[i] = cfg.beta1 * md[i] + (1 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1 - cfg.beta2) * gd[i] * gd[i];
            const Scalar mhat = md[i] / bc1;
            const Scalar vhat = vd[i] / bc2;
            pd[i] -= lr * cfg.weight_decay * pd[i];
            pd[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

struct TraceRow {
    Scalar loss = 0;
    Scalar grad_norm = 0;
    Scalar lr = 0;
};

/// One row per optimizer step; row k holds the batch loss and gradient norm
/// measured before update k+1 and the learning rate used for it.
using TrainTrace = std::vector<TraceRow>;

class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(std::size_t step, Scalar loss)
        : NumericalError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
          step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Fixed stream ids for derive_seed so that batch order does not depend on the
/// adapter initialization.
enum class Stream : std::uint64_t { batches = 1, adapter = 2, model = 3, probe = 4 };

/// Shuffled-epoch minibatch sampler.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : order_(n), batch_(std::min(batch, n)), rng_(seed) {
        std::iota(order_.begin(), order_.end(), 0);
        shuffle();
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        out.reserve(batch_);
        while (out.size() < batch_) {
            if (pos_ == order_.size()) {
                shuffle();
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void shuffle() {
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    }

    std::vector<std::size_t> order_;
    std::size_t batch_;
    std::size_t pos_ = 0;
    RandomSource rng_;
};

namespace detail {

inline void collect(Linear& layer, LayerGrad& g, std::vector<Matrix*>& ps, std::vector<const Matrix*>& gs) {
    if (auto* w = std::get_if<Matrix>(&layer.weight)) {
        ps.push_back(w);
        gs.push_back(&*g.dweight);
    } else {
        auto& ad = std::get<DecomposedLayer>(layer.weight).mutable_adapter();
        ps.push_back(&ad.a);
        gs.push_back(&g.adapter->da);
        ps.push_back(&ad.b);
        gs.push_back(&g.adapter->db);
    }
    ps.push_back(&layer.bias);
    gs.push_back(&g.dbias);
}

}  // namespace detail

/// AdamW with warmup + cosine schedule over every trainable tensor of `model`:
/// dense weights, adapters and biases. Frozen bases are never written.
inline TrainTrace train(MlpModel& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.dim() != model.layer1.in_features()) throw ShapeError("dataset dimension does not match model input");
    BatchSampler sampler(data.size(), cfg.batch_size, derive_seed(cfg.seed, static_cast<std::uint64_t>(Stream::batches)));
    AdamWState state;
    TrainTrace trace;
    trace.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const Dataset batch = data.gather(sampler.next());
        ModelGrad g = model_forward_backward(model, batch.features, batch.labels);
        if (!std::isfinite(g.loss)) throw TrainingDiverged(step + 1, g.loss);
        const Scalar lr = cosine_warmup_lr(step, cfg);
        trace.push_back({g.loss, g.adapter_grad_norm(), lr});

        std::vector<Matrix*> ps;
        std::vector<const Matrix*> gs;
        detail::collect(model.layer1, g.layer1, ps, gs);
        detail::collect(model.layer2, g.layer2, ps, gs);
        adamw_step(state, ps, gs, lr, cfg);
    }
    return trace;
}

/// How adapters are injected before fine-tuning.
struct AdapterSpec {
    Origin method = Origin::pissa;
    std::size_t rank = 4;
    std::size_t iters = 1;          // qpissa / loftq rounds
    std::optional<std::size_t> niter;  // fast SVD for pissa when set
    QuantConfig quant;
};

inline DecomposedLayer make_layer(const Matrix& w, const AdapterSpec& spec, RandomSource& rng) {
    switch (spec.method) {
        case Origin::pissa:
            if (spec.niter) return pissa_init_fast(w, spec.rank, *spec.niter, rng);
            return pissa_init(w, spec.rank);
        case Origin::lora: return lora_init(w, spec.rank, rng);
        case Origin::medium: return variant_init(w, spec.rank, InitStrategy::medium);
        case Origin::minor: return variant_init(w, spec.rank, InitStrategy::minor);
        case Origin::qpissa: return qpissa_init(w, spec.rank, spec.iters, spec.quant);
        case Origin::loftq: return loftq_init(w, spec.rank, spec.iters, spec.quant);
        case Origin::qlora: return qlora_init(w, spec.rank, rng, spec.quant);
    }
    throw std::invalid_argument("make_layer: unknown method");
}

/// Replaces both dense weights by decomposed layers. Biases are kept.
inline MlpModel inject_adapters(const MlpModel& pretrained, const AdapterSpec& spec, std::uint64_t seed) {
    RandomSource rng(derive_seed(seed, static_cast<std::uint64_t>(Stream::adapter)));
    MlpModel out = pretrained;
    for (Linear* layer : {&out.layer1, &out.layer2}) {
        if (layer->has_adapter()) throw std::invalid_argument("inject_adapters: model already has adapters");
        layer->weight = make_layer(std::get<Matrix>(layer->weight), spec, rng);
    }
    return out;
}

struct FinetuneResult {
    TrainTrace trace;
    MlpModel initial;  // right after injection
    MlpModel model;    // after training
};

/// Injects adapters into a pretrained dense model and fine-tunes adapters and biases.
inline FinetuneResult run_finetune(const MlpModel& pretrained, const Dataset& data, const TrainConfig& cfg,
                                   const AdapterSpec& spec) {
    FinetuneResult r{{}, inject_adapters(pretrained, spec, cfg.seed), {}};
    r.model = r.initial;
    r.trace = train(r.model, data, cfg);
    return r;
}

struct GradcheckResult {
    Scalar max_rel_error = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;     // entries whose difference crossed a rectifier kink
    std::size_t near_kinks = 0;  // hidden pre-activations within kink_margin of 0
};

/// Compares analytic adapter gradients with central differences, entry by entry.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
/// Entries whose ±eps evaluations change the rectifier pattern are skipped.
inline GradcheckResult gradcheck(const MlpModel& model, const Matrix& x, std::span<const int> labels, Scalar eps,
                                 Scalar kink_margin = 1e-3) {
    if (!(eps > 0)) throw std::invalid_argument("gradcheck: eps must be positive");
    if (!model.layer1.has_adapter() && !model.layer2.has_adapter())
        throw std::invalid_argument("gradcheck: model has no adapters");
    const ModelGrad analytic = model_forward_backward(model, x, labels);

    auto pattern = [&](const MlpModel& mdl) {
        const Matrix pre = mdl.layer1.apply(x);
        std::vector<bool> p(pre.size());
        for (std::size_t k = 0; k < pre.size(); ++k) p[k] = pre.data()[k] > 0;
        return p;
    };
    GradcheckResult res;
    {
        const Matrix pre = model.layer1.apply(x);
        for (Scalar v : pre.data())
            if (std::abs(v) < kink_margin) ++res.near_kinks;
    }
    const auto base_pattern = pattern(model);

    MlpModel probe = model;
    auto check = [&](Matrix& param, const Matrix& grad) {
        for (std::size_t k = 0; k < param.size(); ++k) {
            const Scalar orig = param.data()[k];
            param.data()[k] = orig + eps;
            const Scalar lp = model_loss(probe, x, labels);
            const bool flip_p = pattern(probe) != base_pattern;
            param.data()[k] = orig - eps;
            const Scalar lm = model_loss(probe, x, labels);
            const bool flip_m = pattern(probe) != base_pattern;
            param.data()[k] = orig;
            if (flip_p || flip_m) {
                ++res.skipped;
                continue;
            }
            const Scalar numeric = (lp - lm) / (2 * eps);
            const Scalar a = grad.data()[k];
            const Scalar denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
            ++res.checked;
        }
    };
    for (auto [layer, grad] : {std::pair{&probe.layer1, &analytic.layer1}, std::pair{&probe.layer2, &analytic.layer2}}) {
        if (!layer->has_adapter()) continue;
        auto& ad = std::get<DecomposedLayer>(layer->weight).mutable_adapter();
        check(ad.a, grad->adapter->da);
        check(ad.b, grad->adapter->db);
    }
    return res;
}

}  // namespace pissa
