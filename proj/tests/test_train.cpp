// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "pissa/data.hpp"
#include "pissa/train.hpp"
#include "test_util.hpp"

using namespace pissa;
using pissa::testing::max_abs_diff;
using pissa::testing::random_matrix;

namespace {

struct Toy {
    MlpModel model;
    Dataset data;
};

/// Small random dense model on a small cluster dataset.
Toy small_toy(std::uint64_t seed, std::size_t hidden = 12) {
    RandomSource rng(seed);
    Toy t{make_mlp(8, hidden, 4, rng), generate_cluster_dataset(4, 8, 20, 1.0, seed + 1)};
    t.model.layer1.bias = rng.normal_matrix(1, hidden, 0.1);
    t.model.layer2.bias = rng.normal_matrix(1, 4, 0.1);
    return t;
}

/// Hand-rolled scalar AdamW, written out from the update equations.
struct ScalarAdamW {
    double m = 0, v = 0;
    int t = 0;
    double step(double p, double g, double lr, double b1, double b2, double eps, double wd) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        p = p - lr * wd * p;
        return p - lr * mh / (std::sqrt(vh) + eps);
    }
};

}  // namespace

TEST(CrossEntropy, UniformLogits) {
    const Matrix logits(3, 5);
    const std::vector<int> y{0, 3, 4};
    EXPECT_NEAR(cross_entropy_with_grad(logits, y).loss, std::log(5.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrectLogit) {
    const Matrix logits{{800.0, 0.0, 0.0}};
    const std::vector<int> y{0};
    const auto r = cross_entropy_with_grad(logits, y);
    EXPECT_NEAR(r.loss, 0.0, 1e-300);
    EXPECT_NEAR(max_abs(r.dlogits), 0.0, 1e-300);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
    Matrix logits = random_matrix(4, 6, 1);
    const std::vector<int> y{1, 0, 5, 2};
    const auto r = cross_entropy_with_grad(logits, y);
    const Scalar h = 1e-6;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const Scalar orig = logits.data()[k];
        logits.data()[k] = orig + h;
        const Scalar lp = cross_entropy_with_grad(logits, y).loss;
        logits.data()[k] = orig - h;
        const Scalar lm = cross_entropy_with_grad(logits, y).loss;
        logits.data()[k] = orig;
        EXPECT_NEAR(r.dlogits.data()[k], (lp - lm) / (2 * h), 1e-6);
    }
}

TEST(CrossEntropy, RejectsBadLabels) {
    const Matrix logits(2, 3);
    EXPECT_THROW(cross_entropy_with_grad(logits, std::vector<int>{0, 3}), std::invalid_argument);
    EXPECT_THROW(cross_entropy_with_grad(logits, std::vector<int>{0}), ShapeError);
}

TEST(Model, ZeroWeightsGiveLogC) {
    MlpModel model{{Matrix(4, 6), Matrix(1, 6)}, {Matrix(6, 3), Matrix(1, 3)}};
    const Matrix x = random_matrix(5, 4, 2);
    const std::vector<int> y{0, 1, 2, 0, 1};
    const auto g = model_forward_backward(model, x, y);
    EXPECT_NEAR(g.loss, std::log(3.0), 1e-15);
    EXPECT_TRUE(g.layer1.dweight->all_finite());
    EXPECT_TRUE(g.layer2.dweight->all_finite());
}

TEST(Model, RejectsWrongInputWidth) {
    auto t = small_toy(3);
    EXPECT_THROW(model_forward_backward(t.model, Matrix(2, 7), std::vector<int>{0, 1}), ShapeError);
}

TEST(Model, LoraInitHasZeroDA) {
    auto t = small_toy(4);
    const auto tuned = inject_adapters(t.model, AdapterSpec{Origin::lora, 3}, 7);
    const auto g = model_forward_backward(tuned, t.data.features, t.data.labels);
    EXPECT_EQ(max_abs(g.layer1.adapter->da), 0.0);
    EXPECT_EQ(max_abs(g.layer2.adapter->da), 0.0);
    EXPECT_GT(max_abs(g.layer2.adapter->db), 0.0);
    EXPECT_FALSE(g.layer1.dweight.has_value());
}

TEST(Model, InjectionPreservesFunction) {
    auto t = small_toy(5);
    const Matrix before = model_forward(t.model, t.data.features);
    for (Origin o : {Origin::pissa, Origin::lora, Origin::medium, Origin::minor}) {
        const auto tuned = inject_adapters(t.model, AdapterSpec{o, 3}, 1);
        EXPECT_TRUE(tuned.layer1.has_adapter());
        EXPECT_TRUE(tuned.layer2.has_adapter());
        EXPECT_LE(max_abs_diff(model_forward(tuned, t.data.features), before), 1e-10) << to_string(o);
        EXPECT_THROW(inject_adapters(tuned, AdapterSpec{o, 3}, 1), std::invalid_argument);
    }
}

TEST(Gradcheck, ThreeSampleBatch) {
    auto t = small_toy(6);
    const auto tuned = inject_adapters(t.model, AdapterSpec{Origin::pissa, 3}, 2);
    const Dataset batch = t.data.gather({0, 25, 70});
    const auto res = gradcheck(tuned, batch.features, batch.labels, 1e-5);
    EXPECT_LE(res.max_rel_error, 1e-4);
    EXPECT_GT(res.checked, 0u);
}

TEST(Gradcheck, LinearRegionIsNearlyExact) {
    // every hidden unit active and every adapter gradient O(1e-2) or larger,
    // so only the central-difference truncation remains
    MlpModel model{{Matrix{{1.0, 0.5, 0.3}, {0.2, 1.0, -0.4}, {0.6, -0.3, 0.9}}, Matrix{{1.0, 1.0, 1.0}}},
                   {Matrix{{1.0, -1.0}, {0.5, 2.0}, {-0.7, 0.4}}, Matrix(1, 2)}};
    const Matrix x{{1.0, 1.0, 1.0}, {0.5, 1.5, 1.0}};
    for (std::size_t r : {1, 2}) {
        const auto tuned = inject_adapters(model, AdapterSpec{Origin::pissa, r}, 0);
        const auto res = gradcheck(tuned, x, std::vector<int>{0, 1}, 1e-5);
        EXPECT_EQ(res.skipped, 0u);
        EXPECT_EQ(res.near_kinks, 0u);
        EXPECT_EQ(res.checked, 11 * r);
        EXPECT_LE(res.max_rel_error, 1e-8) << "rank " << r;
    }
}

TEST(Gradcheck, KinkIsFlaggedAndSkipped) {
    // layer1 = identity-like map, so the sample's pre-activation hits 0 exactly
    MlpModel model{{Matrix::identity(3), Matrix(1, 3)}, {random_matrix(3, 2, 9), Matrix(1, 2)}};
    const auto tuned = inject_adapters(model, AdapterSpec{Origin::pissa, 2}, 4);
    const Matrix x{{0.0, 1.0, -1.0}};
    const auto res = gradcheck(tuned, x, std::vector<int>{1}, 1e-5);
    EXPECT_GE(res.near_kinks, 1u);
    EXPECT_GT(res.skipped, 0u);
    EXPECT_LE(res.max_rel_error, 1e-4);
}

TEST(Gradcheck, RandomModels) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto t = small_toy(100 + seed);
        const Origin method = seed % 2 ? Origin::pissa : Origin::minor;
        auto tuned = inject_adapters(t.model, AdapterSpec{method, 2}, seed);
        const Dataset batch = t.data.gather({seed, seed + 20, seed + 40});
        EXPECT_LE(gradcheck(tuned, batch.features, batch.labels, 1e-5).max_rel_error, 1e-4) << "seed " << seed;
    }
}

TEST(Gradcheck, RequiresAdaptersAndPositiveEps) {
    auto t = small_toy(10);
    EXPECT_THROW(gradcheck(t.model, t.data.features, t.data.labels, 1e-5), std::invalid_argument);
    const auto tuned = inject_adapters(t.model, AdapterSpec{}, 0);
    EXPECT_THROW(gradcheck(tuned, t.data.features, t.data.labels, 0.0), std::invalid_argument);
}

TEST(AdamW, ZeroGradientLeavesParamsUnchanged) {
    Matrix p = random_matrix(3, 3, 11);
    const Matrix before = p;
    const Matrix g(3, 3);
    AdamWState st;
    Matrix* ps[] = {&p};
    const Matrix* gs[] = {&g};
    for (int i = 0; i < 5; ++i) adamw_step(st, ps, gs, 0.1, TrainConfig{});
    EXPECT_EQ(p, before);
}

TEST(AdamW, ConstantGradientStepApproachesLr) {
    Matrix p(1, 1);
    const Matrix g{{0.7}};
    AdamWState st;
    Matrix* ps[] = {&p};
    const Matrix* gs[] = {&g};
    Scalar prev = 0;
    for (int i = 0; i < 2000; ++i) {
        prev = p(0, 0);
        adamw_step(st, ps, gs, 0.01, TrainConfig{});
    }
    EXPECT_NEAR(prev - p(0, 0), 0.01, 1e-9);
}

TEST(AdamW, MatchesScalarReference) {
    TrainConfig cfg;
    cfg.weight_decay = 0.05;
    cfg.beta1 = 0.8;
    cfg.beta2 = 0.99;
    Matrix p{{2.0}};
    Matrix g(1, 1);
    AdamWState st;
    Matrix* ps[] = {&p};
    const Matrix* gs[] = {&g};
    ScalarAdamW ref;
    double q = 2.0;
    for (int i = 0; i < 10; ++i) {
        g(0, 0) = 3 * (p(0, 0) - 0.5);  // quadratic 1.5·(p - 0.5)²
        const double lr = 0.1 / (1 + i);
        adamw_step(st, ps, gs, lr, cfg);
        q = ref.step(q, 3 * (q - 0.5), lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        EXPECT_NEAR(p(0, 0), q, 1e-14) << "step " << i;
    }
}

TEST(AdamW, ConvexQuadraticLossIsMonotoneAfterWarmup) {
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.steps = 200;
    Matrix p{{10.0, -6.0}};
    Matrix g(1, 2);
    AdamWState st;
    Matrix* ps[] = {&p};
    const Matrix* gs[] = {&g};
    auto loss = [&] { return 0.5 * ((p(0, 0) - 3) * (p(0, 0) - 3) + 4 * (p(0, 1) + 1) * (p(0, 1) + 1)); };
    Scalar prev = loss();
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        g(0, 0) = p(0, 0) - 3;
        g(0, 1) = 4 * (p(0, 1) + 1);
        adamw_step(st, ps, gs, cosine_warmup_lr(s, cfg), cfg);
        const Scalar now = loss();
        if (s >= cfg.warmup_steps()) EXPECT_LE(now, prev) << "step " << s;
        prev = now;
    }
}

TEST(AdamW, RejectsMismatchedLists) {
    Matrix p(1, 1);
    Matrix* ps[] = {&p};
    AdamWState st;
    EXPECT_THROW(adamw_step(st, ps, std::span<const Matrix* const>{}, 0.1, TrainConfig{}), ShapeError);
}

TEST(Schedule, WarmupAndCosineEndpoints) {
    TrainConfig cfg;
    cfg.lr = 2e-3;
    cfg.steps = 300;
    ASSERT_EQ(cfg.warmup_steps(), 9u);
    EXPECT_DOUBLE_EQ(cosine_warmup_lr(0, cfg), 2e-3 / 9);
    EXPECT_DOUBLE_EQ(cosine_warmup_lr(8, cfg), 2e-3);
    EXPECT_DOUBLE_EQ(cosine_warmup_lr(9, cfg), 2e-3);
    EXPECT_NEAR(cosine_warmup_lr(299, cfg), 0.0, 1e-18);
    const Scalar mid = cosine_warmup_lr(9 + 145, cfg);
    EXPECT_NEAR(mid, 1e-3, 1e-15);
    for (std::size_t s = 10; s < 300; ++s) EXPECT_LE(cosine_warmup_lr(s, cfg), cosine_warmup_lr(s - 1, cfg));
    EXPECT_THROW(cosine_warmup_lr(300, cfg), std::out_of_range);
}

TEST(Schedule, NoWarmup) {
    TrainConfig cfg;
    cfg.warmup_ratio = 0;
    cfg.steps = 5;
    EXPECT_EQ(cosine_warmup_lr(0, cfg), cfg.lr);
    EXPECT_NEAR(cosine_warmup_lr(4, cfg), 0.0, 1e-18);
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.warmup_ratio = 1.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.lr = -1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Dataset, Validation) {
    EXPECT_THROW(Dataset(Matrix(2, 2), {0}, 2), ShapeError);
    EXPECT_THROW(Dataset(Matrix(2, 2), {0, 2}, 2), std::invalid_argument);
    const auto d = generate_cluster_dataset(10, 64, 5, 1.0, 0);
    const auto even = d.subset(even_classes(10));
    EXPECT_EQ(even.size(), 25u);
    for (int y : even.labels) EXPECT_EQ(y % 2, 0);
    EXPECT_EQ(d.subset(odd_classes(10)).size(), 25u);
}

TEST(BatchSampler, EachEpochIsAPermutation) {
    BatchSampler s(10, 5, 42);
    std::vector<int> seen(10, 0);
    for (int b = 0; b < 4; ++b)
        for (std::size_t i : s.next()) ++seen[i];
    for (int c : seen) EXPECT_EQ(c, 2);
}

TEST(Train, TraceShapeAndSchedule) {
    auto t = small_toy(12);
    TrainConfig cfg;
    cfg.steps = 40;
    cfg.batch_size = 16;
    const auto r = run_finetune(t.model, t.data, cfg, AdapterSpec{Origin::pissa, 3});
    ASSERT_EQ(r.trace.size(), 40u);
    for (std::size_t s = 0; s < 40; ++s) EXPECT_EQ(r.trace[s].lr, cosine_warmup_lr(s, cfg));
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
    auto t = small_toy(13);
    TrainConfig cfg;
    cfg.lr = 0;
    cfg.steps = 10;
    cfg.batch_size = t.data.size();
    const auto r = run_finetune(t.model, t.data, cfg, AdapterSpec{Origin::pissa, 3});
    for (const auto& row : r.trace) EXPECT_NEAR(row.loss, r.trace[0].loss, 1e-13);
}

TEST(Train, SameSeedIsBitIdentical) {
    auto t = small_toy(14);
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.batch_size = 16;
    cfg.seed = 9;
    for (Origin o : {Origin::pissa, Origin::lora, Origin::qpissa}) {
        const auto a = run_finetune(t.model, t.data, cfg, AdapterSpec{o, 3});
        const auto b = run_finetune(t.model, t.data, cfg, AdapterSpec{o, 3});
        for (std::size_t s = 0; s < cfg.steps; ++s) {
            EXPECT_EQ(a.trace[s].loss, b.trace[s].loss);
            EXPECT_EQ(a.trace[s].grad_norm, b.trace[s].grad_norm);
        }
    }
}

TEST(Train, FrozenBaseIsUntouched) {
    auto t = small_toy(15);
    TrainConfig cfg;
    cfg.steps = 25;
    cfg.batch_size = 16;
    cfg.lr = 1e-2;
    for (Origin o : {Origin::pissa, Origin::loftq}) {
        const auto r = run_finetune(t.model, t.data, cfg, AdapterSpec{o, 3});
        for (auto [before, after] : {std::pair{&r.initial.layer1, &r.model.layer1}, std::pair{&r.initial.layer2, &r.model.layer2}}) {
            const auto& lb = std::get<DecomposedLayer>(before->weight);
            const auto& la = std::get<DecomposedLayer>(after->weight);
            EXPECT_EQ(lb.dense_base(), la.dense_base());
            if (lb.quantized()) EXPECT_TRUE(std::get<QuantizedMatrix>(lb.base()) == std::get<QuantizedMatrix>(la.base()));
            EXPECT_FALSE(lb.adapter().a == la.adapter().a);
        }
    }
}

TEST(Train, PissaStepOneGradNormExceedsLora) {
    auto t = small_toy(16);
    TrainConfig cfg;
    cfg.steps = 1;
    cfg.batch_size = 32;
    const auto p = run_finetune(t.model, t.data, cfg, AdapterSpec{Origin::pissa, 3});
    const auto l = run_finetune(t.model, t.data, cfg, AdapterSpec{Origin::lora, 3});
    EXPECT_NEAR(p.trace[0].loss, l.trace[0].loss, 1e-10);  // same batch, same function
    EXPECT_GT(p.trace[0].grad_norm, l.trace[0].grad_norm);
}

TEST(Train, DenseTrainingReducesLoss) {
    auto t = small_toy(17);
    TrainConfig cfg;
    cfg.steps = 150;
    cfg.batch_size = 32;
    cfg.lr = 1e-2;
    const auto trace = train(t.model, t.data, cfg);
    EXPECT_LT(trace.back().loss, trace.front().loss);
    EXPECT_EQ(trace.front().grad_norm, 0.0);  // no adapters
}

TEST(Train, DivergenceReportsStep) {
    auto t = small_toy(18);
    TrainConfig cfg;
    cfg.steps = 50;
    cfg.batch_size = 16;
    cfg.lr = 1e300;
    cfg.warmup_ratio = 0;
    try {
        train(t.model, t.data, cfg);
        FAIL() << "expected divergence";
    } catch (const TrainingDiverged& e) {
        EXPECT_GE(e.step(), 2u);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}
