#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dmdrlab/diffusion.hpp"
#include "support/oracles.hpp"
#include "support/score_check.hpp"

using namespace dmdrlab;

namespace {

DiffusionSpec spec_of(Parameterization k) {
    DiffusionSpec s;
    s.kind = k;
    if (k == Parameterization::noise_pred) {
        s.step_grid = {0.9, 0.6, 0.3};
    }
    return s;
}

class BothKinds : public ::testing::TestWithParam<Parameterization> {};

}  // namespace

TEST(Diffusion, SignalNoiseCoefficients) {
    const auto n = spec_of(Parameterization::noise_pred);
    EXPECT_NEAR(n.signal(0.5), std::cos(std::numbers::pi / 4), 1e-15);
    EXPECT_NEAR(n.alpha_bar(0.3) + std::pow(n.noise(0.3), 2), 1.0, 1e-15);
    const auto v = spec_of(Parameterization::velocity);
    EXPECT_EQ(v.signal(0.25), 0.75);
    EXPECT_EQ(v.noise(0.25), 0.25);
    EXPECT_NEAR(v.alpha_bar(0.25), 0.5625 / (0.5625 + 0.0625), 1e-15);
    EXPECT_EQ(v.grid_time(1), 0.25);
    EXPECT_EQ(v.grid_time(4), 1.0);
}

TEST_P(BothKinds, ForwardDiffuseIsSignalPlusNoise) {
    const auto spec = spec_of(GetParam());
    Rng rng(1);
    const Value x0 = randn(rng, {4, 2}), eps = randn(rng, {4, 2});
    const std::vector<double> t{0.0, 0.3, 0.7, 1.0};
    const Value xt = forward_diffuse(spec, x0, eps, t);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            EXPECT_NEAR(xt.at(i, j), spec.signal(t[i]) * x0.at(i, j) + spec.noise(t[i]) * eps.at(i, j), 1e-15);
        }
    }
    EXPECT_THROW(forward_diffuse(spec, x0, eps, 1.5), DomainError);
    EXPECT_THROW(forward_diffuse(spec, x0, randn(rng, {3, 2}), 0.5), DimensionError);
}

TEST_P(BothKinds, TargetRoundTripsThroughX0AndEps) {
    const auto spec = spec_of(GetParam());
    Rng rng(2);
    const Value x0 = randn(rng, {6, 2}), eps = randn(rng, {6, 2});
    const std::vector<double> t{0.05, 0.2, 0.4, 0.6, 0.8, 0.95};
    const Value xt = forward_diffuse(spec, x0, eps, t);
    const Value pred = diffusion_target(spec, x0, eps);
    const Value x0_back = pred_to_x0(spec, pred, xt, t);
    const Value eps_back = pred_to_eps(spec, pred, xt, t);
    for (std::size_t i = 0; i < x0.size(); ++i) {
        EXPECT_NEAR(x0_back[i], x0[i], 1e-12);
        EXPECT_NEAR(eps_back[i], eps[i], 1e-12);
    }
}

TEST_P(BothKinds, ScoreOfOptimalPredictorMatchesAnalyticMixtureScore) {
    EXPECT_LE(scorecheck::max_error(GetParam(), 1000, 77), 1e-6);
}

TEST_P(BothKinds, ScoreRejectsTimesAtOrBelowFloor) {
    const auto spec = spec_of(GetParam());
    const Value p = Value::zeros({1, 1});
    EXPECT_THROW(pred_to_score(spec, p, p, spec.t_floor), DomainError);
    EXPECT_THROW(pred_to_score(spec, p, p, 1.2), DomainError);
    EXPECT_NO_THROW(pred_to_score(spec, p, p, 1.0));
}

TEST(Diffusion, NoisePredX0UndefinedWithoutSignal) {
    const auto spec = spec_of(Parameterization::noise_pred);
    const Value p = Value::zeros({1, 1});
    EXPECT_THROW(pred_to_x0(spec, p, p, std::vector<double>{1.0}), DomainError);
}

// Probability-flow sampling driven by the exact optimal predictor of a
// Gaussian reproduces its mean and variance.
TEST_P(BothKinds, SamplerWithOptimalPredictorRecoversGaussian) {
    const auto spec = spec_of(GetParam());
    const bool vel = GetParam() == Parameterization::velocity;
    oracle::Mixture m;
    m.means = {{1.5}};
    m.weights = {1.0};
    m.stddev = 0.5;
    auto predict = [&](const Value& x, std::span<const double> t, std::span<const int>) {
        const double a = spec.signal(t[0]), s = spec.noise(t[0]);
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = oracle::optimal_prediction(m, {x[i]}, a, s, vel)[0];
        }
        return Value::constant(x.shape(), out);
    };
    Rng rng(3);
    const Value xs = teacher_sample(spec, predict, 1, 20000, 200, rng, {}, 1.0);
    std::vector<double> v(xs.data().begin(), xs.data().end());
    EXPECT_NEAR(oracle::mean(v), 1.5, 0.02);
    EXPECT_NEAR(std::sqrt(oracle::variance(v)), 0.5, 0.02);
}

INSTANTIATE_TEST_SUITE_P(Kinds, BothKinds, ::testing::Values(Parameterization::noise_pred, Parameterization::velocity));

TEST(Diffusion, SpecValidation) {
    DiffusionSpec s;
    s.step_grid = {};
    EXPECT_THROW(s.validate(), ConfigError);
    s.step_grid = {0.5, 0.75};
    EXPECT_THROW(s.validate(), ConfigError);
    s.step_grid = {1.2};
    EXPECT_THROW(s.validate(), ConfigError);
    s.step_grid = {1.0};
    s.guidance_scale = 0.5;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Diffusion, RingGeometryAndClasses) {
    const auto m = make_ring(8, 4.0, 0.15, 4);
    ASSERT_EQ(m.components(), 8u);
    EXPECT_NEAR(m.means[2][0], 0.0, 1e-12);
    EXPECT_NEAR(m.means[2][1], 4.0, 1e-12);
    EXPECT_EQ(m.classes, (std::vector<int>{0, 0, 1, 1, 2, 2, 3, 3}));
    EXPECT_EQ(m.num_classes(), 4u);
    EXPECT_NEAR(m.class_weights()[1], 0.25, 1e-15);
    EXPECT_TRUE(make_ring(8, 4.0, 0.15, 0).classes.empty());
}

TEST(Diffusion, MixtureValidation) {
    MixtureSpec m = make_ring(2, 1.0, 0.1, 0);
    m.weights = {0.5, 0.6};
    EXPECT_THROW(m.validate(), ConfigError);
    m.weights = {0.5, 0.5};
    m.stddev = 0.0;
    EXPECT_THROW(m.validate(), ConfigError);
}

TEST(Diffusion, MixtureSamplesFollowWeightsAndLabels) {
    MixtureSpec m;
    m.means = {{-3.0}, {3.0}};
    m.weights = {0.8, 0.2};
    m.classes = {0, 1};
    m.stddev = 0.2;
    Rng rng(4);
    const auto s = sample_mixture(m, 20000, rng);
    std::size_t right = 0;
    for (std::size_t i = 0; i < 20000; ++i) {
        const bool is_right = s.x[i] > 0.0;
        right += is_right ? 1 : 0;
        ASSERT_EQ(s.labels[i], is_right ? 1 : 0);
    }
    EXPECT_NEAR(static_cast<double>(right) / 20000.0, 0.2, 0.01);
    const std::vector<int> only_left(100, 0);
    const Value left = sample_mixture_for(m, 100, only_left, rng);
    for (double x : left.data()) {
        EXPECT_LT(x, 0.0);
    }
}

TEST(Diffusion, TeacherLossDecreasesOnTinyMixture) {
    MixtureSpec m;
    m.means = {{-1.0}, {1.0}};
    m.weights = {0.5, 0.5};
    m.stddev = 0.2;
    TeacherOptions opts;
    opts.dims.in_dim = opts.dims.out_dim = 1;
    opts.dims.hidden_dim = 32;
    opts.dims.depth = 3;
    opts.dims.time_embed_dim = 8;
    opts.dims.num_classes = 0;
    opts.batch = 128;
    std::vector<double> losses;
    Rng rng(5);
    train_teacher(spec_of(Parameterization::velocity), m, 400, rng, opts,
                  [&](long, double loss, const NetParams&) { losses.push_back(loss); });
    ASSERT_EQ(losses.size(), 400u);
    const auto avg = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t i = a; i < b; ++i) {
            s += losses[i];
        }
        return s / static_cast<double>(b - a);
    };
    EXPECT_LT(avg(350, 400), 0.8 * avg(0, 50));
}

TEST(Diffusion, TeacherRejectsMismatchedDims) {
    const auto m = make_ring(8, 4.0, 0.15, 4);
    TeacherOptions opts;
    opts.dims.in_dim = opts.dims.out_dim = 1;
    Rng rng(6);
    EXPECT_THROW(train_teacher(DiffusionSpec{}, m, 1, rng, opts), ConfigError);
    opts.dims.in_dim = opts.dims.out_dim = 2;
    opts.dims.num_classes = 2;
    EXPECT_THROW(train_teacher(DiffusionSpec{}, m, 1, rng, opts), ConfigError);
}

TEST(Diffusion, GuidanceExtrapolatesConditionalPrediction) {
    // With a predictor that returns label-dependent constants the guided
    // step is uncond + w (cond - uncond).
    DiffusionSpec spec;
    auto predict = [](const Value& x, std::span<const double>, std::span<const int> labels) {
        std::vector<double> out(x.size(), labels.empty() || labels[0] == kNoLabel ? 0.0 : 1.0);
        return Value::constant(x.shape(), out);
    };
    Rng r1(7), r2(7);
    const std::vector<int> labels{0};
    const Value plain = teacher_sample(spec, predict, 1, 1, 1, r1, labels, 1.0);
    const Value guided = teacher_sample(spec, predict, 1, 1, 1, r2, labels, 3.0);
    const double step = spec.t_floor - 1.0;
    EXPECT_NEAR(guided[0] - plain[0], (3.0 - 1.0) * step, 1e-12);
}
