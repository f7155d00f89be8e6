#include <gtest/gtest.h>

#include <cmath>

#include "dmdrlab/schedules.hpp"
#include "support/oracles.hpp"

using namespace dmdrlab;

namespace {

ScheduleState state(ScheduleShape shape, long horizon = 500) {
    ScheduleState s;
    s.shape = shape;
    s.lambda0 = 0.7;
    s.kappa0 = 4.0;
    s.dynadg_horizon = s.dynars_horizon = horizon;
    return s;
}

}  // namespace

class Shapes : public ::testing::TestWithParam<ScheduleShape> {};

TEST_P(Shapes, GuidanceDecaysMonotonicallyToExactZero) {
    ScheduleState s = state(GetParam());
    double prev = 0.7;
    for (long it = 0; it <= 1000; ++it) {
        s.iter = it;
        const double v = dynadg_scale(s);
        ASSERT_LE(v, prev) << "iter " << it;
        ASSERT_GE(v, 0.0);
        if (it >= 500) {
            ASSERT_EQ(v, 0.0) << "iter " << it;
        } else {
            ASSERT_GT(v, 0.0) << "iter " << it;
        }
        prev = v;
    }
    s.iter = 0;
    EXPECT_EQ(dynadg_scale(s), 0.7);
}

TEST_P(Shapes, KappaDecaysMonotonicallyToExactZero) {
    ScheduleState s = state(GetParam());
    double prev = 4.0;
    for (long it = 0; it <= 1000; ++it) {
        s.iter = it;
        const double k = dynars_kappa(s);
        ASSERT_LE(k, prev);
        if (it >= 500) {
            ASSERT_EQ(k, 0.0);
        }
        prev = k;
    }
}

TEST_P(Shapes, HalfwayValues) {
    ScheduleState s = state(GetParam());
    s.iter = 250;
    // Both shapes pass through half strength at the midpoint.
    EXPECT_NEAR(dynadg_scale(s), 0.35, 1e-12);
    EXPECT_NEAR(dynars_kappa(s), 2.0, 1e-12);
    s.iter = 125;
    const double expect = GetParam() == ScheduleShape::linear ? 0.75 : 0.5 * (1.0 + std::cos(std::numbers::pi / 4));
    EXPECT_NEAR(dynadg_scale(s), 0.7 * expect, 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Both, Shapes, ::testing::Values(ScheduleShape::linear, ScheduleShape::cosine));

TEST(Schedules, SeparateHorizons) {
    ScheduleState s = state(ScheduleShape::linear);
    s.dynars_horizon = 100;
    s.iter = 100;
    EXPECT_EQ(dynars_kappa(s), 0.0);
    EXPECT_NEAR(dynadg_scale(s), 0.7 * 0.8, 1e-12);
}

TEST(Schedules, FrozenKeepsInitialStrength) {
    ScheduleState s = state(ScheduleShape::cosine);
    s.frozen = true;
    s.iter = 10000;
    EXPECT_EQ(dynadg_scale(s), 0.7);
    EXPECT_EQ(dynars_kappa(s), 4.0);
}

TEST(Schedules, DisabledIsZero) {
    ScheduleState s = state(ScheduleShape::linear);
    s.dynadg_enabled = false;
    s.dynars_enabled = false;
    EXPECT_EQ(dynadg_scale(s), 0.0);
    EXPECT_EQ(dynars_kappa(s), 0.0);
}

TEST(Schedules, NegativeIterationCountsAsStart) {
    ScheduleState s = state(ScheduleShape::linear);
    s.iter = -5;
    EXPECT_EQ(dynadg_scale(s), 0.7);
}

TEST(Schedules, Validation) {
    ScheduleState s;
    s.lambda0 = -0.1;
    EXPECT_THROW(s.validate(), ConfigError);
    s = {};
    s.dynars_horizon = 0;
    EXPECT_THROW(s.validate(), ConfigError);
    EXPECT_NO_THROW(ScheduleState{}.validate());
}

TEST(Renoise, BiasedTimeIsMonotoneInDrawAndBounded) {
    for (double kappa : {0.0, 0.5, 3.0}) {
        double prev = 0.0;
        for (int i = 1; i <= 100; ++i) {
            const double t = biased_renoise_time(i / 100.0, kappa, 0.02);
            ASSERT_GT(t, 0.02);
            ASSERT_LE(t, 1.0);
            ASSERT_GE(t, prev);
            prev = t;
        }
        EXPECT_EQ(biased_renoise_time(1.0, kappa, 0.02), 1.0);
    }
}

// After the horizon, renoise levels are uniform on (t_floor, 1].
TEST(Renoise, UniformAfterHorizon) {
    ScheduleState s = state(ScheduleShape::cosine);
    s.iter = 500;
    Rng rng(17);
    const double floor = 0.02;
    oracle::Vec u(100000);
    for (double& x : u) {
        x = (dynars_sample_t(s, rng, floor) - floor) / (1.0 - floor);
    }
    EXPECT_LT(oracle::ks_uniform(u), 0.01);
}

// At iteration 0 the density is (1+k) t^k on (0, 1], with mean (1+k)/(2+k)
// and variance (1+k)/((3+k)(2+k)^2).
TEST(Renoise, MeanAtStartMatchesPowerLaw) {
    for (double k : {1.0, 4.0}) {
        ScheduleState s = state(ScheduleShape::linear);
        s.kappa0 = k;
        Rng rng(23);
        const std::size_t n = 100000;
        oracle::Vec t(n);
        for (double& x : t) {
            x = dynars_sample_t(s, rng, 0.0);
        }
        const double mu = (1.0 + k) / (2.0 + k);
        const double var = (1.0 + k) / ((3.0 + k) * (2.0 + k) * (2.0 + k));
        EXPECT_NEAR(oracle::mean(t), mu, 3.0 * std::sqrt(var / n)) << "kappa " << k;
        EXPECT_NEAR(oracle::variance(t), var, 0.02 * var) << "kappa " << k;
        // The CDF t^(1+k) turns t^(1+k) into a uniform draw.
        for (double& x : t) {
            x = std::pow(x, 1.0 + k);
        }
        EXPECT_LT(oracle::ks_uniform(t), 0.01) << "kappa " << k;
    }
}
