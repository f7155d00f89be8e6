#include <gtest/gtest.h>

#include <cmath>

#include "dmdrlab/distill.hpp"

using namespace dmdrlab;

namespace {

NetParams small_teacher(Rng& rng, std::size_t classes = 0) {
    NetDims d;
    d.in_dim = d.out_dim = 2;
    d.hidden_dim = 16;
    d.depth = 3;
    d.time_embed_dim = 8;
    d.num_classes = classes;
    return net_init(rng, d);
}

DistillState make_state(Rng& rng, DistillConfig cfg = {}, DiffusionSpec spec = {}) {
    cfg.batch = 16;
    cfg.adapter_rank = 4;
    return make_distill_state(spec, small_teacher(rng), cfg, {}, rng);
}

void perturb(const std::vector<Value>& params, Rng& rng, double sd) {
    for (auto p : params) {
        for (double& x : p.data()) {
            x += sd * rng.normal();
        }
    }
}

}  // namespace

TEST(Distill, SurrogateGradientIsMinusDeltaOverBatch) {
    Rng rng(1);
    DistillState st = make_state(rng);
    perturb(st.fake_est.base_parameters(), rng, 0.2);
    const std::size_t n = 16;
    const Value init = randn(rng, {n, 2});
    Value x0 = Value::parameter({n, 2}, {init.data().begin(), init.data().end()});
    ScheduleState sched;
    sched.iter = 500;
    const DmdTerms terms = dmd_surrogate(st, x0, {}, sched, rng);
    backward(terms.surrogate);
    double half_sq = 0.0;
    for (std::size_t i = 0; i < n * 2; ++i) {
        EXPECT_NEAR(x0.grad()[i], -terms.delta[i] / static_cast<double>(n), 1e-15);
        half_sq += 0.5 * terms.delta[i] * terms.delta[i];
    }
    EXPECT_NEAR(terms.surrogate.item(), half_sq / static_cast<double>(n), 1e-12);
}

TEST(Distill, DeltaIsNormalizedToUnitMeanAbs) {
    Rng rng(2);
    DistillState st = make_state(rng);
    perturb(st.fake_est.base_parameters(), rng, 0.2);
    const Value x0 = randn(rng, {32, 2});
    const DmdTerms terms = dmd_surrogate(st, x0, {}, ScheduleState{}, rng);
    double total = 0.0;
    for (double d : terms.delta.data()) {
        total += std::abs(d);
    }
    EXPECT_NEAR(total / 64.0, 1.0, 1e-6);
    EXPECT_EQ(terms.times.size(), 32u);
    for (double t : terms.times) {
        EXPECT_GT(t, st.spec.t_floor);
        EXPECT_LE(t, 1.0);
    }
}

TEST(Distill, MatchedEstimatorsGiveZeroUpdate) {
    // Fresh fake adapters are zero and lambda = 0 turns the real ones off, so
    // both estimators are the teacher and the score difference vanishes.
    Rng rng(3);
    DistillState st = make_state(rng);
    ScheduleState sched;
    sched.dynadg_enabled = false;
    const DmdTerms terms = dmd_surrogate(st, randn(rng, {8, 2}), {}, sched, rng);
    for (double d : terms.delta.data()) {
        EXPECT_EQ(d, 0.0);
    }
    EXPECT_EQ(terms.surrogate.item(), 0.0);
}

TEST(Distill, SigmaSquaredWeightingScalesRawDifferenceBeforeNormalizing) {
    Rng base(4);
    DistillConfig unit_cfg;
    unit_cfg.weight_mode = WeightMode::unit;
    DistillConfig sig_cfg;
    sig_cfg.weight_mode = WeightMode::sigma_sq;
    Rng r1 = base, r2 = base;
    DistillState a = make_state(r1, unit_cfg);
    DistillState b = make_state(r2, sig_cfg);
    perturb(a.fake_est.base_parameters(), r1, 0.2);
    perturb(b.fake_est.base_parameters(), r2, 0.2);
    const Value x0 = randn(r1, {8, 2});
    (void)randn(r2, {8, 2});
    const DmdTerms ta = dmd_surrogate(a, x0, {}, ScheduleState{}, r1);
    const DmdTerms tb = dmd_surrogate(b, x0, {}, ScheduleState{}, r2);
    ASSERT_EQ(ta.times, tb.times);
    for (std::size_t i = 0; i < 8; ++i) {
        const double s2 = std::pow(a.spec.noise(ta.times[i]), 2);
        for (std::size_t j = 0; j < 2; ++j) {
            const double raw_a = ta.delta.at(i, j) * ta.normalizer;
            const double raw_b = tb.delta.at(i, j) * tb.normalizer;
            EXPECT_NEAR(raw_b, s2 * raw_a, 1e-9 * (1.0 + std::abs(raw_a)));
        }
    }
}

TEST(Distill, GeneratorStartsAsTeacherOrFresh) {
    Rng rng(5);
    const NetParams teacher = small_teacher(rng);
    DistillConfig cfg;
    cfg.adapter_rank = 4;
    const auto st = make_distill_state(DiffusionSpec{}, teacher, cfg, {}, rng);
    EXPECT_EQ(checksum(st.generator.all_parameters()), checksum(teacher.all_parameters()));
    EXPECT_FALSE(st.generator.layers[0].weight.same_node(teacher.layers[0].weight));
    cfg.generator_init = GeneratorInit::fresh;
    const auto fresh = make_distill_state(DiffusionSpec{}, teacher, cfg, {}, rng);
    EXPECT_NE(checksum(fresh.generator.all_parameters()), checksum(teacher.all_parameters()));
}

TEST(Distill, NoisePredictionGridMustStartBelowOne) {
    Rng rng(6);
    DiffusionSpec spec;
    spec.kind = Parameterization::noise_pred;
    spec.step_grid = {1.0, 0.5};
    EXPECT_TRUE(generator_signal_vanishes(spec));
    EXPECT_THROW(make_state(rng, {}, spec), ConfigError);
    spec.step_grid = {0.98, 0.5};
    EXPECT_FALSE(generator_signal_vanishes(spec));
    EXPECT_NO_THROW(make_state(rng, {}, spec));
    spec.kind = Parameterization::velocity;
    spec.step_grid = {1.0, 0.5};
    EXPECT_FALSE(generator_signal_vanishes(spec));
}

TEST(Distill, BackwardSimulationLevels) {
    Rng rng(7);
    const DistillState st = make_state(rng);
    const Value z = randn(rng, {4, 2});
    const std::vector<std::size_t> top(4, st.spec.steps());
    const Value same = backward_simulate(st, z, top, rng);
    EXPECT_TRUE(std::equal(z.data().begin(), z.data().end(), same.data().begin()));
    // Rows simulated to different levels agree with a run to that level alone.
    Rng a(70), b(70);
    const std::vector<std::size_t> mixed{4, 3, 2, 1};
    const Value xm = backward_simulate(st, z, mixed, a);
    const Value x1 = backward_simulate(st, z, 1, b);
    EXPECT_EQ(xm.at(3, 0), x1.at(3, 0));
    EXPECT_EQ(xm.at(0, 1), z.at(0, 1));
    const std::vector<std::size_t> bad{0, 1, 1, 1};
    EXPECT_THROW(backward_simulate(st, z, bad, rng), ContractError);
    EXPECT_THROW(backward_simulate(st, z, std::vector<std::size_t>{1}, rng), DimensionError);
}

TEST(Distill, OneStepStudentIsTheDenoiserAtTopLevel) {
    Rng rng(8);
    DiffusionSpec spec;
    spec.step_grid = {1.0};
    DistillState st = make_state(rng, {}, spec);
    const Value z = randn(rng, {5, 2});
    Rng r(1);
    const Value out = student_sample(st, z, r);
    const Value direct = denoise_x0(spec, st.generator, z, 1.0);
    EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), direct.data().begin()));
}

TEST(Distill, DeterministicRenoiseUsesNoRandomness) {
    Rng rng(9);
    DistillConfig cfg;
    cfg.deterministic_renoise = true;
    const DistillState st = make_state(rng, cfg);
    const Value z = randn(rng, {3, 2});
    Rng r(2);
    const auto before = r.draws();
    (void)student_sample(st, z, r);
    EXPECT_EQ(r.draws(), before);
}

TEST(Distill, EstimatorBatchSources) {
    Rng rng(10);
    DistillState st = make_state(rng);
    const Value z = randn(rng, {6, 2});
    Rng a(3), b(3);
    const Value est = estimator_batch(st, z, a, {});
    const Value fin = student_sample(st, z, b);
    EXPECT_TRUE(std::equal(est.data().begin(), est.data().end(), fin.data().begin()));
    st.config.fake_samples = FakeSamples::all_levels;
    Rng c(3), d(3);
    const Value lv = estimator_batch(st, z, c, {});
    const Value gen = generate_for_training(st, z, d).x0_hat;
    EXPECT_TRUE(std::equal(lv.data().begin(), lv.data().end(), gen.data().begin()));
}

TEST(Distill, RealBaseStaysFrozenAndZeroScaleSkipsAdapters) {
    Rng rng(11);
    DistillState st = make_state(rng);
    const Value samples = randn(rng, {16, 2});
    ScheduleState sched;
    const auto adapters_before = checksum(st.real_est.adapter_parameters());
    EXPECT_GT(real_adapter_step(st, samples, {}, sched, rng), 0.0);
    EXPECT_NO_THROW(st.verify_real_base());
    EXPECT_NE(checksum(st.real_est.adapter_parameters()), adapters_before);
    sched.iter = sched.dynadg_horizon;
    const auto after = checksum(st.real_est.adapter_parameters());
    EXPECT_EQ(real_adapter_step(st, samples, {}, sched, rng), 0.0);
    EXPECT_EQ(checksum(st.real_est.adapter_parameters()), after);
    st.real_est.layers[0].weight.data()[0] += 1e-9;
    EXPECT_THROW(st.verify_real_base(), ContractError);
}

TEST(Distill, FakeStepTrainsAllOrAdaptersOnly) {
    Rng rng(12);
    DistillState st = make_state(rng);
    const Value samples = randn(rng, {16, 2});
    const auto base_before = checksum(st.fake_est.base_parameters());
    fake_estimator_step(st, samples, {}, rng);
    EXPECT_NE(checksum(st.fake_est.base_parameters()), base_before);

    DistillConfig cfg;
    cfg.fake_training = FakeTraining::adapters_only;
    DistillState only = make_state(rng, cfg);
    const auto frozen = checksum(only.fake_est.base_parameters());
    fake_estimator_step(only, samples, {}, rng);
    EXPECT_EQ(checksum(only.fake_est.base_parameters()), frozen);
}

TEST(Distill, SharedAdaptersAliasTheFakeSet) {
    Rng rng(13);
    DistillConfig cfg;
    cfg.shared_adapters = true;
    const DistillState st = make_state(rng, cfg);
    ASSERT_TRUE(st.real_est.adapters[0].has_value());
    EXPECT_TRUE(st.real_est.adapters[0]->down.same_node(st.fake_est.adapters[0]->down));
}

TEST(Distill, LabelsFollowClassPrior) {
    Rng rng(14);
    DistillConfig cfg;
    cfg.adapter_rank = 4;
    const auto st = make_distill_state(DiffusionSpec{}, small_teacher(rng, 2), cfg, {0.25, 0.75}, rng);
    const auto labels = draw_labels(st, 8000, rng);
    double ones = 0.0;
    for (int l : labels) {
        ones += l;
    }
    EXPECT_NEAR(ones / 8000.0, 0.75, 0.02);
    const auto none = make_state(rng);
    EXPECT_TRUE(draw_labels(none, 10, rng).empty());
}

TEST(Distill, ConfigValidation) {
    DistillConfig c;
    c.batch = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.fake_updates_per_gen = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.generator_adam.lr = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
}
