#pragma once

// Few-step distribution-matching distillation.
//
// The generator G maps (x_{t_k}, t_k, label) to a clean-sample estimate x0_hat.
// Its training inputs come from backward simulation: start at pure noise, run
// G gradient-free down the student grid, and renoise between steps.
//
// Two score estimators look at renoised generator samples x_t:
//   real: frozen teacher + low-rank adapters at scale lambda (guidance)
//   fake: tracks the generator distribution via the ordinary diffusion loss
// The generator descends 0.5 * ||x0_hat - sg(x0_hat + delta)||^2 with
//   delta = w(t) (s_real - s_fake) / (mean |w(t) (s_real - s_fake)| + eps),
// whose gradient with respect to each row of x0_hat is -delta / batch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmdrlab/diffusion.hpp"
#include "dmdrlab/errors.hpp"
#include "dmdrlab/nets.hpp"
#include "dmdrlab/numcore.hpp"
#include "dmdrlab/rng.hpp"
#include "dmdrlab/schedules.hpp"

namespace dmdrlab {

enum class WeightMode { unit, sigma_sq };
enum class FakeTraining { all, adapters_only };
enum class GeneratorInit { teacher, fresh };
// Fake-estimator training data: final K-step samples, or generator outputs at
// uniformly drawn levels (the generator's own training distribution).
enum class FakeSamples { final_output, all_levels };

struct DistillConfig {
    std::size_t batch = 128;
    std::size_t fake_updates_per_gen = 5;
    std::size_t adapter_rank = 8;
    WeightMode weight_mode = WeightMode::sigma_sq;
    double normalizer_eps = 1e-8;
    // Renoise with the generator's implied noise instead of fresh noise.
    bool deterministic_renoise = false;
    // Real and fake estimators share one adapter set.
    bool shared_adapters = false;
    FakeTraining fake_training = FakeTraining::all;
    GeneratorInit generator_init = GeneratorInit::teacher;
    FakeSamples fake_samples = FakeSamples::final_output;
    AdamConfig generator_adam{3e-5, 0.0, 0.99, 1e-8};
    AdamConfig fake_adam{3e-4, 0.0, 0.99, 1e-8};
    AdamConfig real_adapter_adam{3e-4, 0.0, 0.99, 1e-8};

    friend bool operator==(const DistillConfig&, const DistillConfig&) = default;

    void validate() const {
        if (batch == 0) {
            throw ConfigError("distill batch must be positive");
        }
        if (fake_updates_per_gen == 0) {
            throw ConfigError("fake_updates_per_gen must be >= 1");
        }
        if (adapter_rank == 0) {
            throw ConfigError("adapter rank must be positive");
        }
        if (!(normalizer_eps > 0.0)) {
            throw ConfigError("normalizer_eps must be positive");
        }
        for (const auto* a : {&generator_adam, &fake_adam, &real_adapter_adam}) {
            if (!(a->lr > 0.0)) {
                throw ConfigError("learning rates must be positive");
            }
        }
    }
};

struct DistillState {
    DiffusionSpec spec;
    DistillConfig config;
    // Class prior for label draws; empty means unconditional.
    std::vector<double> class_prior;

    NetParams generator;
    AdamState generator_opt;
    NetParams fake_est;
    AdamState fake_opt;
    NetParams real_est;
    AdamState real_opt;
    std::uint64_t real_base_checksum = 0;

    std::size_t dim() const { return generator.dims.in_dim; }

    void verify_real_base() const {
        if (checksum(real_est.base_parameters()) != real_base_checksum) {
            throw ContractError("real estimator base weights changed");
        }
    }
};

// The generator reads its clean estimate through the parameterization; under
// noise prediction that divides by the signal coefficient at the first grid time.
inline bool generator_signal_vanishes(const DiffusionSpec& spec) {
    return spec.kind == Parameterization::noise_pred && spec.signal(spec.grid_time(spec.steps())) < 1e-3;
}

// The generator is a denoiser read in the teacher's parameterization, started
// from the teacher's weights or a fresh init. Fake and real estimators start
// as copies of the teacher carrying rank-r adapters; the real estimator's base
// is frozen.
inline DistillState make_distill_state(const DiffusionSpec& spec, const NetParams& teacher, const DistillConfig& cfg,
                                       std::vector<double> class_prior, Rng& rng) {
    spec.validate();
    cfg.validate();
    if (generator_signal_vanishes(spec)) {
        throw ConfigError("make_distill_state: signal vanishes at t = " + std::to_string(spec.grid_time(spec.steps())));
    }
    DistillState st;
    st.spec = spec;
    st.config = cfg;
    st.class_prior = std::move(class_prior);
    st.generator = cfg.generator_init == GeneratorInit::teacher ? clone_params(teacher) : net_init(rng, teacher.dims);
    st.generator_opt = AdamState(st.generator, cfg.generator_adam);

    st.fake_est = clone_params(teacher);
    attach_adapters(st.fake_est, cfg.adapter_rank, rng);
    st.fake_est.adapter_scale = 1.0;
    if (cfg.fake_training == FakeTraining::adapters_only) {
        st.fake_est.set_base_trainable(false);
    }
    st.fake_opt = AdamState(st.fake_est, cfg.fake_adam);

    st.real_est = clone_params(teacher);
    if (cfg.shared_adapters) {
        st.real_est.adapters = st.fake_est.adapters;
        st.real_est.adapter_rank = cfg.adapter_rank;
    } else {
        attach_adapters(st.real_est, cfg.adapter_rank, rng);
    }
    st.real_est.adapter_scale = 0.0;
    st.real_est.set_base_trainable(false);
    st.real_opt = AdamState(st.real_est, cfg.real_adapter_adam);
    st.real_base_checksum = checksum(st.real_est.base_parameters());
    return st;
}

inline std::vector<int> draw_labels(const DistillState& st, std::size_t n, Rng& rng) {
    if (st.class_prior.empty()) {
        return {};
    }
    std::vector<std::size_t> all(st.class_prior.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    std::vector<int> labels(n);
    for (auto& l : labels) {
        l = static_cast<int>(detail::pick_weighted(rng, st.class_prior, all));
    }
    return labels;
}

inline Value draw_noise(const DistillState& st, std::size_t n, Rng& rng) { return randn(rng, {n, st.dim()}); }

namespace detail {

// x at t_next from the clean estimate at t_cur.
inline Value renoise(const DistillState& st, const Value& x0_hat, const Value& x_cur, double t_cur, double t_next,
                     Rng& rng) {
    const DiffusionSpec& s = st.spec;
    if (st.config.deterministic_renoise) {
        const Value eps_hat = scale(sub(x_cur, scale(x0_hat, s.signal(t_cur))), 1.0 / s.noise(t_cur));
        return add(scale(x0_hat, s.signal(t_next)), scale(eps_hat, s.noise(t_next)));
    }
    return forward_diffuse(s, x0_hat, randn(rng, x0_hat.shape()), t_next);
}

}  // namespace detail

// Gradient-free simulation from z at t_K down to t_{k_i} for each row i
// (k in [1, K]). Returns the state at each row's own level.
inline Value backward_simulate(const DistillState& st, const Value& z, std::span<const std::size_t> ks, Rng& rng,
                               std::span<const int> labels = {}) {
    const std::size_t K = st.spec.steps(), n = z.rows(), d = z.cols();
    if (ks.size() != n) {
        throw DimensionError("backward_simulate: " + std::to_string(ks.size()) + " levels for " + std::to_string(n) +
                             " rows");
    }
    std::size_t k_min = K;
    for (std::size_t k : ks) {
        if (k < 1 || k > K) {
            throw ContractError("backward_simulate: level " + std::to_string(k) + " outside [1, " +
                                std::to_string(K) + "]");
        }
        k_min = std::min(k_min, k);
    }
    NoGradGuard no_grad;
    std::vector<double> out(z.data().begin(), z.data().end());
    Value x = detach(z);
    for (std::size_t j = K; j > k_min; --j) {
        const double t = st.spec.grid_time(j), t_next = st.spec.grid_time(j - 1);
        const Value x0_hat = denoise_x0(st.spec, st.generator, x, t, labels);
        x = detail::renoise(st, x0_hat, x, t, t_next, rng);
        for (std::size_t i = 0; i < n; ++i) {
            if (ks[i] == j - 1) {
                std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                            out.begin() + static_cast<std::ptrdiff_t>(i * d));
            }
        }
    }
    return Value::constant({n, d}, std::move(out));
}

inline Value backward_simulate(const DistillState& st, const Value& z, std::size_t k, Rng& rng,
                               std::span<const int> labels = {}) {
    const std::vector<std::size_t> ks(z.rows(), k);
    return backward_simulate(st, z, ks, rng, labels);
}

struct GeneratorBatch {
    Value x0_hat;  // carries gradient to the generator
    std::vector<std::size_t> levels;
    std::vector<double> times;
};

// One uniformly drawn level per row, backward simulation to it, then a single
// generator pass with gradient.
inline GeneratorBatch generate_for_training(const DistillState& st, const Value& z, Rng& rng,
                                            std::span<const int> labels = {}) {
    const std::size_t n = z.rows(), K = st.spec.steps();
    GeneratorBatch b;
    b.levels.resize(n);
    b.times.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        b.levels[i] = 1 + static_cast<std::size_t>(rng.below(K));
        b.times[i] = st.spec.grid_time(b.levels[i]);
    }
    const Value x_k = backward_simulate(st, z, b.levels, rng, labels);
    b.x0_hat = denoise_x0(st.spec, st.generator, x_k, b.times, labels);
    return b;
}

// Full K-step student sampling, gradient-free.
inline Value student_sample(const DistillState& st, const Value& z, Rng& rng, std::span<const int> labels = {}) {
    NoGradGuard no_grad;
    const std::size_t K = st.spec.steps();
    Value x = detach(z);
    for (std::size_t j = K; j >= 1; --j) {
        const double t = st.spec.grid_time(j);
        const Value x0_hat = denoise_x0(st.spec, st.generator, x, t, labels);
        if (j == 1) {
            return x0_hat;
        }
        x = detail::renoise(st, x0_hat, x, t, st.spec.grid_time(j - 1), rng);
    }
    return x;
}

inline Value student_sample(const DistillState& st, std::size_t n, Rng& rng, std::span<const int> labels = {}) {
    return student_sample(st, draw_noise(st, n, rng), rng, labels);
}

struct DmdTerms {
    Value surrogate;
    Value delta;  // [B x d], constant
    std::vector<double> times;
    double normalizer = 0.0;
    double lambda = 0.0;
};

// Distribution-matching surrogate on a batch of generator outputs. Renoise
// levels come from the biased sampler; the real estimator runs at the current
// guidance scale.
inline DmdTerms dmd_surrogate(DistillState& st, const Value& x0_hat, std::span<const int> labels,
                              const ScheduleState& sched, Rng& rng) {
    const std::size_t n = x0_hat.rows(), d = x0_hat.cols();
    if (n == 0) {
        throw ContractError("dmd_surrogate: empty batch");
    }
    DmdTerms out;
    out.lambda = dynadg_scale(sched);
    out.times.resize(n);
    for (double& t : out.times) {
        t = dynars_sample_t(sched, rng, st.spec.t_floor);
    }
    std::vector<double> target(n * d);
    {
        NoGradGuard no_grad;
        const Value eps = randn(rng, x0_hat.shape());
        const Value x_t = forward_diffuse(st.spec, detach(x0_hat), eps, out.times);
        st.real_est.adapter_scale = out.lambda;
        const Value s_real = pred_to_score(st.spec, net_forward(st.real_est, x_t, out.times, labels), x_t, out.times);
        const Value s_fake = pred_to_score(st.spec, net_forward(st.fake_est, x_t, out.times, labels), x_t, out.times);
        std::vector<double> w(n, 1.0);
        if (st.config.weight_mode == WeightMode::sigma_sq) {
            for (std::size_t i = 0; i < n; ++i) {
                const double s = st.spec.noise(out.times[i]);
                w[i] = s * s;
            }
        }
        const Value raw = scale_rows(sub(s_real, s_fake), w);
        double total = 0.0;
        for (double v : raw.data()) {
            total += std::abs(v);
        }
        out.normalizer = total / static_cast<double>(n * d) + st.config.normalizer_eps;
        std::vector<double> delta(n * d);
        const auto xd = x0_hat.data();
        for (std::size_t i = 0; i < n * d; ++i) {
            delta[i] = raw.data()[i] / out.normalizer;
            if (!std::isfinite(delta[i])) {
                throw NumericError("dmd_surrogate: non-finite score difference at t = " +
                                   std::to_string(out.times[i / d]) + ", lambda = " + std::to_string(out.lambda));
            }
            target[i] = xd[i] + delta[i];
        }
        out.delta = Value::constant({n, d}, std::move(delta));
    }
    const Value diff = sub(x0_hat, Value::constant({n, d}, std::move(target)));
    out.surrogate = scale(sum(square(diff)), 0.5 / static_cast<double>(n));
    return out;
}

// Fake estimator update on detached generator samples.
inline double fake_estimator_step(DistillState& st, const Value& samples, std::span<const int> labels, Rng& rng) {
    st.fake_est.zero_grads();
    st.fake_est.adapter_scale = 1.0;
    const Value loss = diffusion_loss(st.spec, st.fake_est, detach(samples), labels, rng);
    if (!std::isfinite(loss.item())) {
        throw NumericError("fake estimator loss is not finite");
    }
    backward(loss);
    adam_step(st.fake_est, st.fake_opt,
              st.config.fake_training == FakeTraining::all ? ParamGroup::all : ParamGroup::adapters_only);
    return loss.item();
}

// Adapter-only update of the real estimator at the current guidance scale.
// Skipped (returns 0) once the scale has reached zero.
inline double real_adapter_step(DistillState& st, const Value& samples, std::span<const int> labels,
                                const ScheduleState& sched, Rng& rng) {
    const double lambda = dynadg_scale(sched);
    if (lambda == 0.0) {
        return 0.0;
    }
    st.real_est.zero_grads();
    st.real_est.adapter_scale = lambda;
    const Value loss = diffusion_loss(st.spec, st.real_est, detach(samples), labels, rng);
    if (!std::isfinite(loss.item())) {
        throw NumericError("real adapter loss is not finite at lambda = " + std::to_string(lambda));
    }
    backward(loss);
    adam_step(st.real_est, st.real_opt, ParamGroup::adapters_only);
    st.verify_real_base();
    return loss.item();
}

// Samples used to train the estimators, without gradient.
inline Value estimator_batch(const DistillState& st, const Value& z, Rng& rng, std::span<const int> labels) {
    NoGradGuard no_grad;
    if (st.config.fake_samples == FakeSamples::final_output) {
        return student_sample(st, z, rng, labels);
    }
    return detach(generate_for_training(st, z, rng, labels).x0_hat);
}

}  // namespace dmdrlab
