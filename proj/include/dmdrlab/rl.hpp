#pragma once

// Reward models and the three RL objectives used to tilt the generator:
// reward feedback (ReFL), pairwise preference (DPO) and group-relative policy
// optimization (GRPO). combined_step runs one joint iteration of estimator
// updates plus a generator update on the distribution-matching surrogate and
// the weighted RL loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmdrlab/diffusion.hpp"
#include "dmdrlab/distill.hpp"
#include "dmdrlab/errors.hpp"
#include "dmdrlab/metrics.hpp"
#include "dmdrlab/nets.hpp"
#include "dmdrlab/numcore.hpp"
#include "dmdrlab/rng.hpp"
#include "dmdrlab/schedules.hpp"

namespace dmdrlab {

// ---------------------------------------------------------------------------
// Rewards

enum class RewardKind { region_rbf, alignment_rbf };

// region_rbf:    r(x)    = exp(-||x - c_0||^2 / (2 tau^2))
// alignment_rbf: r(x, l) = exp(-||x - c_l||^2 / (2 tau^2))
// An optional probe vector v adds the linear term <v, x>, which a policy can
// exploit without approaching any center.
struct RewardSpec {
    RewardKind kind = RewardKind::region_rbf;
    std::vector<std::vector<double>> centers;
    double bandwidth = 1.0;
    std::vector<double> hack_probe;

    friend bool operator==(const RewardSpec&, const RewardSpec&) = default;

    void validate(std::size_t dim) const {
        if (centers.empty()) {
            throw ConfigError("reward needs at least one center");
        }
        for (const auto& c : centers) {
            if (c.size() != dim) {
                throw ConfigError("reward center dimension " + std::to_string(c.size()) + " != " +
                                  std::to_string(dim));
            }
        }
        if (kind == RewardKind::region_rbf && centers.size() != 1) {
            throw ConfigError("region_rbf takes exactly one center");
        }
        if (!(bandwidth > 0.0)) {
            throw ConfigError("reward bandwidth must be positive");
        }
        if (!hack_probe.empty() && hack_probe.size() != dim) {
            throw ConfigError("hack probe dimension mismatch");
        }
    }
};

// Per-row reward, [B x 1], differentiable in x.
inline Value reward(const RewardSpec& spec, const Value& x, std::span<const int> labels = {}) {
    if (x.rank() != 2) {
        throw DimensionError("reward: expected [B x d], got " + shape_str(x.shape()));
    }
    const std::size_t n = x.rows(), d = x.cols();
    spec.validate(d);
    std::vector<double> c(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t which = 0;
        if (spec.kind == RewardKind::alignment_rbf) {
            if (labels.size() != n || labels[i] == kNoLabel) {
                throw ContractError("reward: alignment reward needs one label per row");
            }
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= spec.centers.size()) {
                throw ContractError("reward: label " + std::to_string(labels[i]) + " has no center");
            }
            which = static_cast<std::size_t>(labels[i]);
        }
        std::copy(spec.centers[which].begin(), spec.centers[which].end(),
                  c.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const Value dist2 = row_sum(square(sub(x, Value::constant({n, d}, std::move(c)))));
    Value r = exp(scale(dist2, -0.5 / (spec.bandwidth * spec.bandwidth)));
    if (!spec.hack_probe.empty()) {
        r = add(r, matmul(x, Value::constant({d, 1}, spec.hack_probe)));
    }
    return r;
}

inline std::vector<double> reward_values(const RewardSpec& spec, const Value& x, std::span<const int> labels = {}) {
    NoGradGuard no_grad;
    const Value r = reward(spec, x, labels);
    return {r.data().begin(), r.data().end()};
}

// ---------------------------------------------------------------------------
// ReFL

// Negative mean reward of generator outputs; gradient flows through x0_hat.
inline Value refl_loss(const RewardSpec& spec, const Value& x0_hat, std::span<const int> labels = {}) {
    return neg(mean(reward(spec, x0_hat, labels)));
}

// ---------------------------------------------------------------------------
// DPO

struct DpoResult {
    Value loss;
    std::size_t pairs = 0;
    std::size_t ties = 0;
};

namespace detail {

// Per-row ||net(F_t(x, eps), t) - x||^2 with t and eps shared across calls.
inline Value x0_errors(const DiffusionSpec& spec, const NetParams& net, const Value& x, const Value& eps,
                       std::span<const double> t, std::span<const int> labels) {
    const Value x_t = forward_diffuse(spec, x, eps, t);
    return row_sum(square(sub(denoise_x0(spec, net, x_t, t, labels), x)));
}

}  // namespace detail

// Preference loss on fixed winner/loser rows, noise and levels.
inline Value dpo_pair_loss(const DiffusionSpec& spec, const NetParams& net, const NetParams& reference,
                           const Value& xw, const Value& xl, const Value& eps, std::span<const double> t,
                           std::span<const int> labels, double beta) {
    Value ref_w, ref_l;
    {
        NoGradGuard no_grad;
        ref_w = detail::x0_errors(spec, reference, xw, eps, t, labels);
        ref_l = detail::x0_errors(spec, reference, xl, eps, t, labels);
    }
    const Value ew = detail::x0_errors(spec, net, xw, eps, t, labels);
    const Value el = detail::x0_errors(spec, net, xl, eps, t, labels);
    const Value margin = sub(sub(ew, ref_w), sub(el, ref_l));
    return mean(softplus(scale(margin, beta)));
}

// Two student samples per condition, ranked by reward (ties dropped). With
// e = ||G(F_t(x, eps), t) - x||^2 at a shared grid level t and noise eps,
//   loss = mean softplus(beta [(e_w - e_ref,w) - (e_l - e_ref,l)]),
// i.e. -log sigmoid of the negated preference margin. With no usable pairs
// the loss is a constant zero.
inline DpoResult dpo_loss(const DistillState& st, const RewardSpec& spec, const NetParams& reference,
                          std::span<const int> labels, std::size_t pairs, double beta, Rng& rng) {
    if (!(beta > 0.0)) {
        throw ConfigError("dpo beta must be positive");
    }
    if (!labels.empty() && labels.size() != pairs) {
        throw DimensionError("dpo_loss: labels must be empty or one per pair");
    }
    if (!congruent(reference, st.generator)) {
        throw ConfigError("dpo_loss: reference architecture differs from the generator");
    }
    DpoResult out;
    const Value a = student_sample(st, pairs, rng, labels);
    const Value b = student_sample(st, pairs, rng, labels);
    const auto ra = reward_values(spec, a, labels), rb = reward_values(spec, b, labels);
    std::vector<int> pair_labels;
    std::vector<double> win, lose;
    const std::size_t d = st.dim();
    for (std::size_t i = 0; i < pairs; ++i) {
        if (ra[i] == rb[i]) {
            ++out.ties;
            continue;
        }
        const Value& w = ra[i] > rb[i] ? a : b;
        const Value& l = ra[i] > rb[i] ? b : a;
        for (std::size_t j = 0; j < d; ++j) {
            win.push_back(w.at(i, j));
            lose.push_back(l.at(i, j));
        }
        if (!labels.empty()) {
            pair_labels.push_back(labels[i]);
        }
    }
    const std::size_t m = win.size() / d;
    out.pairs = m;
    if (m == 0) {
        out.loss = Value::scalar(0.0);
        return out;
    }
    const Value xw = Value::constant({m, d}, std::move(win));
    const Value xl = Value::constant({m, d}, std::move(lose));
    std::vector<double> t(m);
    for (double& ti : t) {
        ti = st.spec.grid_time(1 + static_cast<std::size_t>(rng.below(st.spec.steps())));
    }
    const Value eps = randn(rng, {m, d});
    out.loss = dpo_pair_loss(st.spec, st.generator, reference, xw, xl, eps, t, pair_labels, beta);
    return out;
}

// ---------------------------------------------------------------------------
// GRPO

struct GrpoConfig {
    std::size_t group = 8;
    double clip = 0.2;
    // Transition noise as a fraction of s(t) at the destination level.
    double sigma_frac = 0.1;
    // Log-ratio bound; beyond it the clipped objective is flat anyway.
    double max_log_ratio = 20.0;

    friend bool operator==(const GrpoConfig&, const GrpoConfig&) = default;

    void validate(std::size_t steps) const {
        if (group < 2) {
            throw ConfigError("grpo group size must be >= 2");
        }
        if (!(clip > 0.0 && clip < 1.0)) {
            throw ConfigError("grpo clip must lie in (0, 1)");
        }
        if (!(sigma_frac > 0.0)) {
            throw ConfigError("grpo transition noise must be positive");
        }
        if (steps < 2) {
            throw ConfigError("grpo needs at least two student steps: a one-step generator has no stochastic "
                              "transition to score");
        }
    }
};

// (r - mean) / (population std + 1e-6) within each consecutive group.
inline std::vector<double> grpo_advantages(std::span<const double> rewards, std::size_t group) {
    if (group < 2 || rewards.size() % group != 0) {
        throw ContractError("grpo_advantages: " + std::to_string(rewards.size()) +
                            " rewards do not split into groups of " + std::to_string(group));
    }
    std::vector<double> adv(rewards.size());
    for (std::size_t g0 = 0; g0 < rewards.size(); g0 += group) {
        const auto stats = reward_stats(rewards.subspan(g0, group));
        const double denom = std::sqrt(stats.variance) + 1e-6;
        for (std::size_t i = g0; i < g0 + group; ++i) {
            adv[i] = (rewards[i] - stats.mean) / denom;
        }
    }
    return adv;
}

inline std::vector<double> grpo_advantages(std::span<const double> rewards) {
    return grpo_advantages(rewards, rewards.size());
}

// Stochastic student trajectories: x_K = z, then for j = K..2
//   x_{j-1} ~ N(mu_j(x_j), sigma_j^2 I),
//   mu_j = a_{j-1} x0_hat + s_{j-1} (x_j - a_j x0_hat) / s_j,
//   sigma_j = sigma_frac * s_{j-1},
// and the output is the generator's clean estimate at t_1.
struct Chains {
    std::vector<Value> states;  // x_K, ..., x_1
    Value outputs;
    std::vector<int> labels;
    std::vector<double> rewards;
};

namespace detail {

struct Transition {
    double x0_coeff;
    double x_coeff;
    double sigma;
};

inline Transition transition(const DiffusionSpec& s, std::size_t j, double sigma_frac) {
    const double t = s.grid_time(j), t_prev = s.grid_time(j - 1);
    const double a = s.signal(t), n = s.noise(t), a_prev = s.signal(t_prev), n_prev = s.noise(t_prev);
    return {a_prev - n_prev * a / n, n_prev / n, sigma_frac * n_prev};
}

}  // namespace detail

inline Chains collect_chains(const DiffusionSpec& spec, const NetParams& policy, const RewardSpec& rspec,
                             std::span<const int> labels, std::size_t rows, const GrpoConfig& cfg, Rng& rng) {
    cfg.validate(spec.steps());
    NoGradGuard no_grad;
    Chains c;
    c.labels.assign(labels.begin(), labels.end());
    const std::size_t d = policy.dims.in_dim;
    Value x = randn(rng, {rows, d});
    c.states.push_back(x);
    for (std::size_t j = spec.steps(); j >= 2; --j) {
        const auto tr = detail::transition(spec, j, cfg.sigma_frac);
        const Value x0_hat = denoise_x0(spec, policy, x, spec.grid_time(j), labels);
        const Value mu = add(scale(x0_hat, tr.x0_coeff), scale(x, tr.x_coeff));
        x = add(mu, scale(randn(rng, {rows, d}), tr.sigma));
        c.states.push_back(x);
    }
    c.outputs = denoise_x0(spec, policy, x, spec.grid_time(1), labels);
    c.rewards = reward_values(rspec, c.outputs, labels);
    return c;
}

// Sum over transitions of the Gaussian log-density of each recorded step, [B x 1].
inline Value chain_log_prob(const DiffusionSpec& spec, const NetParams& net, const Chains& c, double sigma_frac) {
    const std::size_t K = spec.steps();
    if (c.states.size() != K) {
        throw ContractError("chain_log_prob: chain length does not match the step grid");
    }
    const std::size_t d = net.dims.in_dim;
    Value total;
    for (std::size_t j = K; j >= 2; --j) {
        const Value& x = c.states[K - j];
        const Value& x_next = c.states[K - j + 1];
        const auto tr = detail::transition(spec, j, sigma_frac);
        const Value x0_hat = denoise_x0(spec, net, x, spec.grid_time(j), c.labels);
        const Value mu = add(scale(x0_hat, tr.x0_coeff), scale(x, tr.x_coeff));
        const double var = tr.sigma * tr.sigma;
        const Value lp = shift(scale(row_sum(square(sub(x_next, mu))), -0.5 / var),
                               -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * var));
        total = total.defined() ? add(total, lp) : lp;
    }
    return total;
}

struct GrpoResult {
    Value loss;
    std::vector<double> rewards;
    std::vector<double> advantages;
    double mean_abs_weighted_advantage = 0.0;
};

// -mean min(rho A, clip(rho, 1 - eps, 1 + eps) A) with rho = exp(lp - old_lp).
inline Value grpo_surrogate(const Value& lp, const Value& old_lp, std::span<const double> advantages,
                            const GrpoConfig& cfg) {
    if (lp.shape() != old_lp.shape() || lp.size() != advantages.size()) {
        throw DimensionError("grpo_surrogate: log-prob and advantage counts differ");
    }
    const Value ratio = exp(clamp(sub(lp, old_lp), -cfg.max_log_ratio, cfg.max_log_ratio));
    const Value adv = Value::constant(lp.shape(), {advantages.begin(), advantages.end()});
    return neg(mean(minimum(mul(ratio, adv), mul(clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv))));
}

// Groups of m chains per condition from the behavior policy (the generator
// itself unless a snapshot is given); clipped-ratio surrogate
//   loss = -mean min(rho A, clip(rho, 1 - eps, 1 + eps) A),
//   rho  = exp(log pi_theta(chain) - log pi_behavior(chain)).
inline GrpoResult grpo_loss(const DistillState& st, const RewardSpec& rspec, const NetParams* behavior,
                            std::span<const int> conditions, std::size_t n_conditions, const GrpoConfig& cfg,
                            Rng& rng) {
    cfg.validate(st.spec.steps());
    if (!conditions.empty() && conditions.size() != n_conditions) {
        throw DimensionError("grpo_loss: conditions must be empty or one per group");
    }
    const NetParams& pi_old = behavior ? *behavior : st.generator;
    const std::size_t m = cfg.group, rows = n_conditions * m;
    std::vector<int> labels;
    for (int c : conditions) {
        labels.insert(labels.end(), m, c);
    }
    const Chains chains = collect_chains(st.spec, pi_old, rspec, labels, rows, cfg, rng);
    GrpoResult out;
    out.rewards = chains.rewards;
    out.advantages = grpo_advantages(chains.rewards, m);
    Value old_lp;
    {
        NoGradGuard no_grad;
        old_lp = chain_log_prob(st.spec, pi_old, chains, cfg.sigma_frac);
    }
    const Value lp = chain_log_prob(st.spec, st.generator, chains, cfg.sigma_frac);
    out.loss = grpo_surrogate(lp, old_lp, out.advantages, cfg);
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        acc += std::abs(std::exp(std::clamp(lp[i] - old_lp[i], -cfg.max_log_ratio, cfg.max_log_ratio)) *
                        out.advantages[i]);
    }
    out.mean_abs_weighted_advantage = acc / static_cast<double>(rows);
    return out;
}

// ---------------------------------------------------------------------------
// Joint training step

enum class RlAlgo { none, refl, dpo, grpo };

inline const char* rl_algo_name(RlAlgo a) {
    switch (a) {
        case RlAlgo::none: return "none";
        case RlAlgo::refl: return "refl";
        case RlAlgo::dpo: return "dpo";
        case RlAlgo::grpo: return "grpo";
    }
    return "unknown";
}

struct RlConfig {
    RlAlgo algo = RlAlgo::none;
    // Unset: chosen once, on the first RL step, so that coeff * |L_rl| equals
    // balance_ratio * |L_dmd|.
    std::optional<double> coeff;
    double balance_ratio = 0.25;
    // Off: RL-only training without the distribution-matching term.
    bool dmd_enabled = true;
    std::size_t batch = 64;
    double dpo_beta = 1.0;
    // DPO reference refresh period in RL steps; 0 keeps the first snapshot.
    long reference_refresh = 0;
    GrpoConfig grpo;
    // GRPO chains come from the reference snapshot instead of the live generator.
    bool grpo_snapshot_behavior = false;

    friend bool operator==(const RlConfig&, const RlConfig&) = default;

    void validate(std::size_t steps) const {
        if (coeff && !(*coeff >= 0.0)) {
            throw ConfigError("rl coefficient must be nonnegative");
        }
        if (algo != RlAlgo::none && batch == 0) {
            throw ConfigError("rl batch must be positive");
        }
        if (algo == RlAlgo::dpo && !(dpo_beta > 0.0)) {
            throw ConfigError("dpo beta must be positive");
        }
        if (algo == RlAlgo::grpo) {
            grpo.validate(steps);
        }
        if (!(balance_ratio > 0.0)) {
            throw ConfigError("balance ratio must be positive");
        }
        if (reference_refresh < 0) {
            throw ConfigError("reference refresh period must be >= 0");
        }
    }
};

// RL-side state carried across iterations.
struct RlRuntime {
    RlConfig config;
    RewardSpec reward;
    // Scores reward statistics even while no RL objective is active.
    bool has_reward = false;
    bool active = false;
    double coeff = 0.0;
    bool balanced = false;
    long steps = 0;
    std::optional<NetParams> reference;
    Rng rng;
};

namespace detail {

inline std::uint64_t estimator_checksum(const DistillState& st) {
    auto params = st.fake_est.all_parameters();
    auto real = st.real_est.all_parameters();
    params.insert(params.end(), real.begin(), real.end());
    return checksum(params);
}

}  // namespace detail

// One joint iteration:
//  1. fake_updates_per_gen rounds of fake-estimator (and, while lambda > 0,
//     real-adapter) updates on fresh gradient-free generator samples;
//  2. one generator update on L_dmd + coeff * L_rl.
// Distillation randomness comes from `rng`; RL randomness from rl->rng, so a
// zero RL coefficient leaves the generator trajectory unchanged.
inline MetricsRecord combined_step(DistillState& st, RlRuntime* rl, const ScheduleState& sched, Rng& rng) {
    MetricsRecord rec;
    rec.iter = sched.iter;
    rec.dynadg_lambda = dynadg_scale(sched);
    rec.dynars_kappa = dynars_kappa(sched);
    const bool rl_on = rl && rl->active && rl->config.algo != RlAlgo::none;
    const bool dmd_on = !rl || rl->config.dmd_enabled;
    rec.phase = rl_on ? Phase::joint : Phase::coldstart;
    const std::size_t n = st.config.batch;

    if (dmd_on) {
        double fake_total = 0.0, real_total = 0.0;
        for (std::size_t i = 0; i < st.config.fake_updates_per_gen; ++i) {
            const auto labels = draw_labels(st, n, rng);
            const Value samples = estimator_batch(st, draw_noise(st, n, rng), rng, labels);
            fake_total += fake_estimator_step(st, samples, labels, rng);
            real_total += real_adapter_step(st, samples, labels, sched, rng);
        }
        rec.l_diff_fake = fake_total / static_cast<double>(st.config.fake_updates_per_gen);
        rec.l_diff_real_adapter = real_total / static_cast<double>(st.config.fake_updates_per_gen);
    }

    const std::uint64_t estimators_before = detail::estimator_checksum(st);
    st.generator.zero_grads();
    const auto labels = draw_labels(st, n, rng);
    const GeneratorBatch batch = generate_for_training(st, draw_noise(st, n, rng), rng, labels);
    Value total;
    if (dmd_on) {
        const DmdTerms dmd = dmd_surrogate(st, batch.x0_hat, labels, sched, rng);
        rec.l_dmd = dmd.surrogate.item();
        total = dmd.surrogate;
    }
    if (rl_on) {
        RlRuntime& r = *rl;
        if (!r.reference || (r.config.reference_refresh > 0 && r.steps > 0 &&
                             r.steps % r.config.reference_refresh == 0)) {
            r.reference = clone_params(st.generator);
        }
        Value l_rl;
        double magnitude = 0.0;
        switch (r.config.algo) {
            case RlAlgo::refl:
                l_rl = refl_loss(r.reward, batch.x0_hat, labels);
                magnitude = std::abs(l_rl.item());
                break;
            case RlAlgo::dpo: {
                const auto dpo_labels = draw_labels(st, r.config.batch, r.rng);
                auto res = dpo_loss(st, r.reward, *r.reference, dpo_labels, r.config.batch, r.config.dpo_beta, r.rng);
                l_rl = res.loss;
                magnitude = std::abs(l_rl.item());
                break;
            }
            case RlAlgo::grpo: {
                const std::size_t groups = std::max<std::size_t>(1, r.config.batch / r.config.grpo.group);
                const auto conds = draw_labels(st, groups, r.rng);
                auto res = grpo_loss(st, r.reward, r.config.grpo_snapshot_behavior ? &*r.reference : nullptr, conds,
                                     groups, r.config.grpo, r.rng);
                l_rl = res.loss;
                // The clipped surrogate is zero at the behavior policy.
                magnitude = res.mean_abs_weighted_advantage;
                break;
            }
            case RlAlgo::none: break;
        }
        if (!r.balanced) {
            if (r.config.coeff) {
                r.coeff = *r.config.coeff;
            } else {
                // Without a distillation term there is nothing to balance against.
                r.coeff = dmd_on && magnitude > 0.0 ? r.config.balance_ratio * std::abs(rec.l_dmd) / magnitude : 1.0;
            }
            r.balanced = true;
        }
        rec.l_rl = l_rl.item();
        const Value weighted = scale(l_rl, r.coeff);
        total = total.defined() ? add(total, weighted) : weighted;
        ++r.steps;
    }
    if (total.defined()) {
        if (!std::isfinite(total.item())) {
            throw NumericError("generator objective is not finite");
        }
        backward(total);
        adam_step(st.generator, st.generator_opt);
    }
    if (detail::estimator_checksum(st) != estimators_before) {
        throw ContractError("generator update modified estimator weights");
    }
    st.verify_real_base();

    if (rl && rl->has_reward) {
        const auto stats = reward_stats(reward_values(rl->reward, batch.x0_hat, labels));
        rec.reward_mean = stats.mean;
        rec.reward_var = stats.variance;
    }
    return rec;
}

}  // namespace dmdrlab
