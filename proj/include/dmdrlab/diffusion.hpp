#pragma once

// Forward noising, score conversions for noise- and velocity-prediction,
// teacher training and probability-flow teacher sampling.
//
// Conventions: t = 0 is clean data and t = 1 is pure noise. A noisy sample is
// x_t = a(t) x0 + s(t) eps with
//   noise_pred: a = cos(pi t / 2), s = sin(pi t / 2)   (alpha_bar = cos^2)
//   velocity:   a = 1 - t,         s = t
// Noise-prediction nets regress eps; velocity nets regress eps - x0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmdrlab/errors.hpp"
#include "dmdrlab/nets.hpp"
#include "dmdrlab/numcore.hpp"
#include "dmdrlab/rng.hpp"

namespace dmdrlab {

enum class Parameterization { noise_pred, velocity };

struct DiffusionSpec {
    Parameterization kind = Parameterization::velocity;
    // Descending student grid {t_K > ... > t_1}, all in (0, 1].
    std::vector<double> step_grid{1.0, 0.75, 0.5, 0.25};
    double guidance_scale = 1.0;
    double t_floor = 1e-3;

    friend bool operator==(const DiffusionSpec&, const DiffusionSpec&) = default;

    double alpha_bar(double t) const {
        if (kind == Parameterization::noise_pred) {
            const double c = std::cos(0.5 * std::numbers::pi * t);
            return c * c;
        }
        const double a = 1.0 - t;
        return a * a / (a * a + t * t);
    }

    double signal(double t) const {
        if (kind == Parameterization::velocity) {
            return 1.0 - t;
        }
        // cos(pi/2) rounds to 6e-17; pin the endpoint to an exact zero.
        return t >= 1.0 ? 0.0 : std::cos(0.5 * std::numbers::pi * t);
    }

    double noise(double t) const {
        return kind == Parameterization::noise_pred ? std::sin(0.5 * std::numbers::pi * t) : t;
    }

    std::size_t steps() const { return step_grid.size(); }

    // t_k for k in [1, K]; t_K is the first (largest) grid entry.
    double grid_time(std::size_t k) const { return step_grid[step_grid.size() - k]; }

    void validate() const {
        if (step_grid.empty()) {
            throw ConfigError("step grid is empty");
        }
        for (std::size_t i = 0; i < step_grid.size(); ++i) {
            if (!(step_grid[i] > 0.0 && step_grid[i] <= 1.0)) {
                throw ConfigError("step grid entries must lie in (0, 1]");
            }
            if (i > 0 && !(step_grid[i] < step_grid[i - 1])) {
                throw ConfigError("step grid must be strictly descending");
            }
        }
        if (guidance_scale < 1.0) {
            throw ConfigError("guidance scale must be >= 1");
        }
        if (!(t_floor > 0.0 && t_floor < 1.0)) {
            throw ConfigError("t_floor must lie in (0, 1)");
        }
    }
};

namespace detail {

inline void check_unit_time(double t, const char* op) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw DomainError(std::string(op) + ": t = " + std::to_string(t) + " outside [0, 1]");
    }
}

inline std::vector<double> broadcast_times(std::span<const double> times, std::size_t rows, const char* op) {
    if (times.size() == rows) {
        return {times.begin(), times.end()};
    }
    if (times.size() == 1) {
        return std::vector<double>(rows, times[0]);
    }
    throw DimensionError(std::string(op) + ": " + std::to_string(times.size()) + " times for " +
                         std::to_string(rows) + " rows");
}

template <class F>
std::vector<double> map_times(const std::vector<double>& times, F f) {
    std::vector<double> out(times.size());
    for (std::size_t i = 0; i < times.size(); ++i) {
        out[i] = f(times[i]);
    }
    return out;
}

}  // namespace detail

// F_t: a(t) x0 + s(t) eps, one t per row (or one shared t).
inline Value forward_diffuse(const DiffusionSpec& spec, const Value& x0, const Value& eps,
                             std::span<const double> times) {
    if (x0.shape() != eps.shape()) {
        throw DimensionError("forward_diffuse: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
    }
    const auto t = detail::broadcast_times(times, x0.rows(), "forward_diffuse");
    for (double ti : t) {
        detail::check_unit_time(ti, "forward_diffuse");
    }
    const auto a = detail::map_times(t, [&](double ti) { return spec.signal(ti); });
    const auto s = detail::map_times(t, [&](double ti) { return spec.noise(ti); });
    return add(scale_rows(x0, a), scale_rows(eps, s));
}

inline Value forward_diffuse(const DiffusionSpec& spec, const Value& x0, const Value& eps, double t) {
    const double times[1] = {t};
    return forward_diffuse(spec, x0, eps, std::span<const double>(times, 1));
}

// Regression target of the diffusion loss.
inline Value diffusion_target(const DiffusionSpec& spec, const Value& x0, const Value& eps) {
    return spec.kind == Parameterization::noise_pred ? eps : sub(eps, x0);
}

// Score estimate from a network prediction:
//   noise_pred: s = -pred / s(t)
//   velocity:   eps_hat = x_t + (1 - t) pred, s = -eps_hat / t
inline Value pred_to_score(const DiffusionSpec& spec, const Value& pred, const Value& x_t,
                           std::span<const double> times) {
    if (pred.shape() != x_t.shape()) {
        throw DimensionError("pred_to_score: pred " + shape_str(pred.shape()) + " vs x_t " + shape_str(x_t.shape()));
    }
    const auto t = detail::broadcast_times(times, pred.rows(), "pred_to_score");
    for (double ti : t) {
        if (!(ti > spec.t_floor) || ti > 1.0) {
            throw DomainError("pred_to_score: t = " + std::to_string(ti) + " not in (t_floor, 1]");
        }
    }
    if (spec.kind == Parameterization::noise_pred) {
        return scale_rows(pred, detail::map_times(t, [&](double ti) { return -1.0 / spec.noise(ti); }));
    }
    const Value eps_hat = add(x_t, scale_rows(pred, detail::map_times(t, [](double ti) { return 1.0 - ti; })));
    return scale_rows(eps_hat, detail::map_times(t, [](double ti) { return -1.0 / ti; }));
}

inline Value pred_to_score(const DiffusionSpec& spec, const Value& pred, const Value& x_t, double t) {
    const double times[1] = {t};
    return pred_to_score(spec, pred, x_t, std::span<const double>(times, 1));
}

// Clean-sample estimate implied by a prediction.
inline Value pred_to_x0(const DiffusionSpec& spec, const Value& pred, const Value& x_t,
                        std::span<const double> times) {
    const auto t = detail::broadcast_times(times, pred.rows(), "pred_to_x0");
    if (spec.kind == Parameterization::velocity) {
        return sub(x_t, scale_rows(pred, t));
    }
    std::vector<double> inv_a(t.size()), s_over_a(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double a = spec.signal(t[i]);
        if (!(a > 0.0)) {
            throw DomainError("pred_to_x0: signal coefficient vanishes at t = " + std::to_string(t[i]));
        }
        inv_a[i] = 1.0 / a;
        s_over_a[i] = spec.noise(t[i]) / a;
    }
    return sub(scale_rows(x_t, inv_a), scale_rows(pred, s_over_a));
}

// Noise estimate implied by a prediction.
inline Value pred_to_eps(const DiffusionSpec& spec, const Value& pred, const Value& x_t,
                         std::span<const double> times) {
    if (spec.kind == Parameterization::noise_pred) {
        return pred;
    }
    const auto t = detail::broadcast_times(times, pred.rows(), "pred_to_eps");
    return add(x_t, scale_rows(pred, detail::map_times(t, [](double ti) { return 1.0 - ti; })));
}

// Clean estimate from a network read in this parameterization.
inline Value denoise_x0(const DiffusionSpec& spec, const NetParams& net, const Value& x_t,
                        std::span<const double> times, std::span<const int> labels = {}) {
    return pred_to_x0(spec, net_forward(net, x_t, times, labels), x_t, times);
}

inline Value denoise_x0(const DiffusionSpec& spec, const NetParams& net, const Value& x_t, double t,
                        std::span<const int> labels = {}) {
    const double ts[1] = {t};
    return denoise_x0(spec, net, x_t, std::span<const double>(ts), labels);
}

// ---------------------------------------------------------------------------
// Data distribution

// Isotropic Gaussian mixture; component i belongs to class classes[i]
// (classes may be empty for an unconditional mixture).
struct MixtureSpec {
    std::vector<std::vector<double>> means;
    double stddev = 0.15;
    std::vector<double> weights;
    std::vector<int> classes;

    std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }
    std::size_t components() const { return means.size(); }

    std::size_t num_classes() const {
        int hi = -1;
        for (int c : classes) {
            hi = std::max(hi, c);
        }
        return static_cast<std::size_t>(hi + 1);
    }

    void validate() const {
        if (means.empty()) {
            throw ConfigError("mixture has no components");
        }
        for (const auto& m : means) {
            if (m.size() != dim() || m.empty()) {
                throw ConfigError("mixture means must share one positive dimension");
            }
        }
        if (!(stddev > 0.0)) {
            throw ConfigError("mixture stddev must be positive");
        }
        if (weights.size() != means.size()) {
            throw ConfigError("mixture needs one weight per component");
        }
        double total = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) {
                throw ConfigError("mixture weights must be nonnegative");
            }
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12) {
            throw ConfigError("mixture weights must sum to 1, got " + std::to_string(total));
        }
        if (!classes.empty()) {
            if (classes.size() != means.size()) {
                throw ConfigError("mixture needs one class per component");
            }
            for (int c : classes) {
                if (c < 0) {
                    throw ConfigError("mixture classes must be nonnegative");
                }
            }
        }
    }

    // Total weight of each class.
    std::vector<double> class_weights() const {
        std::vector<double> w(num_classes(), 0.0);
        for (std::size_t i = 0; i < classes.size(); ++i) {
            w[static_cast<std::size_t>(classes[i])] += weights[i];
        }
        return w;
    }
};

// `modes` equally weighted components on a circle. Consecutive modes are
// grouped into `num_classes` contiguous classes (0 means unconditional).
inline MixtureSpec make_ring(std::size_t modes, double radius, double stddev, std::size_t num_classes) {
    MixtureSpec m;
    m.stddev = stddev;
    for (std::size_t i = 0; i < modes; ++i) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(modes);
        m.means.push_back({radius * std::cos(angle), radius * std::sin(angle)});
        m.weights.push_back(1.0 / static_cast<double>(modes));
        if (num_classes > 0) {
            m.classes.push_back(static_cast<int>(i * num_classes / modes));
        }
    }
    return m;
}

namespace detail {

inline std::size_t pick_weighted(Rng& rng, std::span<const double> weights, std::span<const std::size_t> allowed) {
    double total = 0.0;
    for (std::size_t i : allowed) {
        total += weights[i];
    }
    double u = rng.uniform() * total;
    for (std::size_t i : allowed) {
        u -= weights[i];
        if (u < 0.0) {
            return i;
        }
    }
    return allowed.back();
}

}  // namespace detail

struct LabeledSamples {
    Value x;
    std::vector<int> labels;  // empty for unconditional mixtures
};

// Draws the component for each row conditioned on its label (kNoLabel or an
// empty label list draws from the full mixture).
inline Value sample_mixture_for(const MixtureSpec& m, std::size_t n, std::span<const int> labels, Rng& rng) {
    const std::size_t d = m.dim();
    std::vector<std::size_t> everyone(m.components());
    std::iota(everyone.begin(), everyone.end(), std::size_t{0});
    std::vector<std::vector<std::size_t>> by_class(m.num_classes());
    for (std::size_t i = 0; i < m.classes.size(); ++i) {
        by_class[static_cast<std::size_t>(m.classes[i])].push_back(i);
    }
    std::vector<double> out(n * d);
    for (std::size_t r = 0; r < n; ++r) {
        std::span<const std::size_t> allowed = everyone;
        if (!labels.empty() && labels[r] != kNoLabel) {
            const auto c = static_cast<std::size_t>(labels[r]);
            if (c >= by_class.size() || by_class[c].empty()) {
                throw ContractError("sample_mixture: label " + std::to_string(labels[r]) + " has no components");
            }
            allowed = by_class[c];
        }
        const std::size_t comp = detail::pick_weighted(rng, m.weights, allowed);
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = m.means[comp][j] + m.stddev * rng.normal();
        }
    }
    return Value::constant({n, d}, std::move(out));
}

// Labels drawn from the class prior, then samples given labels.
inline std::vector<int> sample_labels(const MixtureSpec& m, std::size_t n, Rng& rng) {
    if (m.classes.empty()) {
        return {};
    }
    const auto w = m.class_weights();
    std::vector<std::size_t> all(w.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<int> labels(n);
    for (auto& l : labels) {
        l = static_cast<int>(detail::pick_weighted(rng, w, all));
    }
    return labels;
}

inline LabeledSamples sample_mixture(const MixtureSpec& m, std::size_t n, Rng& rng) {
    auto labels = sample_labels(m, n, rng);
    Value x = sample_mixture_for(m, n, labels, rng);
    return {std::move(x), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Training

// t ~ U(t_floor, 1) per row, eps ~ N(0, I); mean squared error between the
// net's prediction at (F_t(x0, eps), t) and the parameterization's target.
// With label_dropout > 0 each label is replaced by kNoLabel with that
// probability.
inline Value diffusion_loss(const DiffusionSpec& spec, const NetParams& net, const Value& x0,
                            std::span<const int> labels, Rng& rng, double label_dropout = 0.0) {
    const std::size_t n = x0.rows();
    if (n == 0) {
        throw ContractError("diffusion_loss: empty batch");
    }
    std::vector<double> t(n);
    for (double& ti : t) {
        ti = spec.t_floor + (1.0 - spec.t_floor) * rng.uniform();
    }
    const Value eps = randn(rng, x0.shape());
    std::vector<int> used(labels.begin(), labels.end());
    if (label_dropout > 0.0) {
        for (int& l : used) {
            if (rng.uniform() < label_dropout) {
                l = kNoLabel;
            }
        }
    }
    const Value x_t = forward_diffuse(spec, x0, eps, t);
    const Value pred = net_forward(net, x_t, t, used);
    return mean(square(sub(pred, diffusion_target(spec, x0, eps))));
}

struct TeacherOptions {
    NetDims dims;
    std::size_t batch = 256;
    AdamConfig adam{};
    // Learning rate decays along a half cosine to lr * lr_final_frac.
    double lr_final_frac = 0.1;
    double label_dropout = 0.1;
};

// Called after every teacher step with (steps done, loss, current net).
using TeacherObserver = std::function<void(long, double, const NetParams&)>;

// Trains the multi-step teacher on mixture samples with per-class labels.
inline NetParams train_teacher(const DiffusionSpec& spec, const MixtureSpec& mixture, long iters, Rng& rng,
                               const TeacherOptions& opts, const TeacherObserver& observe = {}) {
    mixture.validate();
    if (iters < 0) {
        throw ContractError("train_teacher: iteration count must be nonnegative");
    }
    if (opts.dims.in_dim != mixture.dim() || opts.dims.out_dim != mixture.dim()) {
        throw ConfigError("train_teacher: net dims do not match mixture dimension");
    }
    if (!mixture.classes.empty() && mixture.num_classes() > opts.dims.num_classes) {
        throw ConfigError("train_teacher: mixture has more classes than the net");
    }
    NetParams net = net_init(rng, opts.dims);
    AdamState adam(net, opts.adam);
    for (long it = 0; it < iters; ++it) {
        const double progress = iters > 1 ? static_cast<double>(it) / static_cast<double>(iters - 1) : 1.0;
        const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
        adam.config.lr = opts.adam.lr * (opts.lr_final_frac + (1.0 - opts.lr_final_frac) * cosine);
        auto batch = sample_mixture(mixture, opts.batch, rng);
        net.zero_grads();
        const Value loss = diffusion_loss(spec, net, batch.x, batch.labels, rng, opts.label_dropout);
        if (!std::isfinite(loss.item())) {
            throw TrainingError("teacher loss is not finite", it);
        }
        backward(loss);
        adam_step(net, adam);
        if (observe) {
            observe(it + 1, loss.item(), net);
        }
    }
    return net;
}

// ---------------------------------------------------------------------------
// Sampling

// Deterministic probability-flow sampler on a uniform grid from t = 1 down to
// t_floor. `predict(x, times, labels)` returns the parameterization's
// prediction. Velocity nets take Euler steps x += (t' - t) v; noise nets take
// DDIM steps through the implied x0, starting at 1 - t_floor where the
// signal coefficient is nonzero. With w_cfg > 1 and labels present the
// prediction is uncond + w_cfg (cond - uncond).
template <class Predictor>
Value teacher_sample(const DiffusionSpec& spec, Predictor&& predict, std::size_t dim, std::size_t n,
                     std::size_t steps, Rng& rng, std::span<const int> labels, double w_cfg) {
    if (steps < 1) {
        throw ContractError("teacher_sample: steps must be >= 1");
    }
    if (w_cfg < 1.0) {
        throw ConfigError("teacher_sample: guidance scale must be >= 1");
    }
    NoGradGuard no_grad;
    Value x = randn(rng, {n, dim});
    const std::vector<int> uncond_labels(labels.empty() ? 0 : n, kNoLabel);
    auto guided = [&](const Value& xt, double t) {
        const double times[1] = {t};
        const std::span<const double> ts(times, 1);
        Value cond = predict(xt, ts, labels);
        if (w_cfg == 1.0 || labels.empty()) {
            return cond;
        }
        Value uncond = predict(xt, ts, std::span<const int>(uncond_labels));
        return add(uncond, scale(sub(cond, uncond), w_cfg));
    };
    const double top = spec.kind == Parameterization::noise_pred ? 1.0 - spec.t_floor : 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const double t = top - (top - spec.t_floor) * static_cast<double>(i) / static_cast<double>(steps);
        const double t_next = top - (top - spec.t_floor) * static_cast<double>(i + 1) / static_cast<double>(steps);
        const Value pred = guided(x, t);
        if (spec.kind == Parameterization::velocity) {
            x = add(x, scale(pred, t_next - t));
        } else {
            const double a = spec.signal(t), s = spec.noise(t);
            const double a_next = spec.signal(t_next), s_next = spec.noise(t_next);
            const Value x0_hat = scale(sub(x, scale(pred, s)), 1.0 / a);
            x = add(scale(x0_hat, a_next), scale(pred, s_next));
        }
    }
    return x;
}

inline Value teacher_sample(const DiffusionSpec& spec, const NetParams& net, std::size_t n, std::size_t steps,
                            Rng& rng, std::span<const int> labels = {}, double w_cfg = 1.0) {
    auto predict = [&net](const Value& x, std::span<const double> t, std::span<const int> l) {
        return net_forward(net, x, t, l);
    };
    return teacher_sample(spec, predict, net.dims.in_dim, n, steps, rng, labels, w_cfg);
}

}  // namespace dmdrlab
