#pragma once

// Training-progress schedules for the cold-start phase:
//   adapter scale  lambda(p) = lambda0 * decay(p)    (real-estimator guidance)
//   renoise bias   kappa(p)  = kappa0  * decay(p)    (t = t_floor + (1 - t_floor) u^(1 / (1 + kappa)))
// where p = min(1, iter / horizon) and decay is 1 - p (linear) or
// (1 + cos(pi p)) / 2 (cosine). Both reach exactly zero at the horizon.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

#include "dmdrlab/errors.hpp"
#include "dmdrlab/rng.hpp"

namespace dmdrlab {

enum class ScheduleShape { linear, cosine };

struct ScheduleState {
    long iter = 0;

    bool dynadg_enabled = true;
    double lambda0 = 0.5;
    long dynadg_horizon = 2000;

    bool dynars_enabled = true;
    double kappa0 = 3.0;
    long dynars_horizon = 2000;

    ScheduleShape shape = ScheduleShape::linear;
    // Pins progress at zero: the schedules keep their initial strength.
    bool frozen = false;

    void validate() const {
        if (lambda0 < 0.0 || kappa0 < 0.0) {
            throw ConfigError("schedule strengths must be nonnegative");
        }
        if (dynadg_horizon < 1 || dynars_horizon < 1) {
            throw ConfigError("schedule horizons must be >= 1");
        }
    }

    friend bool operator==(const ScheduleState&, const ScheduleState&) = default;
};

namespace detail {

inline double clamped_progress(long iter, long horizon) {
    if (iter <= 0) {
        return 0.0;
    }
    return std::min(1.0, static_cast<double>(iter) / static_cast<double>(horizon));
}

inline double decay(ScheduleShape shape, double p) {
    if (p >= 1.0) {
        return 0.0;
    }
    return shape == ScheduleShape::linear ? 1.0 - p : 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

}  // namespace detail

// (dynadg fraction, dynars fraction), each clamped to [0, 1].
inline std::pair<double, double> progress(const ScheduleState& s) {
    if (s.frozen) {
        return {0.0, 0.0};
    }
    return {detail::clamped_progress(s.iter, s.dynadg_horizon), detail::clamped_progress(s.iter, s.dynars_horizon)};
}

inline double dynadg_scale(const ScheduleState& s) {
    if (!s.dynadg_enabled) {
        return 0.0;
    }
    return s.lambda0 * detail::decay(s.shape, progress(s).first);
}

inline double dynars_kappa(const ScheduleState& s) {
    if (!s.dynars_enabled) {
        return 0.0;
    }
    return s.kappa0 * detail::decay(s.shape, progress(s).second);
}

// Maps a uniform draw u to a renoise level under bias kappa.
inline double biased_renoise_time(double u, double kappa, double t_floor) {
    const double v = kappa == 0.0 ? u : std::pow(u, 1.0 / (1.0 + kappa));
    return t_floor + (1.0 - t_floor) * v;
}

inline double dynars_sample_t(const ScheduleState& s, Rng& rng, double t_floor) {
    // u in (0, 1], so t stays strictly above t_floor.
    return biased_renoise_time(rng.uniform_open_low(), dynars_kappa(s), t_floor);
}

}  // namespace dmdrlab
