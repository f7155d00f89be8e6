#pragma once

// Distribution-match, coverage, diversity and reward statistics, plus the
// per-iteration metrics record and its CSV row.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include "dmdrlab/diffusion.hpp"
#include "dmdrlab/errors.hpp"
#include "dmdrlab/numcore.hpp"

namespace dmdrlab {

// Axis-aligned box split into `bins` cells per dimension.
struct HistogramGrid {
    std::vector<double> lo;
    std::vector<double> hi;
    std::size_t bins = 64;
};

// Bounding box of the mixture means padded by pad_sigmas * stddev.
inline HistogramGrid default_grid(const MixtureSpec& m, std::size_t bins = 64, double pad_sigmas = 3.0) {
    HistogramGrid g;
    g.bins = bins;
    const std::size_t d = m.dim();
    g.lo.assign(d, std::numeric_limits<double>::infinity());
    g.hi.assign(d, -std::numeric_limits<double>::infinity());
    for (const auto& mu : m.means) {
        for (std::size_t j = 0; j < d; ++j) {
            g.lo[j] = std::min(g.lo[j], mu[j]);
            g.hi[j] = std::max(g.hi[j], mu[j]);
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        g.lo[j] -= pad_sigmas * m.stddev;
        g.hi[j] += pad_sigmas * m.stddev;
    }
    return g;
}

struct HistogramKl {
    double nats = 0.0;
    // Samples that fell outside the grid and were clamped into edge cells.
    std::size_t clamped_p = 0;
    std::size_t clamped_q = 0;
};

namespace detail {

inline std::vector<double> histogram(const Value& samples, const HistogramGrid& grid, std::size_t& clamped) {
    const std::size_t d = grid.lo.size();
    if (samples.rank() != 2 || samples.cols() != d) {
        throw DimensionError("histogram: samples " + shape_str(samples.shape()) + " do not match grid dimension " +
                             std::to_string(d));
    }
    std::size_t cells = 1;
    for (std::size_t j = 0; j < d; ++j) {
        cells *= grid.bins;
    }
    std::vector<double> counts(cells, 0.0);
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        std::size_t index = 0;
        bool outside = false;
        for (std::size_t j = 0; j < d; ++j) {
            const double u = (samples.at(i, j) - grid.lo[j]) / (grid.hi[j] - grid.lo[j]);
            double cell = std::floor(u * static_cast<double>(grid.bins));
            if (!(cell >= 0.0)) {
                cell = 0.0;
                outside = true;
            } else if (cell > static_cast<double>(grid.bins - 1)) {
                outside = outside || u > 1.0;
                cell = static_cast<double>(grid.bins - 1);
            }
            index = index * grid.bins + static_cast<std::size_t>(cell);
        }
        clamped += outside ? 1 : 0;
        counts[index] += 1.0;
    }
    return counts;
}

}  // namespace detail

// KL(p_hat || q_hat) in nats between additively smoothed histograms:
// p_hat_i = (count_i + alpha) / (n + alpha * cells). Cells where p_hat > 0 and
// q_hat = 0 make the divergence infinite.
inline HistogramKl histogram_kl(const Value& p_samples, const Value& q_samples, const HistogramGrid& grid,
                                double alpha = 0.5) {
    if (p_samples.size() == 0 || q_samples.size() == 0) {
        throw ContractError("histogram_kl: both sample sets must be nonempty");
    }
    if (grid.bins == 0 || grid.lo.size() != grid.hi.size() || grid.lo.empty()) {
        throw ConfigError("histogram_kl: malformed grid");
    }
    HistogramKl out;
    const auto p = detail::histogram(p_samples, grid, out.clamped_p);
    const auto q = detail::histogram(q_samples, grid, out.clamped_q);
    const double cells = static_cast<double>(p.size());
    const double zp = static_cast<double>(p_samples.rows()) + alpha * cells;
    const double zq = static_cast<double>(q_samples.rows()) + alpha * cells;
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double ph = (p[i] + alpha) / zp;
        const double qh = (q[i] + alpha) / zq;
        if (ph == 0.0) {
            continue;
        }
        if (qh == 0.0) {
            out.nats = std::numeric_limits<double>::infinity();
            return out;
        }
        kl += ph * std::log(ph / qh);
    }
    // Rounding can leave a tiny negative residue for identical histograms.
    out.nats = std::max(0.0, kl);
    return out;
}

// Fraction of components with at least min_count samples inside
// radius_mult * stddev of their mean.
inline double mode_coverage(const Value& samples, const MixtureSpec& m, double radius_mult = 3.0,
                            std::size_t min_count = 5) {
    if (m.components() == 0) {
        return 0.0;
    }
    if (samples.size() == 0) {
        return 0.0;
    }
    const std::size_t d = m.dim();
    if (samples.rank() != 2 || samples.cols() != d) {
        throw DimensionError("mode_coverage: samples " + shape_str(samples.shape()) + " vs mixture dimension " +
                             std::to_string(d));
    }
    const double r2 = std::pow(radius_mult * m.stddev, 2);
    std::size_t covered = 0;
    for (const auto& mu : m.means) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < samples.rows(); ++i) {
            double dist2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = samples.at(i, j) - mu[j];
                dist2 += diff * diff;
            }
            hits += dist2 <= r2 ? 1 : 0;
        }
        covered += hits >= min_count ? 1 : 0;
    }
    return static_cast<double>(covered) / static_cast<double>(m.components());
}

// Mean Euclidean distance over all unordered pairs of rows.
inline double diversity_mpd(const Value& samples) {
    if (samples.rank() != 2 || samples.rows() < 2) {
        throw ContractError("diversity_mpd: needs at least two samples");
    }
    const std::size_t n = samples.rows(), d = samples.cols();
    const auto x = samples.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t k = i + 1; k < n; ++k) {
            double dist2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = x[i * d + j] - x[k * d + j];
                dist2 += diff * diff;
            }
            row += std::sqrt(dist2);
        }
        total += row;
    }
    return total / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

struct RewardStats {
    double mean = 0.0;
    double variance = 0.0;  // population variance
};

// Welford's single-pass mean and population variance.
inline RewardStats reward_stats(std::span<const double> rewards) {
    if (rewards.empty()) {
        throw ContractError("reward_stats: no rewards");
    }
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    for (double r : rewards) {
        ++n;
        const double delta = r - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (r - mean);
    }
    return {mean, m2 / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------
// Metrics record

enum class Phase { teacher, coldstart, joint };

inline const char* phase_name(Phase p) {
    switch (p) {
        case Phase::teacher: return "teacher";
        case Phase::coldstart: return "coldstart";
        case Phase::joint: return "joint";
    }
    return "unknown";
}

struct MetricsRecord {
    Phase phase = Phase::coldstart;
    long iter = 0;
    double l_dmd = 0.0;
    double l_diff_fake = 0.0;
    double l_diff_real_adapter = 0.0;
    double l_rl = 0.0;
    double reward_mean = 0.0;
    double reward_var = 0.0;
    double hist_kl_to_teacher = 0.0;
    double mode_coverage = 0.0;
    double diversity_mpd = 0.0;
    double dynadg_lambda = 0.0;
    double dynars_kappa = 0.0;
    double wallclock_ms = 0.0;

    bool all_finite() const {
        for (double v : {l_dmd, l_diff_fake, l_diff_real_adapter, l_rl, reward_mean, reward_var, hist_kl_to_teacher,
                         mode_coverage, diversity_mpd, dynadg_lambda, dynars_kappa, wallclock_ms}) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }
};

inline const char* metrics_csv_header() {
    return "phase,iter,l_dmd,l_diff_fake,l_diff_real_adapter,l_rl,reward_mean,reward_var,"
           "hist_kl_to_teacher,mode_coverage,diversity_mpd,dynadg_lambda,dynars_kappa,wallclock_ms";
}

// Shortest decimal form that reads back to the same double.
inline std::string format_double(double x) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline std::string to_csv_row(const MetricsRecord& r) {
    std::string s = phase_name(r.phase);
    s += ',' + std::to_string(r.iter);
    for (double v : {r.l_dmd, r.l_diff_fake, r.l_diff_real_adapter, r.l_rl, r.reward_mean, r.reward_var,
                     r.hist_kl_to_teacher, r.mode_coverage, r.diversity_mpd, r.dynadg_lambda, r.dynars_kappa,
                     r.wallclock_ms}) {
        s += ',' + format_double(v);
    }
    return s;
}

}  // namespace dmdrlab
