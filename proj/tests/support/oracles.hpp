#pragma once

// Independent reference computations for the tests. Nothing here calls into
// the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

struct Mixture {
    std::vector<Vec> means;
    Vec weights;
    double stddev = 0.15;
};

// Marginal at level t has components N(a mu_i, v I), v = a^2 sigma^2 + s^2.
// Responsibilities by log-sum-exp.
inline Vec responsibilities(const Mixture& m, const Vec& x, double a, double s) {
    const double v = a * a * m.stddev * m.stddev + s * s;
    Vec logw(m.means.size());
    for (std::size_t i = 0; i < m.means.size(); ++i) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double diff = x[j] - a * m.means[i][j];
            d2 += diff * diff;
        }
        logw[i] = std::log(m.weights[i]) - 0.5 * d2 / v;
    }
    const double hi = *std::max_element(logw.begin(), logw.end());
    double z = 0.0;
    for (double& l : logw) {
        l = std::exp(l - hi);
        z += l;
    }
    for (double& l : logw) {
        l /= z;
    }
    return logw;
}

// grad_x log p_t(x).
inline Vec mixture_score(const Mixture& m, const Vec& x, double a, double s) {
    const double v = a * a * m.stddev * m.stddev + s * s;
    const Vec g = responsibilities(m, x, a, s);
    Vec out(x.size(), 0.0);
    for (std::size_t i = 0; i < m.means.size(); ++i) {
        for (std::size_t j = 0; j < x.size(); ++j) {
            out[j] -= g[i] * (x[j] - a * m.means[i][j]) / v;
        }
    }
    return out;
}

// E[x0 | x_t] from per-component Gaussian posteriors.
inline Vec posterior_mean_x0(const Mixture& m, const Vec& x, double a, double s) {
    const double var0 = m.stddev * m.stddev;
    const double v = a * a * var0 + s * s;
    const Vec g = responsibilities(m, x, a, s);
    Vec out(x.size(), 0.0);
    for (std::size_t i = 0; i < m.means.size(); ++i) {
        for (std::size_t j = 0; j < x.size(); ++j) {
            out[j] += g[i] * (m.means[i][j] + a * var0 / v * (x[j] - a * m.means[i][j]));
        }
    }
    return out;
}

// MSE-optimal network output: E[eps | x_t] for noise prediction,
// E[eps - x0 | x_t] for velocity.
inline Vec optimal_prediction(const Mixture& m, const Vec& x, double a, double s, bool velocity) {
    const Vec x0 = posterior_mean_x0(m, x, a, s);
    Vec out(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double eps = (x[j] - a * x0[j]) / s;
        out[j] = velocity ? eps - x0[j] : eps;
    }
    return out;
}

// Central difference gradient of a scalar function of a flat vector.
inline Vec numeric_gradient(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-6) {
    Vec g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f(x);
        x[i] = saved - h;
        const double down = f(x);
        x[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double mean(const Vec& v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

// Population variance, two passes.
inline double variance(const Vec& v) {
    const double mu = mean(v);
    double s = 0.0;
    for (double x : v) {
        s += (x - mu) * (x - mu);
    }
    return s / static_cast<double>(v.size());
}

// sup |F_n(u) - u| for draws on [0, 1].
inline double ks_uniform(Vec u) {
    std::sort(u.begin(), u.end());
    const double n = static_cast<double>(u.size());
    double d = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        d = std::max({d, static_cast<double>(i + 1) / n - u[i], u[i] - static_cast<double>(i) / n});
    }
    return d;
}

// KL(N(m1, s1^2) || N(m2, s2^2)).
inline double gaussian_kl(double m1, double s1, double m2, double s2) {
    return std::log(s2 / s1) + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
}

// Mean pairwise Euclidean distance, straightforward double loop.
inline double mean_pairwise_distance(const std::vector<Vec>& rows) {
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t k = 0; k < i; ++k) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < rows[i].size(); ++j) {
                d2 += (rows[i][j] - rows[k][j]) * (rows[i][j] - rows[k][j]);
            }
            total += std::sqrt(d2);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

}  // namespace oracle
