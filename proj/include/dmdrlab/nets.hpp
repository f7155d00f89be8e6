#pragma once

// Time- and class-conditioned MLPs with optional low-rank adapters, plus Adam.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmdrlab/errors.hpp"
#include "dmdrlab/numcore.hpp"
#include "dmdrlab/rng.hpp"

namespace dmdrlab {

// Label value meaning "no class" (unconditional evaluation).
inline constexpr int kNoLabel = -1;

struct NetDims {
    std::size_t in_dim = 2;
    std::size_t hidden_dim = 128;
    std::size_t out_dim = 2;
    // Number of linear layers; depth - 1 SiLU hidden activations.
    std::size_t depth = 4;
    std::size_t time_embed_dim = 32;
    std::size_t num_classes = 4;

    std::size_t feature_dim() const { return in_dim + time_embed_dim + num_classes; }

    friend bool operator==(const NetDims&, const NetDims&) = default;
};

struct Layer {
    Value weight;  // [out x in]
    Value bias;    // [1 x out]
};

// delta(x) = B (A x); A is [r x in], B is [out x r].
struct Adapter {
    Value down;  // A
    Value up;    // B
};

struct NetParams {
    NetDims dims;
    std::vector<Layer> layers;
    // One slot per layer; layers narrower than the rank carry no adapter.
    std::vector<std::optional<Adapter>> adapters;
    std::size_t adapter_rank = 0;
    double adapter_scale = 1.0;

    bool has_adapters() const {
        for (const auto& a : adapters) {
            if (a) {
                return true;
            }
        }
        return false;
    }

    std::vector<Value> base_parameters() const {
        std::vector<Value> out;
        for (const auto& l : layers) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
        return out;
    }

    std::vector<Value> adapter_parameters() const {
        std::vector<Value> out;
        for (const auto& a : adapters) {
            if (a) {
                out.push_back(a->down);
                out.push_back(a->up);
            }
        }
        return out;
    }

    std::vector<Value> all_parameters() const {
        auto out = base_parameters();
        auto extra = adapter_parameters();
        out.insert(out.end(), extra.begin(), extra.end());
        return out;
    }

    void zero_grads() const {
        for (auto p : all_parameters()) {
            p.zero_grad();
        }
    }

    // Frozen base weights take no part in backward passes.
    void set_base_trainable(bool trainable) const {
        for (auto p : base_parameters()) {
            p.set_requires_grad(trainable);
        }
    }
};

namespace detail {

inline std::size_t layer_in(const NetDims& d, std::size_t l) { return l == 0 ? d.feature_dim() : d.hidden_dim; }
inline std::size_t layer_out(const NetDims& d, std::size_t l) { return l + 1 == d.depth ? d.out_dim : d.hidden_dim; }

inline Value gaussian_param(Rng& rng, Shape shape, double stddev) {
    std::vector<double> data(shape_size(shape));
    for (double& x : data) {
        x = stddev * rng.normal();
    }
    return Value::parameter(std::move(shape), std::move(data));
}

}  // namespace detail

// Adds fresh adapters of rank r to every layer with min(in, out) >= r.
// A ~ N(0, 1 / fan_in) and B = 0, so a fresh adapter contributes nothing.
inline void attach_adapters(NetParams& p, std::size_t r, Rng& rng) {
    if (r == 0) {
        throw ConfigError("adapter rank must be positive");
    }
    const NetDims& dims = p.dims;
    p.adapters.assign(dims.depth, std::nullopt);
    bool hosted = false;
    for (std::size_t l = 0; l < dims.depth; ++l) {
        const std::size_t in = detail::layer_in(dims, l), out = detail::layer_out(dims, l);
        if (r > std::min(in, out)) {
            continue;
        }
        Adapter a;
        a.down = detail::gaussian_param(rng, {r, in}, std::sqrt(1.0 / static_cast<double>(in)));
        a.up = Value::parameter({out, r}, std::vector<double>(out * r, 0.0));
        p.adapters[l] = std::move(a);
        hosted = true;
    }
    if (!hosted) {
        throw ConfigError("adapter rank " + std::to_string(r) + " exceeds min(in, out) of every layer");
    }
    p.adapter_rank = r;
}

// Weights ~ N(0, 2 / fan_in), zero biases; optional adapters as above.
inline NetParams net_init(Rng& rng, const NetDims& dims, std::optional<std::size_t> adapter_rank = std::nullopt) {
    if (dims.in_dim == 0 || dims.out_dim == 0 || dims.depth == 0 || (dims.depth > 1 && dims.hidden_dim == 0)) {
        throw ConfigError("net_init: dimensions must be positive");
    }
    if (dims.time_embed_dim % 2 != 0) {
        throw ConfigError("net_init: time_embed_dim must be even, got " + std::to_string(dims.time_embed_dim));
    }
    NetParams p;
    p.dims = dims;
    for (std::size_t l = 0; l < dims.depth; ++l) {
        const std::size_t in = detail::layer_in(dims, l), out = detail::layer_out(dims, l);
        Layer layer;
        layer.weight = detail::gaussian_param(rng, {out, in}, std::sqrt(2.0 / static_cast<double>(in)));
        layer.bias = Value::parameter({1, out}, std::vector<double>(out, 0.0));
        p.layers.push_back(std::move(layer));
    }
    p.adapters.resize(dims.depth);
    if (adapter_rank) {
        attach_adapters(p, *adapter_rank, rng);
    }
    return p;
}

namespace detail {

inline std::vector<double> embed_frequencies(std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<double> w(half);
    for (std::size_t i = 0; i < half; ++i) {
        const double frac = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
        w[i] = std::pow(100.0, frac);
    }
    return w;
}

inline void embed_into(double t, std::span<const double> freqs, double* out) {
    for (std::size_t i = 0; i < freqs.size(); ++i) {
        out[2 * i] = std::sin(freqs[i] * t);
        out[2 * i + 1] = std::cos(freqs[i] * t);
    }
}

}  // namespace detail

// Sinusoidal features [sin(w0 t), cos(w0 t), sin(w1 t), cos(w1 t), ...] with
// frequencies spaced geometrically from 1 to 100 rad per unit time.
inline std::vector<double> time_embed(double t, std::size_t dim) {
    if (dim % 2 != 0) {
        throw ConfigError("time_embed: dim must be even, got " + std::to_string(dim));
    }
    std::vector<double> out(dim);
    detail::embed_into(t, detail::embed_frequencies(dim), out.data());
    return out;
}

// Conditioning features [time_embed(t_i), onehot(label_i)] for each row.
// `times` holds one entry per row or a single shared entry; `labels` is
// either empty (all unconditional) or one entry per row.
inline Value conditioning(const NetDims& dims, std::size_t rows, std::span<const double> times,
                          std::span<const int> labels) {
    if (times.size() != rows && times.size() != 1) {
        throw DimensionError("net_forward: " + std::to_string(times.size()) + " times for " + std::to_string(rows) +
                             " rows");
    }
    if (!labels.empty() && labels.size() != rows) {
        throw DimensionError("net_forward: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    }
    const std::size_t e = dims.time_embed_dim, c = dims.num_classes, width = e + c;
    std::vector<double> feats(rows * width, 0.0);
    const auto freqs = detail::embed_frequencies(e);
    for (std::size_t i = 0; i < rows; ++i) {
        detail::embed_into(times.size() == 1 ? times[0] : times[i], freqs, feats.data() + i * width);
        if (!labels.empty() && labels[i] != kNoLabel) {
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
                throw ContractError("net_forward: label " + std::to_string(labels[i]) + " outside [0, " +
                                    std::to_string(c) + ")");
            }
            feats[i * width + e + static_cast<std::size_t>(labels[i])] = 1.0;
        }
    }
    return Value::constant({rows, width}, std::move(feats));
}

// MLP over concat(x, time_embed(t), onehot(label)). With active adapters each
// layer computes W h + b + scale * B (A h). A zero adapter scale skips the
// adapter path entirely, so the output equals the base network bitwise.
inline Value net_forward(const NetParams& p, const Value& x, std::span<const double> times,
                         std::span<const int> labels = {}) {
    if (x.rank() != 2 || x.cols() != p.dims.in_dim) {
        throw DimensionError("net_forward: input " + shape_str(x.shape()) + " does not match in_dim " +
                             std::to_string(p.dims.in_dim));
    }
    const std::size_t rows = x.rows();
    Value h = concat_cols({x, conditioning(p.dims, rows, times, labels)});
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const Layer& layer = p.layers[l];
        Value out = linear(h, layer.weight, layer.bias);
        if (p.adapter_scale != 0.0 && l < p.adapters.size() && p.adapters[l]) {
            const Adapter& a = *p.adapters[l];
            out = add(out, scale(linear(linear(h, a.down), a.up), p.adapter_scale));
        }
        h = l + 1 < p.layers.size() ? silu(out) : out;
    }
    return h;
}

inline Value net_forward(const NetParams& p, const Value& x, double t, std::span<const int> labels = {}) {
    const double times[1] = {t};
    return net_forward(p, x, std::span<const double>(times, 1), labels);
}

// Deep copy; the clone shares no storage with the source.
inline NetParams clone_params(const NetParams& src) {
    NetParams out;
    out.dims = src.dims;
    out.adapter_rank = src.adapter_rank;
    out.adapter_scale = src.adapter_scale;
    auto copy = [](const Value& v) {
        return Value::parameter(v.shape(), std::vector<double>(v.data().begin(), v.data().end()));
    };
    for (const auto& l : src.layers) {
        out.layers.push_back({copy(l.weight), copy(l.bias)});
    }
    for (const auto& a : src.adapters) {
        if (a) {
            out.adapters.emplace_back(Adapter{copy(a->down), copy(a->up)});
        } else {
            out.adapters.emplace_back(std::nullopt);
        }
    }
    return out;
}

inline bool congruent(const NetParams& a, const NetParams& b) {
    const auto pa = a.all_parameters(), pb = b.all_parameters();
    if (a.dims != b.dims || pa.size() != pb.size() || a.adapters.size() != b.adapters.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.adapters.size(); ++i) {
        if (a.adapters[i].has_value() != b.adapters[i].has_value()) {
            return false;
        }
    }
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].shape() != pb[i].shape()) {
            return false;
        }
    }
    return true;
}

// Copies parameter values (and the adapter scale) from src into dst in place.
inline void copy_into(const NetParams& src, NetParams& dst) {
    if (!congruent(src, dst)) {
        throw ConfigError("copy_into: architectures differ");
    }
    const auto ps = src.all_parameters();
    auto pd = dst.all_parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        std::copy(ps[i].data().begin(), ps[i].data().end(), pd[i].data().begin());
    }
    dst.adapter_scale = src.adapter_scale;
}

// FNV-1a over the raw bytes of the given parameters.
inline std::uint64_t checksum(const std::vector<Value>& params) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params) {
        for (double x : p.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, sizeof bits);
            for (int b = 0; b < 8; ++b) {
                h = (h ^ ((bits >> (8 * b)) & 0xffu)) * 1099511628211ULL;
            }
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Adam

enum class ParamGroup { base_only, adapters_only, all };

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

// Moment buffers are keyed by position in NetParams::all_parameters().
struct AdamState {
    AdamConfig config;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::vector<long> steps;

    AdamState() = default;
    AdamState(const NetParams& p, AdamConfig cfg) : config(cfg) {
        for (const auto& param : p.all_parameters()) {
            m.emplace_back(param.size(), 0.0);
            v.emplace_back(param.size(), 0.0);
            steps.push_back(0);
        }
    }

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

// Bias-corrected Adam on the selected parameter group; other parameters are
// left untouched.
inline void adam_step(NetParams& p, AdamState& state, ParamGroup which = ParamGroup::all) {
    auto params = p.all_parameters();
    if (params.size() != state.m.size()) {
        throw ContractError("adam_step: optimizer state does not match parameter set");
    }
    const std::size_t n_base = p.base_parameters().size();
    const auto& c = state.config;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const bool is_base = i < n_base;
        if ((which == ParamGroup::base_only && !is_base) || (which == ParamGroup::adapters_only && is_base)) {
            continue;
        }
        Value& param = params[i];
        if (!param.has_grad()) {
            throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient buffer");
        }
        auto data = param.data();
        const auto grad = param.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const long t = ++state.steps[i];
        const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
        for (std::size_t j = 0; j < data.size(); ++j) {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad[j] * grad[j];
            data[j] -= c.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
        }
    }
}

}  // namespace dmdrlab
