#pragma once

// Dense float64 arrays with define-by-run reverse-mode differentiation.
//
// A Value is a shared handle to a node holding row-major data, an optional
// gradient buffer and (for derived values) the edge back to its inputs.
// Graphs are rebuilt on every step; nothing is cached between calls.
// Gradients accumulate additively, so callers zero them between steps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dmdrlab/errors.hpp"
#include "dmdrlab/rng.hpp"

namespace dmdrlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Propagates this node's grad into its inputs.
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Disables graph construction for its lifetime (results become constants).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Value {
public:
    Value() = default;

    static Value constant(Shape shape, std::vector<double> data) {
        if (shape_size(shape) != data.size()) {
            throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                                 shape_str(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        return Value(std::move(node));
    }

    static Value zeros(Shape shape) {
        const auto n = shape_size(shape);
        return constant(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Value scalar(double x) { return constant({1}, {x}); }

    // Trainable leaf.
    static Value parameter(Shape shape, std::vector<double> data) {
        Value v = constant(std::move(shape), std::move(data));
        v.node_->requires_grad = true;
        return v;
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rank() const { return node_->shape.size(); }

    // Rows/cols of a rank-2 value.
    std::size_t rows() const {
        require_rank2("rows");
        return node_->shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return node_->shape[1];
    }

    std::span<double> data() { return node_->data; }
    std::span<const double> data() const { return node_->data; }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    double item() const {
        if (size() != 1) {
            throw ContractError("item() on non-scalar value of shape " + shape_str(shape()));
        }
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    // Only meaningful on leaves.
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool is_leaf() const { return !node_->backward; }
    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<double> grad() { return node_->grad; }
    std::span<const double> grad() const { return node_->grad; }

    void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
    void drop_grad() { node_->grad.clear(); }

    // Identity of the underlying node; aliases compare equal.
    bool same_node(const Value& other) const noexcept { return node_ == other.node_; }

    detail::Node& node() const { return *node_; }
    const std::shared_ptr<detail::Node>& handle() const { return node_; }

    explicit Value(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    void require_rank2(const char* what) const {
        if (node_->shape.size() != 2) {
            throw DimensionError(std::string(what) + "() needs a rank-2 value, got " + shape_str(node_->shape));
        }
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline ConstMapMat as_mat(const Node& n, std::size_t r, std::size_t c) {
    return ConstMapMat(n.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline MapMat as_grad_mat(Node& n, std::size_t r, std::size_t c) {
    n.ensure_grad();
    return MapMat(n.grad.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Builds the result node. The backward edge is only kept when grad mode is on
// and some input needs a gradient.
inline Value make_result(Shape shape, std::vector<double> data, std::vector<Value> inputs,
                         std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (grad_mode()) {
        bool any = false;
        for (const auto& in : inputs) {
            any = any || in.requires_grad();
        }
        if (any) {
            node->requires_grad = true;
            node->inputs.reserve(inputs.size());
            for (auto& in : inputs) {
                node->inputs.push_back(in.handle());
            }
            node->backward = std::move(backward);
        }
    }
    return Value(std::move(node));
}

inline bool is_scalar(const Value& v) { return v.size() == 1; }

inline void require_rank2(const Value& v, const char* op) {
    if (v.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a rank-2 value, got " + shape_str(v.shape()));
    }
}

template <class Forward, class Derivative>
Value unary(const Value& a, Forward f, Derivative df) {
    std::vector<double> out(a.size());
    const auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(in[i]);
    }
    return make_result(a.shape(), std::move(out), {a}, [df](Node& self) {
        Node& x = *self.inputs[0];
        if (!x.requires_grad) {
            return;
        }
        x.ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            x.grad[i] += self.grad[i] * df(x.data[i], self.data[i]);
        }
    });
}

enum class BinaryKind { add, sub, mul, minimum };

inline Value binary(const Value& a, const Value& b, BinaryKind kind, const char* op) {
    const bool same = a.shape() == b.shape();
    if (!same && !is_scalar(a) && !is_scalar(b)) {
        throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    if (kind == BinaryKind::minimum && !same) {
        throw DimensionError(std::string(op) + ": shapes must be equal, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const bool a_bcast = !same && is_scalar(a);
    const bool b_bcast = !same && is_scalar(b);
    const Shape shape = a_bcast ? b.shape() : a.shape();
    const std::size_t n = shape_size(shape);
    std::vector<double> out(n);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = da[a_bcast ? 0 : i];
        const double y = db[b_bcast ? 0 : i];
        switch (kind) {
            case BinaryKind::add: out[i] = x + y; break;
            case BinaryKind::sub: out[i] = x - y; break;
            case BinaryKind::mul: out[i] = x * y; break;
            case BinaryKind::minimum: out[i] = std::min(x, y); break;
        }
    }
    return make_result(shape, std::move(out), {a, b}, [kind, a_bcast, b_bcast](Node& self) {
        Node& x = *self.inputs[0];
        Node& y = *self.inputs[1];
        const std::size_t n = self.data.size();
        if (x.requires_grad) {
            x.ensure_grad();
        }
        if (y.requires_grad) {
            y.ensure_grad();
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = a_bcast ? 0 : i;
            const std::size_t ib = b_bcast ? 0 : i;
            const double g = self.grad[i];
            double ga = 0.0;
            double gb = 0.0;
            switch (kind) {
                case BinaryKind::add: ga = g; gb = g; break;
                case BinaryKind::sub: ga = g; gb = -g; break;
                case BinaryKind::mul: ga = g * y.data[ib]; gb = g * x.data[ia]; break;
                case BinaryKind::minimum:
                    // Ties route the gradient to the first operand.
                    if (x.data[ia] <= y.data[ib]) {
                        ga = g;
                    } else {
                        gb = g;
                    }
                    break;
            }
            if (x.requires_grad) {
                x.grad[ia] += ga;
            }
            if (y.requires_grad) {
                y.grad[ib] += gb;
            }
        }
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// [m x k] · [k x n] -> [m x n]
inline Value matmul(const Value& a, const Value& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    detail::MapMat(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
        detail::as_mat(a.node(), m, k) * detail::as_mat(b.node(), k, n);
    return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        detail::Node& y = *self.inputs[1];
        const detail::ConstMapMat grad(self.grad.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        if (x.requires_grad) {
            detail::as_grad_mat(x, m, k).noalias() += grad * detail::as_mat(y, k, n).transpose();
        }
        if (y.requires_grad) {
            detail::as_grad_mat(y, k, n).noalias() += detail::as_mat(x, m, k).transpose() * grad;
        }
    });
}

// x [B x in] · Wᵀ (W is [out x in]) + bias ([1 x out] or [out]); bias may be undefined.
inline Value linear(const Value& x, const Value& weight, const Value& bias = Value{}) {
    detail::require_rank2(x, "linear");
    detail::require_rank2(weight, "linear");
    const std::size_t batch = x.rows(), in = x.cols(), out_dim = weight.rows();
    if (weight.cols() != in) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias && bias.size() != out_dim) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    std::vector<double> out(batch * out_dim);
    auto y = detail::MapMat(out.data(), static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(out_dim));
    y.noalias() = detail::as_mat(x.node(), batch, in) * detail::as_mat(weight.node(), out_dim, in).transpose();
    if (has_bias) {
        y.rowwise() += detail::as_mat(bias.node(), 1, out_dim).row(0);
    }
    std::vector<Value> inputs{x, weight};
    if (has_bias) {
        inputs.push_back(bias);
    }
    return detail::make_result({batch, out_dim}, std::move(out), std::move(inputs),
                               [batch, in, out_dim](detail::Node& self) {
        const detail::ConstMapMat g(self.grad.data(), static_cast<Eigen::Index>(batch),
                                    static_cast<Eigen::Index>(out_dim));
        detail::Node& xn = *self.inputs[0];
        detail::Node& wn = *self.inputs[1];
        if (xn.requires_grad) {
            detail::as_grad_mat(xn, batch, in).noalias() += g * detail::as_mat(wn, out_dim, in);
        }
        if (wn.requires_grad) {
            detail::as_grad_mat(wn, out_dim, in).noalias() += g.transpose() * detail::as_mat(xn, batch, in);
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            detail::as_grad_mat(*self.inputs[2], 1, out_dim) += g.colwise().sum();
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic (equal shapes, or scalar against array)

inline Value add(const Value& a, const Value& b) { return detail::binary(a, b, detail::BinaryKind::add, "add"); }
inline Value sub(const Value& a, const Value& b) { return detail::binary(a, b, detail::BinaryKind::sub, "sub"); }
inline Value mul(const Value& a, const Value& b) { return detail::binary(a, b, detail::BinaryKind::mul, "mul"); }
inline Value minimum(const Value& a, const Value& b) {
    return detail::binary(a, b, detail::BinaryKind::minimum, "minimum");
}

inline Value scale(const Value& a, double c) {
    return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Value shift(const Value& a, double c) {
    return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Value neg(const Value& a) { return scale(a, -1.0); }

inline Value square(const Value& a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Value silu(const Value& a) {
    return detail::unary(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Value tanh(const Value& a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Value exp(const Value& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(std::exp(a[i]))) {
            throw DomainError("exp: overflow at index " + std::to_string(i) + " (input " + std::to_string(a[i]) + ")");
        }
    }
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Value log(const Value& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a[i] > 0.0)) {
            throw DomainError("log: non-positive input at index " + std::to_string(i) + " (" + std::to_string(a[i]) +
                              ")");
        }
    }
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// log(1 + e^x), evaluated without overflow.
inline Value softplus(const Value& a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Value clamp(const Value& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and shape plumbing

inline Value sum(const Value& a) {
    const auto d = a.data();
    const double s = std::accumulate(d.begin(), d.end(), 0.0);
    return detail::make_result({1}, {s}, {a}, [](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (double& g : x.grad) {
            g += self.grad[0];
        }
    });
}

inline Value mean(const Value& a) {
    if (a.size() == 0) {
        throw ContractError("mean of an empty value");
    }
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// [B x n] -> [B x 1]
inline Value row_sum(const Value& a) {
    detail::require_rank2(a, "row_sum");
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i] += a.at(i, j);
        }
    }
    return detail::make_result({r, 1}, std::move(out), {a}, [r, c](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                x.grad[i * c + j] += self.grad[i];
            }
        }
    });
}

// Multiplies row i of a [B x n] value by the constant factors[i].
inline Value scale_rows(const Value& a, std::span<const double> factors) {
    detail::require_rank2(a, "scale_rows");
    const std::size_t r = a.rows(), c = a.cols();
    if (factors.size() != r) {
        throw DimensionError("scale_rows: " + std::to_string(factors.size()) + " factors for value " +
                             shape_str(a.shape()));
    }
    std::vector<double> f(factors.begin(), factors.end());
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = f[i] * a.at(i, j);
        }
    }
    return detail::make_result({r, c}, std::move(out), {a}, [r, c, f = std::move(f)](detail::Node& self) {
        detail::Node& x = *self.inputs[0];
        x.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                x.grad[i * c + j] += f[i] * self.grad[i * c + j];
            }
        }
    });
}

// Column-wise concatenation of rank-2 values with equal row counts.
inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: no inputs");
    }
    const std::size_t r = parts.front().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != r) {
            throw DimensionError("concat_cols: row counts differ, " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> out(r * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < widths[k]; ++j) {
                out[i * total + offset + j] = parts[k].at(i, j);
            }
        }
        offset += widths[k];
    }
    return detail::make_result({r, total}, std::move(out), parts, [r, total, widths](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            detail::Node& x = *self.inputs[k];
            if (x.requires_grad) {
                x.ensure_grad();
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < widths[k]; ++j) {
                        x.grad[i * widths[k] + j] += self.grad[i * total + off + j];
                    }
                }
            }
            off += widths[k];
        }
    });
}

// Same data, no backward edge.
inline Value detach(const Value& v) {
    return Value::constant(v.shape(), std::vector<double>(v.data().begin(), v.data().end()));
}

// ---------------------------------------------------------------------------
// Reverse pass

// Accumulates d(root)/d(leaf) into every reachable leaf's grad. Each node is
// visited once, in reverse topological order.
inline void backward(const Value& root) {
    if (root.size() != 1) {
        throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    }
    detail::Node* top = root.handle().get();
    if (!top->requires_grad) {
        return;
    }
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{top, 0}};
    seen.insert(top);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    top->ensure_grad();
    top->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward) {
            node->ensure_grad();
            node->backward(*node);
            // Intermediate grads are per-pass scratch.
            node->grad.clear();
        }
    }
}

inline void zero_grads(std::span<Value> params) {
    for (auto& p : params) {
        p.zero_grad();
    }
}

inline void zero_grads(std::vector<Value>& params) { zero_grads(std::span<Value>(params)); }

// ---------------------------------------------------------------------------
// Randomness

inline Value randn(Rng& rng, Shape shape) {
    std::vector<double> data(shape_size(shape));
    for (double& x : data) {
        x = rng.normal();
    }
    return Value::constant(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

struct GradCheckEntry {
    std::size_t param_index = 0;
    std::size_t worst_element = 0;
    double max_rel_error = 0.0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> params;
    double max_rel_error = 0.0;
    bool passed = true;
};

// Compares reverse-mode gradients of `f` against central differences of step
// h. The error of one element is |a - n| / max(|a|, |n|, abs_floor).
// `f` must rebuild its graph from the current contents of `params`.
inline GradCheckReport grad_check(const std::function<Value()>& f, std::vector<Value> params, double h = 1e-5,
                                  double tol = 1e-3, double abs_floor = 1e-4) {
    if (!(h > 0.0)) {
        throw ContractError("grad_check: step h must be positive");
    }
    zero_grads(params);
    backward(f());
    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Value& param = params[p];
        GradCheckEntry entry;
        entry.param_index = p;
        auto data = param.data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double saved = data[j];
            data[j] = saved + h;
            const double up = f().item();
            data[j] = saved - h;
            const double down = f().item();
            data[j] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = param.grad()[j];
            if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
                throw NumericError("grad_check: non-finite gradient for parameter " + std::to_string(p) +
                                   " element " + std::to_string(j));
            }
            const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
            const double err = std::abs(analytic - numeric) / denom;
            if (j == 0 || err > entry.max_rel_error) {
                entry.max_rel_error = err;
                entry.worst_element = j;
                entry.analytic = analytic;
                entry.numeric = numeric;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.params.push_back(entry);
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

}  // namespace dmdrlab
