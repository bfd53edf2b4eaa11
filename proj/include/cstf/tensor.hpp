#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <iostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cstf {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Shape or dimension mismatch between operands.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration value (epsilon, factor, mode, ...).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Violated call contract (non-scalar loss, empty ground truth, ...).
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// mt19937_64 output is fully specified by the standard; the helpers below
// avoid std::uniform_real_distribution, whose stream is implementation
// defined, so that seeded runs are bit-identical across toolchains.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t uniform_int(std::size_t n) {
        if (n == 0) return 0;
        std::size_t v = static_cast<std::size_t>(uniform() * static_cast<double>(n));
        return v >= n ? n - 1 : v;
    }

    /// Knuth sampler; deterministic given the engine state.
    int poisson(double lambda) {
        const double limit = std::exp(-lambda);
        double p = 1.0;
        int k = 0;
        do {
            ++k;
            p *= uniform();
        } while (p > limit);
        return k - 1;
    }

private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // sized only while requires_grad is set
    bool requires_grad = false;
};

// Pairwise reduction keeps block averages exact: summing 2^k identical
// values yields repeated exact doublings, so mean-of-replicas round trips
// (upsample followed by pooling) are bit-exact for power-of-two windows.
template <typename T, typename F>
T pairwise_reduce(std::size_t lo, std::size_t hi, F&& get) {
    if (hi - lo == 1) return get(lo);
    const std::size_t mid = lo + (hi - lo) / 2;
    return pairwise_reduce<T>(lo, mid, get) + pairwise_reduce<T>(mid, hi, get);
}

}  // namespace detail

/// Dense row-major tensor. Copyable handle over shared storage; a handle is
/// immutable by convention after it has been recorded on the graph, except
/// for gradient accumulation during backward and explicit parameter updates
/// between steps.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires float or double");

public:
    Tensor() : d_(std::make_shared<detail::TensorData<T>>()) {}

    explicit Tensor(Shape shape) : d_(std::make_shared<detail::TensorData<T>>()) {
        d_->shape = std::move(shape);
        d_->values.assign(shape_numel(d_->shape), T(0));
    }

    Tensor(Shape shape, std::vector<T> values) : d_(std::make_shared<detail::TensorData<T>>()) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor init: " + shape_str(shape) + " incompatible with " +
                             std::to_string(values.size()) + " values");
        }
        d_->shape = std::move(shape);
        d_->values = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.d_->values.begin(), t.d_->values.end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.d_->values) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    const Shape& shape() const { return d_->shape; }
    std::size_t ndim() const { return d_->shape.size(); }
    std::size_t size() const { return d_->values.size(); }

    T* data() { return d_->values.data(); }
    const T* data() const { return d_->values.data(); }
    const std::vector<T>& values() const { return d_->values; }

    T value() const {
        if (size() != 1) throw ContractError("value(): tensor " + shape_str(shape()) + " is not scalar");
        return d_->values[0];
    }

    T& at(std::size_t i, std::size_t j) {
        return d_->values[i * d_->shape[1] + j];
    }
    T at(std::size_t i, std::size_t j) const {
        return d_->values[i * d_->shape[1] + j];
    }
    T& at(std::size_t c, std::size_t h, std::size_t w) {
        return d_->values[(c * d_->shape[1] + h) * d_->shape[2] + w];
    }
    T at(std::size_t c, std::size_t h, std::size_t w) const {
        return d_->values[(c * d_->shape[1] + h) * d_->shape[2] + w];
    }

    bool requires_grad() const { return d_->requires_grad; }

    Tensor& set_requires_grad(bool on) {
        d_->requires_grad = on;
        if (on) {
            d_->grad.assign(d_->values.size(), T(0));
        } else {
            d_->grad.clear();
        }
        return *this;
    }

    const std::vector<T>& grad() const { return d_->grad; }
    void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), T(0)); }

    /// Deep copy (values only; grad state not carried over).
    Tensor clone() const { return Tensor(d_->shape, d_->values); }

    bool all_finite() const {
        for (T v : d_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::shared_ptr<detail::TensorData<T>> node() const { return d_; }

private:
    std::shared_ptr<detail::TensorData<T>> d_;
};

// ---------------------------------------------------------------------------
// Recording graph (tape)
//
// Forward ops append one backprop closure per recorded node; backward walks
// the tape once in reverse append order and then resets it.
// ---------------------------------------------------------------------------

inline bool& grad_mode() {
    static thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
class Graph {
public:
    static Graph& current() {
        static thread_local Graph g;
        return g;
    }

    void push(std::function<void()> backprop) { nodes_.push_back(std::move(backprop)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        clear();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

template <typename T>
bool tracing(const Tensor<T>& a) {
    return grad_mode() && a.requires_grad();
}
template <typename T>
bool tracing(const Tensor<T>& a, const Tensor<T>& b) {
    return grad_mode() && (a.requires_grad() || b.requires_grad());
}
template <typename T>
bool tracing(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
    return grad_mode() && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

template <typename T>
void mark_output(Tensor<T>& out) {
    out.set_requires_grad(true);
}

}  // namespace detail

/// Reverse-mode gradients for every requires_grad tensor reachable from
/// `loss`. Consumes the recorded graph.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss is not attached to a recorded graph");
    }
    loss.node()->grad[0] = T(1);
    Graph<T>::current().run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

    if (detail::tracing(a, b)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), bn = b.node(), on = out.node()] {
            const auto& g = on->grad;
            if (an->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];

    if (detail::tracing(a, b)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), bn = b.node(), on = out.node()] {
            const auto& g = on->grad;
            if (an->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];

    if (detail::tracing(a, b)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), bn = b.node(), on = out.node()] {
            const auto& g = on->grad;
            if (an->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->values[i];
            if (bn->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->values[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * s;

    if (detail::tracing(a)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), on = out.node(), s] {
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * s;
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<T> out(Shape{m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* brow = pb + kk * n;
            T* orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }

    if (detail::tracing(a, b)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            const auto& g = on->grad;
            if (an->requires_grad) {
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T gv = g[i * n + j];
                        for (std::size_t kk = 0; kk < k; ++kk)
                            an->grad[i * k + kk] += gv * bn->values[kk * n + j];
                    }
            }
            if (bn->requires_grad) {
                // dB = A^T * dC
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T av = an->values[i * k + kk];
                        for (std::size_t j = 0; j < n; ++j)
                            bn->grad[kk * n + j] += av * g[i * n + j];
                    }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor<T> out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];

    if (detail::tracing(a)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), on = out.node(), m, n] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.size()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
    }
    Tensor<T> out(std::move(new_shape), std::vector<T>(a.data(), a.data() + a.size()));

    if (detail::tracing(a)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), on = out.node()] {
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

/// y = x * w^T for x: [p x cin], w: [cout x cin].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1]) {
        throw ShapeError("linear: " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
    }
    const std::size_t p = x.shape()[0], cin = x.shape()[1], cout = w.shape()[0];
    Tensor<T> out(Shape{p, cout});
    for (std::size_t i = 0; i < p; ++i) {
        const T* xr = x.data() + i * cin;
        T* orow = out.data() + i * cout;
        for (std::size_t o = 0; o < cout; ++o) {
            const T* wr = w.data() + o * cin;
            T acc = 0;
            for (std::size_t c = 0; c < cin; ++c) acc += xr[c] * wr[c];
            orow[o] = acc;
        }
    }

    if (detail::tracing(x, w)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), wn = w.node(), on = out.node(), p, cin, cout] {
            const auto& g = on->grad;
            if (xn->requires_grad) {
                for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t o = 0; o < cout; ++o) {
                        const T gv = g[i * cout + o];
                        for (std::size_t c = 0; c < cin; ++c)
                            xn->grad[i * cin + c] += gv * wn->values[o * cin + c];
                    }
            }
            if (wn->requires_grad) {
                for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t o = 0; o < cout; ++o) {
                        const T gv = g[i * cout + o];
                        for (std::size_t c = 0; c < cin; ++c)
                            wn->grad[o * cin + c] += gv * xn->values[i * cin + c];
                    }
            }
        });
    }
    return out;
}

/// Adds row vector v (length c) to every row of x: [p x c].
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.ndim() != 2 || v.ndim() != 1 || v.shape()[0] != x.shape()[1]) {
        throw ShapeError("add_rows: " + shape_str(x.shape()) + " with " + shape_str(v.shape()));
    }
    const std::size_t p = x.shape()[0], c = x.shape()[1];
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] + v.data()[j];

    if (detail::tracing(x, v)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), vn = v.node(), on = out.node(), p, c] {
            const auto& g = on->grad;
            if (xn->requires_grad)
                for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
            if (vn->requires_grad)
                for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t j = 0; j < c; ++j) vn->grad[j] += g[i * c + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rows(linear(x, w), b);
}

/// Concatenation along the column (last) axis of two [p x *] matrices.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[0]) {
        throw ShapeError("concat_cols: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t p = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
    Tensor<T> out(Shape{p, ca + cb});
    for (std::size_t i = 0; i < p; ++i) {
        std::copy(a.data() + i * ca, a.data() + (i + 1) * ca, out.data() + i * (ca + cb));
        std::copy(b.data() + i * cb, b.data() + (i + 1) * cb, out.data() + i * (ca + cb) + ca);
    }

    if (detail::tracing(a, b)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), bn = b.node(), on = out.node(), p, ca, cb] {
            const auto& g = on->grad;
            for (std::size_t i = 0; i < p; ++i) {
                if (an->requires_grad)
                    for (std::size_t j = 0; j < ca; ++j) an->grad[i * ca + j] += g[i * (ca + cb) + j];
                if (bn->requires_grad)
                    for (std::size_t j = 0; j < cb; ++j) bn->grad[i * cb + j] += g[i * (ca + cb) + ca + j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    Tensor<T> out(Shape{1});
    T acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    out.data()[0] = acc;

    if (detail::tracing(a)) {
        detail::mark_output(out);
        Graph<T>::current().push([an = a.node(), on = out.node()] {
            const T g = on->grad[0];
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

namespace detail {

// Decomposes an axis reduction: flat index = (outer * m + k) * inner + i.
struct AxisSplit {
    std::size_t outer, m, inner;
};

inline AxisSplit axis_split(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

/// Numerically stabilized softmax along `axis`; slices sum to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const auto s = detail::axis_split(x.shape(), axis);
    if (s.m == 0) throw ShapeError("softmax: empty axis slice in " + shape_str(x.shape()));

    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.m * s.inner + i;
            T mx = px[base];
            for (std::size_t k = 1; k < s.m; ++k) mx = std::max(mx, px[base + k * s.inner]);
            T sum = 0;
            for (std::size_t k = 0; k < s.m; ++k) {
                const T e = std::exp(px[base + k * s.inner] - mx);
                po[base + k * s.inner] = e;
                sum += e;
            }
            for (std::size_t k = 0; k < s.m; ++k) po[base + k * s.inner] /= sum;
        }
    }

    if (detail::tracing(x)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), on = out.node(), s] {
            // dx = y * (dy - <dy, y>) per slice
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const std::size_t base = o * s.m * s.inner + i;
                    T dot = 0;
                    for (std::size_t k = 0; k < s.m; ++k) {
                        const std::size_t idx = base + k * s.inner;
                        dot += on->grad[idx] * on->values[idx];
                    }
                    for (std::size_t k = 0; k < s.m; ++k) {
                        const std::size_t idx = base + k * s.inner;
                        xn->grad[idx] += on->values[idx] * (on->grad[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

/// Layer normalization along `axis` with learned gain/bias of that length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps,
                     std::size_t axis) {
    if (eps <= T(0)) throw ConfigError("layer_norm: eps must be positive");
    const auto s = detail::axis_split(x.shape(), axis);
    if (gain.size() != s.m || bias.size() != s.m) {
        throw ShapeError("layer_norm: gain/bias length " + std::to_string(gain.size()) +
                         " does not match axis extent " + std::to_string(s.m));
    }

    Tensor<T> out(x.shape());
    const T* px = x.data();
    const T* pg = gain.data();
    const T* pb = bias.data();
    T* po = out.data();
    const T invm = T(1) / static_cast<T>(s.m);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.m * s.inner + i;
            T mean = 0;
            for (std::size_t k = 0; k < s.m; ++k) mean += px[base + k * s.inner];
            mean *= invm;
            T var = 0;
            for (std::size_t k = 0; k < s.m; ++k) {
                const T d = px[base + k * s.inner] - mean;
                var += d * d;
            }
            var *= invm;
            const T istd = T(1) / std::sqrt(var + eps);
            for (std::size_t k = 0; k < s.m; ++k) {
                const T xh = (px[base + k * s.inner] - mean) * istd;
                po[base + k * s.inner] = pg[k] * xh + pb[k];
            }
        }
    }

    if (detail::tracing(x, gain, bias)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), gn = gain.node(), bn = bias.node(),
                                  on = out.node(), s, eps, invm] {
            for (std::size_t o = 0; o < s.outer; ++o) {
                for (std::size_t i = 0; i < s.inner; ++i) {
                    const std::size_t base = o * s.m * s.inner + i;
                    T mean = 0;
                    for (std::size_t k = 0; k < s.m; ++k) mean += xn->values[base + k * s.inner];
                    mean *= invm;
                    T var = 0;
                    for (std::size_t k = 0; k < s.m; ++k) {
                        const T d = xn->values[base + k * s.inner] - mean;
                        var += d * d;
                    }
                    var *= invm;
                    const T istd = T(1) / std::sqrt(var + eps);

                    T dvar = 0, dmean_a = 0, dsum_centered = 0;
                    for (std::size_t k = 0; k < s.m; ++k) {
                        const std::size_t idx = base + k * s.inner;
                        const T centered = xn->values[idx] - mean;
                        const T dxh = on->grad[idx] * gn->values[k];
                        dvar += dxh * centered;
                        dmean_a += dxh;
                        dsum_centered += centered;
                        if (gn->requires_grad) gn->grad[k] += on->grad[idx] * centered * istd;
                        if (bn->requires_grad) bn->grad[k] += on->grad[idx];
                    }
                    dvar *= T(-0.5) * istd * istd * istd;
                    const T dmean = -istd * dmean_a + dvar * T(-2) * invm * dsum_centered;
                    if (xn->requires_grad) {
                        for (std::size_t k = 0; k < s.m; ++k) {
                            const std::size_t idx = base + k * s.inner;
                            const T centered = xn->values[idx] - mean;
                            const T dxh = on->grad[idx] * gn->values[k];
                            xn->grad[idx] += dxh * istd + dvar * T(2) * invm * centered + dmean * invm;
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    return layer_norm(x, gain, bias, eps, x.ndim() - 1);
}

/// Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    static const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
    static const T inv_sqrt2pi = static_cast<T>(0.3989422804014326779);
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x.data()[i];
        out.data()[i] = v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    }

    if (detail::tracing(x)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), on = out.node()] {
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const T v = xn->values[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                xn->grad[i] += on->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial ops on [c x h x w] maps
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
    if (x.ndim() != 3) throw ShapeError("avg_pool2d: expected [c x h x w], got " + shape_str(x.shape()));
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (kernel == 0 || stride == 0) throw ConfigError("avg_pool2d: kernel and stride must be >= 1");
    if (kernel > h || kernel > w) {
        throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) + " exceeds input " +
                         shape_str(x.shape()));
    }
    const std::size_t oh = (h - kernel) / stride + 1;
    const std::size_t ow = (w - kernel) / stride + 1;
    if ((h - kernel) % stride != 0 || (w - kernel) % stride != 0) {
        std::cerr << "avg_pool2d: input " << shape_str(x.shape())
                  << " not divisible by stride; trimming right/bottom remainder\n";
    }

    Tensor<T> out(Shape{c, oh, ow});
    const T window = static_cast<T>(kernel * kernel);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                const std::size_t h0 = i * stride, w0 = j * stride;
                const T sum = detail::pairwise_reduce<T>(0, kernel * kernel, [&](std::size_t t) {
                    return x.at(ch, h0 + t / kernel, w0 + t % kernel);
                });
                out.at(ch, i, j) = sum / window;
            }
        }
    }

    if (detail::tracing(x)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), on = out.node(), c, h, w, oh, ow, kernel, stride] {
            const T inv = T(1) / static_cast<T>(kernel * kernel);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const T g = on->grad[(ch * oh + i) * ow + j] * inv;
                        for (std::size_t u = 0; u < kernel; ++u)
                            for (std::size_t v = 0; v < kernel; ++v)
                                xn->grad[(ch * h + i * stride + u) * w + j * stride + v] += g;
                    }
        });
    }
    return out;
}

/// Pools to an exact [gh x gw] output grid; window boundaries follow the
/// usual adaptive rule floor(o*h/g) .. floor((o+1)*h/g).
template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t gh, std::size_t gw) {
    if (x.ndim() != 3) throw ShapeError("adaptive_avg_pool2d: expected [c x h x w]");
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (gh == 0 || gw == 0) throw ConfigError("adaptive_avg_pool2d: grid must be >= 1");
    if (gh > h || gw > w) {
        throw ShapeError("adaptive_avg_pool2d: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                         " exceeds input " + shape_str(x.shape()));
    }

    Tensor<T> out(Shape{c, gh, gw});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < gh; ++i) {
            const std::size_t h0 = i * h / gh, h1 = (i + 1) * h / gh;
            for (std::size_t j = 0; j < gw; ++j) {
                const std::size_t w0 = j * w / gw, w1 = (j + 1) * w / gw;
                const std::size_t kw = w1 - w0, count = (h1 - h0) * kw;
                const T sum = detail::pairwise_reduce<T>(0, count, [&](std::size_t t) {
                    return x.at(ch, h0 + t / kw, w0 + t % kw);
                });
                out.at(ch, i, j) = sum / static_cast<T>(count);
            }
        }
    }

    if (detail::tracing(x)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), on = out.node(), c, h, w, gh, gw] {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < gh; ++i) {
                    const std::size_t h0 = i * h / gh, h1 = (i + 1) * h / gh;
                    for (std::size_t j = 0; j < gw; ++j) {
                        const std::size_t w0 = j * w / gw, w1 = (j + 1) * w / gw;
                        const T g = on->grad[(ch * gh + i) * gw + j] /
                                    static_cast<T>((h1 - h0) * (w1 - w0));
                        for (std::size_t u = h0; u < h1; ++u)
                            for (std::size_t v = w0; v < w1; ++v) xn->grad[(ch * h + u) * w + v] += g;
                    }
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor_h, int factor_w) {
    if (x.ndim() != 3) throw ShapeError("upsample_nearest: expected [c x h x w]");
    if (factor_h < 1 || factor_w < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
    const std::size_t fh = static_cast<std::size_t>(factor_h);
    const std::size_t fw = static_cast<std::size_t>(factor_w);
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    Tensor<T> out(Shape{c, h * fh, w * fw});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * fh; ++i)
            for (std::size_t j = 0; j < w * fw; ++j) out.at(ch, i, j) = x.at(ch, i / fh, j / fw);

    if (detail::tracing(x)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), on = out.node(), c, h, w, fh, fw] {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < h * fh; ++i)
                    for (std::size_t j = 0; j < w * fw; ++j)
                        xn->grad[(ch * h + i / fh) * w + j / fw] +=
                            on->grad[(ch * h * fh + i) * w * fw + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
    return upsample_nearest(x, factor, factor);
}

/// Zero-padded 2-d convolution: x [cin x h x w], w [cout x cin x kh x kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    if (x.ndim() != 3 || weight.ndim() != 4) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t cout = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
    if (weight.shape()[1] != cin) {
        throw ShapeError("conv2d: weight expects " + std::to_string(weight.shape()[1]) +
                         " input channels, input has " + std::to_string(cin));
    }
    if (bias.size() != cout) throw ShapeError("conv2d: bias length mismatch");
    if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
    if (h + 2 * pad < kh || w + 2 * pad < kw) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;

    // valid output index range [lo, hi) for one kernel tap: the taps near the
    // border fall into padding, so the per-pixel bound checks hoist out here
    const auto tap_range = [stride, pad](std::size_t tap, std::size_t in_dim, std::size_t out_dim) {
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(tap) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
        std::ptrdiff_t lo = off < 0 ? (-off + s - 1) / s : 0;
        std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in_dim) - 1 - off) / s + 1;
        hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_dim));
        return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo, 0)),
                                                   static_cast<std::size_t>(std::max<std::ptrdiff_t>(hi, 0)));
    };

    Tensor<T> out(Shape{cout, oh, ow});
    const T* px = x.data();
    const T* pw = weight.data();
    T* po = out.data();
    for (std::size_t oc = 0; oc < cout; ++oc) {
        const T b = bias.data()[oc];
        T* oc_base = po + oc * oh * ow;
        std::fill(oc_base, oc_base + oh * ow, b);
        for (std::size_t ic = 0; ic < cin; ++ic) {
            const T* xc = px + ic * h * w;
            const T* wc = pw + ((oc * cin + ic) * kh) * kw;
            for (std::size_t u = 0; u < kh; ++u) {
                const auto [i_lo, i_hi] = tap_range(u, h, oh);
                for (std::size_t v = 0; v < kw; ++v) {
                    const T wv = wc[u * kw + v];
                    const auto [j_lo, j_hi] = tap_range(v, w, ow);
                    for (std::size_t i = i_lo; i < i_hi; ++i) {
                        const T* xrow = xc + (i * stride + u - pad) * w + v - pad;
                        T* orow = oc_base + i * ow;
                        for (std::size_t j = j_lo; j < j_hi; ++j) {
                            orow[j] += wv * xrow[j * stride];
                        }
                    }
                }
            }
        }
    }

    if (detail::tracing(x, weight, bias)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), wn = weight.node(), bn = bias.node(),
                                  on = out.node(), cin, h, w, cout, kh, kw, oh, ow, stride, pad,
                                  tap_range] {
            const T* gout = on->grad.data();
            const T* xv = xn->values.data();
            const T* wv = wn->values.data();
            T* xg = xn->requires_grad ? xn->grad.data() : nullptr;
            T* wg = wn->requires_grad ? wn->grad.data() : nullptr;
            T* bg = bn->requires_grad ? bn->grad.data() : nullptr;
            if (bg) {
                for (std::size_t oc = 0; oc < cout; ++oc) {
                    const T* grow = gout + oc * oh * ow;
                    T acc = 0;
                    for (std::size_t t = 0; t < oh * ow; ++t) acc += grow[t];
                    bg[oc] += acc;
                }
            }
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const T* gc = gout + oc * oh * ow;
                for (std::size_t ic = 0; ic < cin; ++ic) {
                    const T* xc = xv + ic * h * w;
                    T* xgc = xg ? xg + ic * h * w : nullptr;
                    const std::size_t wbase = ((oc * cin + ic) * kh) * kw;
                    for (std::size_t u = 0; u < kh; ++u) {
                        const auto [i_lo, i_hi] = tap_range(u, h, oh);
                        for (std::size_t v = 0; v < kw; ++v) {
                            const auto [j_lo, j_hi] = tap_range(v, w, ow);
                            const T wtap = wv[wbase + u * kw + v];
                            T wacc = 0;
                            for (std::size_t i = i_lo; i < i_hi; ++i) {
                                const std::size_t xoff = (i * stride + u - pad) * w + v - pad;
                                const T* grow = gc + i * ow;
                                if (xgc) {
                                    T* xgrow = xgc + xoff;
                                    for (std::size_t j = j_lo; j < j_hi; ++j)
                                        xgrow[j * stride] += grow[j] * wtap;
                                }
                                if (wg) {
                                    const T* xrow = xc + xoff;
                                    for (std::size_t j = j_lo; j < j_hi; ++j)
                                        wacc += grow[j] * xrow[j * stride];
                                }
                            }
                            if (wg) wg[wbase + u * kw + v] += wacc;
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// Per-channel strided convolution (no padding): x [c x h x w], w [c x kh x kw].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride) {
    if (x.ndim() != 3 || weight.ndim() != 3 || weight.shape()[0] != x.shape()[0]) {
        throw ShapeError("depthwise_conv2d: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t kh = weight.shape()[1], kw = weight.shape()[2];
    if (kh > h || kw > w) throw ShapeError("depthwise_conv2d: kernel larger than input");
    if (stride == 0) throw ConfigError("depthwise_conv2d: stride must be >= 1");
    const std::size_t oh = (h - kh) / stride + 1;
    const std::size_t ow = (w - kw) / stride + 1;

    Tensor<T> out(Shape{c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                T acc = 0;
                for (std::size_t u = 0; u < kh; ++u)
                    for (std::size_t v = 0; v < kw; ++v)
                        acc += weight.at(ch, u, v) * x.at(ch, i * stride + u, j * stride + v);
                out.at(ch, i, j) = acc;
            }
    }

    if (detail::tracing(x, weight)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), wn = weight.node(), on = out.node(), c, h, w, kh,
                                  kw, oh, ow, stride] {
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                        const T g = on->grad[(ch * oh + i) * ow + j];
                        for (std::size_t u = 0; u < kh; ++u)
                            for (std::size_t v = 0; v < kw; ++v) {
                                const std::size_t xi = (ch * h + i * stride + u) * w + j * stride + v;
                                const std::size_t wi = (ch * kh + u) * kw + v;
                                if (xn->requires_grad) xn->grad[xi] += g * wn->values[wi];
                                if (wn->requires_grad) wn->grad[wi] += g * xn->values[xi];
                            }
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses and descriptor helpers
// ---------------------------------------------------------------------------

/// Rows scaled to unit length: y_r = x_r / sqrt(|x_r|^2 + eps).
template <typename T>
Tensor<T> row_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
    if (x.ndim() != 2) throw ShapeError("row_normalize: expected 2-d tensor");
    const std::size_t p = x.shape()[0], c = x.shape()[1];
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < p; ++i) {
        T ss = 0;
        for (std::size_t j = 0; j < c; ++j) ss += x.at(i, j) * x.at(i, j);
        const T d = std::sqrt(ss + eps);
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) / d;
    }

    if (detail::tracing(x)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), on = out.node(), p, c, eps] {
            for (std::size_t i = 0; i < p; ++i) {
                T ss = 0, dot = 0;
                for (std::size_t j = 0; j < c; ++j) {
                    ss += xn->values[i * c + j] * xn->values[i * c + j];
                    dot += on->grad[i * c + j] * xn->values[i * c + j];
                }
                const T d = std::sqrt(ss + eps);
                const T d3 = d * d * d;
                for (std::size_t j = 0; j < c; ++j)
                    xn->grad[i * c + j] +=
                        on->grad[i * c + j] / d - xn->values[i * c + j] * dot / d3;
            }
        });
    }
    return out;
}

/// Mean of -log(x[i]) over the given flat cells; shared by the matching loss
/// and the per-pixel cross entropy.
template <typename T>
Tensor<T> mean_neg_log_cells(const Tensor<T>& x, const std::vector<std::size_t>& cells) {
    if (cells.empty()) throw ContractError("mean_neg_log_cells: empty cell set");
    for (std::size_t idx : cells) {
        if (idx >= x.size()) throw ContractError("mean_neg_log_cells: cell index out of bounds");
    }
    Tensor<T> out(Shape{1});
    T acc = 0;
    for (std::size_t idx : cells) acc -= std::log(x.data()[idx]);
    out.data()[0] = acc / static_cast<T>(cells.size());

    if (detail::tracing(x)) {
        detail::mark_output(out);
        Graph<T>::current().push([xn = x.node(), on = out.node(), cells] {
            const T g = on->grad[0] / static_cast<T>(cells.size());
            for (std::size_t idx : cells) xn->grad[idx] -= g / xn->values[idx];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central-difference gradient of f at x: (f(x+h e_i) - f(x-h e_i)) / 2h.
/// f must be a pure function of the tensor contents; x is perturbed in place
/// and restored bit-exactly. Recording is disabled for the probe evaluations.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, Tensor<T>& x, T h) {
    NoGradGuard off;
    Tensor<T> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T keep = x.data()[i];
        x.data()[i] = keep + h;
        const T fp = f(x);
        x.data()[i] = keep - h;
        const T fm = f(x);
        x.data()[i] = keep;
        g.data()[i] = (fp - fm) / (T(2) * h);
    }
    return g;
}

}  // namespace cstf
