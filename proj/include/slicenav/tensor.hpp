#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slicenav/errors.hpp"
#include "slicenav/rng.hpp"

// Dense tensors with reverse-mode automatic differentiation.
//
// Every differentiable op runs its forward pass eagerly and, when a Tape is
// active on the current thread and an input requires gradients, records a
// backward closure. Tape::backward(loss) replays the closures in reverse.
// Gradients accumulate until explicitly zeroed; repeated backward calls
// without a tape reset accumulate as well.
//
// The scalar type is a template parameter: training runs in float, gradient
// checking re-instantiates the same code in double.

namespace slicenav {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (const std::size_t d : s) n *= d;
    return n;
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first needed; same length as value afterwards
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <class T>
class Tensor {
public:
    Tensor() : node_(std::make_shared<TensorNode<T>>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->value.assign(shape_numel(t.node_->shape), T(0));
        t.node_->requires_grad = requires_grad;
        if (requires_grad) t.node_->ensure_grad();
        return t;
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (T& v : t.node_->value) v = fill;
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " elements");
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        if (requires_grad) t.node_->ensure_grad();
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rank() const { return node_->shape.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) {
        node_->requires_grad = b;
        if (b) node_->ensure_grad();
    }

    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    T& at(std::size_t i) { return node_->value[i]; }
    T at(std::size_t i) const { return node_->value[i]; }
    T& at(std::size_t i, std::size_t j) { return node_->value[i * node_->shape.back() + j]; }
    T at(std::size_t i, std::size_t j) const { return node_->value[i * node_->shape.back() + j]; }

    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    bool all_finite() const {
        for (const T v : node_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of executed differentiable operations.
template <class T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active_slot() {
        static thread_local Tape* active = nullptr;
        return active;
    }
    static Tape* active() { return active_slot(); }

    void record(std::function<void()> backward_fn, std::shared_ptr<TensorNode<T>> output) {
        records_.push_back({std::move(backward_fn), std::move(output)});
    }

    std::size_t size() const { return records_.size(); }

    void reset() { records_.clear(); }

    // Replays all adjoints in reverse order. Grads of recorded op outputs
    // (intermediates) are recomputed from scratch each pass; leaf gradients
    // accumulate, so calling again without reset() adds another full pass.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        for (auto& r : records_) {
            r.output->ensure_grad();
            std::fill(r.output->grad.begin(), r.output->grad.end(), T(0));
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] += T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();
    }

private:
    struct Record {
        std::function<void()> fn;
        std::shared_ptr<TensorNode<T>> output;
    };
    std::vector<Record> records_;
};

// Activates a tape for the enclosing scope (one thread, one model instance).
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_slot()) {
        Tape<T>::active_slot() = &tape;
    }
    ~TapeScope() { Tape<T>::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

template <class T>
void backward(Tensor<T>& loss) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) throw ValidationError("backward: no active tape");
    tape->backward(loss);
}

namespace detail {

template <class T>
inline bool want_tape(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <class T>
inline bool any_requires(std::initializer_list<const Tensor<T>*> inputs) {
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// y = a @ b for a:[m,k], b:[k,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> y = Tensor<T>::zeros({m, n});
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* py = y.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* pbrow = pb + kk * n;
            T* pyrow = py + i * n;
            for (std::size_t j = 0; j < n; ++j) pyrow[j] += av * pbrow[j];
        }
    y.set_requires_grad(detail::any_requires<T>({&a, &b}));
    if (detail::want_tape<T>({&a, &b})) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape<T>::active()->record([an, bn, yn, m, k, n]() {
            const T* gy = yn->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                T* ga = an->grad.data();
                const T* pb2 = bn->value.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T g = gy[i * n + j];
                        const T* pbrow = pb2 + j;
                        for (std::size_t kk = 0; kk < k; ++kk)
                            ga[i * k + kk] += g * pbrow[kk * n];
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                T* gb = bn->grad.data();
                const T* pa2 = an->value.data();
                for (std::size_t kk = 0; kk < k; ++kk)
                    for (std::size_t i = 0; i < m; ++i) {
                        const T av = pa2[i * k + kk];
                        const T* gyrow = gy + i * n;
                        T* gbrow = gb + kk * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * gyrow[j];
                    }
            }
        }, yn);
    }
    return y;
}

// y = a @ b^T for a:[m,k], b:[n,k]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> y = Tensor<T>::zeros({m, n});
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* py = y.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const T* ar = pa + i * k;
            const T* br = pb + j * k;
            T acc = 0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
            py[i * n + j] = acc;
        }
    y.set_requires_grad(detail::any_requires<T>({&a, &b}));
    if (detail::want_tape<T>({&a, &b})) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape<T>::active()->record([an, bn, yn, m, k, n]() {
            const T* gy = yn->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                T* ga = an->grad.data();
                const T* pb2 = bn->value.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T g = gy[i * n + j];
                        const T* br = pb2 + j * k;
                        T* gar = ga + i * k;
                        for (std::size_t kk = 0; kk < k; ++kk) gar[kk] += g * br[kk];
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                T* gb = bn->grad.data();
                const T* pa2 = an->value.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const T g = gy[i * n + j];
                        const T* ar = pa2 + i * k;
                        T* gbr = gb + j * k;
                        for (std::size_t kk = 0; kk < k; ++kk) gbr[kk] += g * ar[kk];
                    }
            }
        }, yn);
    }
    return y;
}

namespace detail {

template <class T, class Fwd, class Bwd>
Tensor<T> elementwise_binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                             Bwd bwd) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) y.at(i) = fwd(a.at(i), b.at(i));
    y.set_requires_grad(any_requires<T>({&a, &b}));
    if (want_tape<T>({&a, &b})) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape<T>::active()->record([an, bn, yn, n, bwd]() {
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T g = yn->grad[i];
                T da = 0, db = 0;
                bwd(an->value[i], bn->value[i], g, da, db);
                if (an->requires_grad) an->grad[i] += da;
                if (bn->requires_grad) bn->grad[i] += db;
            }
        }, yn);
    }
    return y;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary(
        a, b, "add", [](T x, T yv) { return x + yv; },
        [](T, T, T g, T& da, T& db) {
            da = g;
            db = g;
        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary(
        a, b, "sub", [](T x, T yv) { return x - yv; },
        [](T, T, T g, T& da, T& db) {
            da = g;
            db = -g;
        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary(
        a, b, "mul", [](T x, T yv) { return x * yv; },
        [](T x, T yv, T g, T& da, T& db) {
            da = g * yv;
            db = g * x;
        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) y.at(i) = c * x.at(i);
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, n, c]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += c * yn->grad[i];
        }, yn);
    }
    return y;
}

// x:[m,n] + row vector b:[n] broadcast over rows
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw ShapeError("add_rowvec: shapes " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y.at(i, j) = x.at(i, j) + b.at(j);
    y.set_requires_grad(detail::any_requires<T>({&x, &b}));
    if (detail::want_tape<T>({&x, &b})) {
        auto xn = x.node(), bn = b.node(), yn = y.node();
        Tape<T>::active()->record([xn, bn, yn, m, n]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += yn->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += yn->grad[i * n + j];
            }
        }, yn);
    }
    return y;
}

// y = x @ W + b for x:[m,k], W:[k,n], b:[n]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) y.at(i) = x.at(i) > T(0) ? x.at(i) : T(0);
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, n]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                if (xn->value[i] > T(0)) xn->grad[i] += yn->grad[i];
        }, yn);
    }
    return y;
}

// Elementwise log with values floored at `floor` (the clamped region has
// zero gradient). The floor keeps masked-adjacent zeros out of log(0).
template <class T>
Tensor<T> log_floored(const Tensor<T>& x, T floor = T(1e-12)) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i)
        y.at(i) = std::log(x.at(i) > floor ? x.at(i) : floor);
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, n, floor]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                if (xn->value[i] > floor) xn->grad[i] += yn->grad[i] / xn->value[i];
        }, yn);
    }
    return y;
}

template <class T>
Tensor<T> absval(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) y.at(i) = std::fabs(x.at(i));
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, n]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                if (xn->value[i] > T(0))
                    xn->grad[i] += yn->grad[i];
                else if (xn->value[i] < T(0))
                    xn->grad[i] -= yn->grad[i];
            }
        }, yn);
    }
    return y;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros({1});
    T acc = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
    y.at(0) = acc;
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        const std::size_t n = x.numel();
        Tape<T>::active()->record([xn, yn, n]() {
            xn->ensure_grad();
            const T g = yn->grad[0];
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
        }, yn);
    }
    return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    const std::size_t n = x.numel();
    return scale(sum(x), T(1) / static_cast<T>(n));
}

// Per-row prefix sums for x:[m,n].
template <class T>
Tensor<T> cumsum_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("cumsum_rows: expected rank-2, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j) {
            acc += x.at(i, j);
            y.at(i, j) = acc;
        }
    }
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, m, n]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                T acc = 0;
                for (std::size_t j = n; j-- > 0;) {
                    acc += yn->grad[i * n + j];
                    xn->grad[i * n + j] += acc;
                }
            }
        }, yn);
    }
    return y;
}

// Row-wise softmax with optional column mask (true = keep). Works on [n] or
// [m,n]; the mask applies to every row. Stabilized by max-subtraction;
// masked entries come out exactly 0.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, const std::vector<std::uint8_t>& mask = {}) {
    if (x.rank() != 1 && x.rank() != 2)
        throw ShapeError("softmax: expected rank 1 or 2, got " + shape_str(x.shape()));
    const std::size_t n = x.shape().back();
    const std::size_t m = x.numel() / n;
    if (!mask.empty() && mask.size() != n)
        throw ShapeError("softmax: mask length " + std::to_string(mask.size()) +
                         " does not match row length " + std::to_string(n));
    const bool masked = !mask.empty();
    if (masked) {
        bool any = false;
        for (const std::uint8_t b : mask) any = any || (b != 0);
        if (!any) throw ValidationError("softmax: fully masked row");
    }
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i) {
        const T* xr = x.value().data() + i * n;
        T* yr = y.value().data() + i * n;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!masked || mask[j]) mx = std::max(mx, xr[j]);
        T denom = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!masked || mask[j]) {
                yr[j] = std::exp(xr[j] - mx);
                denom += yr[j];
            } else {
                yr[j] = T(0);
            }
        }
        for (std::size_t j = 0; j < n; ++j) yr[j] /= denom;
    }
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, m, n]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const T* yr = yn->value.data() + i * n;
                const T* gy = yn->grad.data() + i * n;
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += gy[j] * yr[j];
                T* gx = xn->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += yr[j] * (gy[j] - dot);
            }
        }, yn);
    }
    return y;
}

// Row-wise layer normalization for x:[m,n] with per-feature gain/bias.
// Population variance, epsilon 1e-5 inside the square root.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    if (x.rank() != 2) throw ShapeError("layer_norm: expected rank-2, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
        throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(n) + "]");
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    std::vector<T> xhat(m * n), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* xr = x.value().data() + i * n;
        T mu = 0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (xr[j] - mu) * is;
            y.at(i, j) = gain.at(j) * xhat[i * n + j] + bias.at(j);
        }
    }
    y.set_requires_grad(detail::any_requires<T>({&x, &gain, &bias}));
    if (detail::want_tape<T>({&x, &gain, &bias})) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node();
        Tape<T>::active()->record([xn, gn, bn, yn, m, n, xhat, inv_std]() {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                const T* gy = yn->grad.data() + i * n;
                const T* xh = xhat.data() + i * n;
                if (gn->requires_grad || bn->requires_grad) {
                    for (std::size_t j = 0; j < n; ++j) {
                        if (gn->requires_grad) gn->grad[j] += gy[j] * xh[j];
                        if (bn->requires_grad) bn->grad[j] += gy[j];
                    }
                }
                if (xn->requires_grad) {
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const T dxhat = gy[j] * gn->value[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xh[j];
                    }
                    mean_dxhat /= static_cast<T>(n);
                    mean_dxhat_xhat /= static_cast<T>(n);
                    T* gx = xn->grad.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const T dxhat = gy[j] * gn->value[j];
                        gx[j] += (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat) * inv_std[i];
                    }
                }
            }
        }, yn);
    }
    return y;
}

// Cross-correlation of x:[c_in,h,w] with kernels:[c_out,c_in,kh,kw] plus a
// per-output-channel bias. Output h' = floor((h + 2*pad - kh)/stride) + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    if (x.rank() != 3) throw ShapeError("conv2d: input must be [c,h,w], got " + shape_str(x.shape()));
    if (kernels.rank() != 4)
        throw ShapeError("conv2d: kernels must be [co,ci,kh,kw], got " + shape_str(kernels.shape()));
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = kernels.dim(0), kci = kernels.dim(1), kh = kernels.dim(2),
                      kw = kernels.dim(3);
    if (kci != cin)
        throw ShapeError("conv2d: kernel channels " + shape_str(kernels.shape()) +
                         " do not match input " + shape_str(x.shape()));
    if (bias.shape() != Shape{cout})
        throw ShapeError("conv2d: bias must be [" + std::to_string(cout) + "]");
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
    if (ho == 0 || wo == 0) throw ShapeError("conv2d: non-positive output dimension");

    Tensor<T> y = Tensor<T>::zeros({cout, ho, wo});
    const T* px = x.value().data();
    const T* pk = kernels.value().data();
    T* py = y.value().data();
    for (std::size_t co = 0; co < cout; ++co) {
        const T bv = bias.at(co);
        for (std::size_t oi = 0; oi < ho; ++oi)
            for (std::size_t oj = 0; oj < wo; ++oj) {
                T acc = bv;
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t u = 0; u < kh; ++u) {
                        const long ii = static_cast<long>(oi * stride + u) - static_cast<long>(pad);
                        if (ii < 0 || ii >= static_cast<long>(h)) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const long jj =
                                static_cast<long>(oj * stride + v) - static_cast<long>(pad);
                            if (jj < 0 || jj >= static_cast<long>(w)) continue;
                            acc += px[(ci * h + ii) * w + jj] *
                                   pk[((co * cin + ci) * kh + u) * kw + v];
                        }
                    }
                py[(co * ho + oi) * wo + oj] = acc;
            }
    }
    y.set_requires_grad(detail::any_requires<T>({&x, &kernels, &bias}));
    if (detail::want_tape<T>({&x, &kernels, &bias})) {
        auto xn = x.node(), kn = kernels.node(), bn = bias.node(), yn = y.node();
        Tape<T>::active()->record([xn, kn, bn, yn, cin, h, w, cout, kh, kw, ho, wo, stride,
                                   pad]() {
            const T* gy = yn->grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t co = 0; co < cout; ++co) {
                    T acc = 0;
                    for (std::size_t p = 0; p < ho * wo; ++p) acc += gy[co * ho * wo + p];
                    bn->grad[co] += acc;
                }
            }
            const bool wx = xn->requires_grad, wk = kn->requires_grad;
            if (wx) xn->ensure_grad();
            if (wk) kn->ensure_grad();
            if (!wx && !wk) return;
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t oi = 0; oi < ho; ++oi)
                    for (std::size_t oj = 0; oj < wo; ++oj) {
                        const T g = gy[(co * ho + oi) * wo + oj];
                        if (g == T(0)) continue;
                        for (std::size_t ci = 0; ci < cin; ++ci)
                            for (std::size_t u = 0; u < kh; ++u) {
                                const long ii =
                                    static_cast<long>(oi * stride + u) - static_cast<long>(pad);
                                if (ii < 0 || ii >= static_cast<long>(h)) continue;
                                for (std::size_t v = 0; v < kw; ++v) {
                                    const long jj =
                                        static_cast<long>(oj * stride + v) - static_cast<long>(pad);
                                    if (jj < 0 || jj >= static_cast<long>(w)) continue;
                                    const std::size_t xi = (ci * h + ii) * w + jj;
                                    const std::size_t ki = ((co * cin + ci) * kh + u) * kw + v;
                                    if (wk) kn->grad[ki] += g * xn->value[xi];
                                    if (wx) xn->grad[xi] += g * kn->value[ki];
                                }
                            }
                    }
        }, yn);
    }
    return y;
}

// Global average pool over the spatial dims of x:[c,h,w] -> [1,c] row.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 3)
        throw ShapeError("global_avg_pool: input must be [c,h,w], got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor<T> y = Tensor<T>::zeros({1, c});
    for (std::size_t ci = 0; ci < c; ++ci) {
        T acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += x.at(ci * hw + p);
        y.at(ci) = acc / static_cast<T>(hw);
    }
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, c, hw]() {
            xn->ensure_grad();
            for (std::size_t ci = 0; ci < c; ++ci) {
                const T g = yn->grad[ci] / static_cast<T>(hw);
                for (std::size_t p = 0; p < hw; ++p) xn->grad[ci * hw + p] += g;
            }
        }, yn);
    }
    return y;
}

// Columns [c0, c1) of x:[m,n].
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c0 >= c1 || c1 > x.dim(1))
        throw ShapeError("slice_cols: invalid slice [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") of " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1), k = c1 - c0;
    Tensor<T> y = Tensor<T>::zeros({m, k});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) y.at(i, j) = x.at(i, c0 + j);
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, m, n, k, c0]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < k; ++j)
                    xn->grad[i * n + c0 + j] += yn->grad[i * k + j];
        }, yn);
    }
    return y;
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m)
            throw ShapeError("concat_cols: inconsistent shapes");
        total += p.dim(1);
    }
    Tensor<T> y = Tensor<T>::zeros({m, total});
    std::size_t off = 0;
    bool rq = false;
    for (const auto& p : parts) {
        const std::size_t k = p.dim(1);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) y.at(i, off + j) = p.at(i, j);
        rq = rq || p.requires_grad();
        off += k;
    }
    y.set_requires_grad(rq);
    if (rq && Tape<T>::active()) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        auto yn = y.node();
        Tape<T>::active()->record([nodes, yn, m, total]() {
            std::size_t off2 = 0;
            for (const auto& pn : nodes) {
                const std::size_t k = pn->shape[1];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < k; ++j)
                            pn->grad[i * k + j] += yn->grad[i * total + off2 + j];
                }
                off2 += k;
            }
        }, yn);
    }
    return y;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts[0].dim(1);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != n)
            throw ShapeError("concat_rows: inconsistent shapes");
        total += p.dim(0);
    }
    Tensor<T> y = Tensor<T>::zeros({total, n});
    std::size_t off = 0;
    bool rq = false;
    for (const auto& p : parts) {
        const std::size_t rows = p.dim(0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < n; ++j) y.at(off + i, j) = p.at(i, j);
        rq = rq || p.requires_grad();
        off += rows;
    }
    y.set_requires_grad(rq);
    if (rq && Tape<T>::active()) {
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        auto yn = y.node();
        Tape<T>::active()->record([nodes, yn, n]() {
            std::size_t off2 = 0;
            for (const auto& pn : nodes) {
                const std::size_t rows = pn->shape[0];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                            pn->grad[i * n + j] += yn->grad[(off2 + i) * n + j];
                }
                off2 += rows;
            }
        }, yn);
    }
    return y;
}

// Rows [r0, r1) of x:[m,n].
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
    if (x.rank() != 2 || r0 >= r1 || r1 > x.dim(0))
        throw ShapeError("slice_rows: invalid slice [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") of " + shape_str(x.shape()));
    const std::size_t n = x.dim(1), rows = r1 - r0;
    Tensor<T> y = Tensor<T>::zeros({rows, n});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) y.at(i, j) = x.at(r0 + i, j);
    y.set_requires_grad(x.requires_grad());
    if (detail::want_tape<T>({&x})) {
        auto xn = x.node(), yn = y.node();
        Tape<T>::active()->record([xn, yn, rows, n, r0]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[(r0 + i) * n + j] += yn->grad[i * n + j];
        }, yn);
    }
    return y;
}

// Kaiming-uniform fill: U(-b, b) with b = sqrt(6 / fan_in).
template <class T>
void init_kaiming_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (T& v : t.value()) v = static_cast<T>(rng.uniform(-bound, bound));
}

// Named parameter list; order is the checkpoint serialization order.
template <class T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
void zero_grads(ParamList<T>& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

// Adam with bias correction. lr default follows the training protocol;
// beta/epsilon are the original Adam defaults.
template <class T>
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;
    std::vector<std::vector<T>> m, v;

    void init_for(const ParamList<T>& params) {
        m.clear();
        v.clear();
        for (const auto& [name, p] : params) {
            m.emplace_back(p.numel(), T(0));
            v.emplace_back(p.numel(), T(0));
        }
    }
};

template <class T>
void adam_step(ParamList<T>& params, AdamState<T>& state) {
    if (state.m.size() != params.size()) state.init_for(params);
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        if (state.m[pi].size() != params[pi].second.numel())
            throw ShapeError("adam_step: state shape mismatch for " + params[pi].first);
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, p] = params[pi];
        const std::vector<T>& g = p.grad();
        for (const T gv : g)
            if (!std::isfinite(static_cast<double>(gv)))
                throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
        std::vector<T>& mv = state.m[pi];
        std::vector<T>& vv = state.v[pi];
        std::vector<T>& val = p.value();
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double gd = static_cast<double>(g[i]);
            const double md = state.beta1 * static_cast<double>(mv[i]) + (1.0 - state.beta1) * gd;
            const double vd =
                state.beta2 * static_cast<double>(vv[i]) + (1.0 - state.beta2) * gd * gd;
            mv[i] = static_cast<T>(md);
            vv[i] = static_cast<T>(vd);
            const double mhat = md / bc1;
            const double vhat = vd / bc2;
            val[i] = static_cast<T>(static_cast<double>(val[i]) -
                                    state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

}  // namespace slicenav
