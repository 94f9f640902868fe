// Dense double-precision tensor with tape-based reverse-mode differentiation.
//
// Tensors are value types sharing an immutable-after-forward buffer; every
// differentiable operation records a closure on a thread-local tape, and
// backward(loss) replays the tape in reverse and clears it. There is no
// broadcasting beyond matching shapes and the explicit scalar / bias /
// row-vector variants below; reshapes are explicit.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "c2v/common.hpp"

namespace c2v {

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same length as data

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

namespace detail {
inline size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
        n *= static_cast<size_t>(e);
    }
    return n;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables tape recording for the current thread while alive.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {
        impl_->shape = {1};
        impl_->data = {0.0};
    }

    explicit Tensor(std::vector<int> shape) : impl_(std::make_shared<TensorImpl>()) {
        size_t n = detail::shape_numel(shape);
        impl_->shape = std::move(shape);
        impl_->data.assign(n, 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data)
        : impl_(std::make_shared<TensorImpl>()) {
        if (detail::shape_numel(shape) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& v : t.impl_->data) v = rng.normal(0.0, stddev);
        return t;
    }

    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(size_t i) const { return impl_->shape[i]; }
    size_t rank() const { return impl_->shape.size(); }
    size_t numel() const { return impl_->data.size(); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        if (v) impl_->ensure_grad();
        return *this;
    }

    const std::vector<double>& grad() const {
        const_cast<TensorImpl*>(impl_.get())->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        impl_->ensure_grad();
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    double item() const {
        if (numel() != 1) {
            throw ValueError("item() on non-scalar tensor of shape " + shape_str(shape()));
        }
        return impl_->data[0];
    }

    bool all_finite() const {
        for (double v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of the forward pass; nodes run in reverse on backward().
class Tape {
public:
    static Tape& active() {
        thread_local Tape tape;
        return tape;
    }

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {
inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!grad_mode()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void mark_output(Tensor& out) { out.set_requires_grad(true); }

using ImplPtr = std::shared_ptr<TensorImpl>;
}  // namespace detail

// Accumulates d(loss)/d(x) into every requires_grad tensor reachable from
// loss, then clears the tape. loss must be scalar.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ValueError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ValueError("backward() on a tensor that was not produced by taped operations");
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    Tape::active().run_backward();
}

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::should_record({&a, &b})) {
        detail::mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([ai, bi, oi] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::should_record({&a, &b})) {
        detail::mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([ai, bi, oi] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::should_record({&a, &b})) {
        detail::mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([ai, bi, oi] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "divide");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
    if (detail::should_record({&a, &b})) {
        detail::mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([ai, bi, oi] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] / bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i)
                    bi->grad[i] -= oi->grad[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
            }
        });
    }
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi, c] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + c;
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// c - x, elementwise
inline Tensor sub_from_scalar(double c, const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = c - pa[i];
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] -= oi->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise functions
// ---------------------------------------------------------------------------

inline Tensor log(const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] / ai->data[i];
        });
    }
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * oi->data[i];
        });
    }
    return out;
}

inline Tensor sqrt(const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = std::sqrt(pa[i]);
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i)
                ai->grad[i] += oi->grad[i] * 0.5 / oi->data[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i)
                if (ai->data[i] > 0.0) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    size_t n = out.numel();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < n; ++i) po[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * inv_sqrt2));
    if (detail::should_record({&a})) {
        detail::mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        Tape::active().record([ai, oi] {
            if (oi->grad.empty()) return;
            ai->ensure_grad();
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                double x = ai->data[i];
                double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ai->grad[i] += oi->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// broadcast variants (the only ones allowed)
// ---------------------------------------------------------------------------

// x[..., D] + b[D]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0)) {
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not match last axis of " +
                         shape_str(x.shape()));
    }
    Tensor out(x.shape());
    size_t n = x.numel();
    size_t d = static_cast<size_t>(b.dim(0));
    const double* px = x.data();
    const double* pb = b.data();
    double* po = out.data();
    for (size_t i = 0; i < n; i += d)
        for (size_t j = 0; j < d; ++j) po[i + j] = px[i + j] + pb[j];
    if (detail::should_record({&x, &b})) {
        detail::mark_output(out);
        auto xi = x.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([xi, bi, oi, n, d] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (size_t i = 0; i < n; i += d)
                    for (size_t j = 0; j < d; ++j) bi->grad[j] += oi->grad[i + j];
            }
        });
    }
    return out;
}

// x[B,T,D] + e[T,D], broadcast over the batch axis
inline Tensor add_tokens(const Tensor& x, const Tensor& e) {
    if (x.rank() != 3 || e.rank() != 2 || x.dim(1) != e.dim(0) || x.dim(2) != e.dim(1)) {
        throw ShapeError("add_tokens: " + shape_str(x.shape()) + " vs " + shape_str(e.shape()));
    }
    Tensor out(x.shape());
    size_t per = static_cast<size_t>(x.dim(1)) * x.dim(2);
    size_t batch = static_cast<size_t>(x.dim(0));
    const double* px = x.data();
    const double* pe = e.data();
    double* po = out.data();
    for (size_t b = 0; b < batch; ++b)
        for (size_t i = 0; i < per; ++i) po[b * per + i] = px[b * per + i] + pe[i];
    if (detail::should_record({&x, &e})) {
        detail::mark_output(out);
        auto xi = x.impl(), ei = e.impl(), oi = out.impl();
        Tape::active().record([xi, ei, oi, per, batch] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
            }
            if (ei->requires_grad) {
                ei->ensure_grad();
                for (size_t b = 0; b < batch; ++b)
                    for (size_t i = 0; i < per; ++i) ei->grad[i] += oi->grad[b * per + i];
            }
        });
    }
    return out;
}

// Rows (last axis) scaled to unit L2 norm; zero rows stay zero.
inline Tensor l2_normalize_rows(const Tensor& x) {
    Tensor out(x.shape());
    size_t d = static_cast<size_t>(x.dim(x.rank() - 1));
    size_t rows = x.numel() / d;
    const double* px = x.data();
    double* po = out.data();
    std::vector<double> norms(rows);
    for (size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (size_t j = 0; j < d; ++j) s += px[r * d + j] * px[r * d + j];
        double nrm = std::sqrt(s);
        norms[r] = nrm;
        if (nrm > 0.0)
            for (size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] / nrm;
    }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, norms, rows, d] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                if (norms[r] == 0.0) continue;
                double dot = 0.0;
                for (size_t j = 0; j < d; ++j) dot += oi->grad[r * d + j] * oi->data[r * d + j];
                for (size_t j = 0; j < d; ++j)
                    xi->grad[r * d + j] +=
                        (oi->grad[r * d + j] - oi->data[r * d + j] * dot) / norms[r];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
    if (detail::shape_numel(new_shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    }
    Tensor out(std::move(new_shape), std::vector<double>(x.vec()));
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// swap the last two axes
inline Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2");
    std::vector<int> os = x.shape();
    int m = os[os.size() - 2], n = os[os.size() - 1];
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    Tensor out(os);
    size_t planes = x.numel() / (static_cast<size_t>(m) * n);
    const double* px = x.data();
    double* po = out.data();
    for (size_t p = 0; p < planes; ++p) {
        const double* src = px + p * m * n;
        double* dst = po + p * m * n;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, planes, m, n] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t p = 0; p < planes; ++p) {
                const double* g = oi->grad.data() + p * m * n;
                double* dst = xi->grad.data() + p * m * n;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
            }
        });
    }
    return out;
}

// contiguous slice along one axis
inline Tensor narrow(const Tensor& x, size_t axis, int start, int length) {
    if (axis >= x.rank()) throw ShapeError("narrow: axis out of range");
    if (start < 0 || length <= 0 || start + length > x.dim(axis)) {
        throw ShapeError("narrow: window [" + std::to_string(start) + "," +
                         std::to_string(start + length) + ") outside extent " +
                         std::to_string(x.dim(axis)));
    }
    std::vector<int> os = x.shape();
    os[axis] = length;
    Tensor out(os);
    size_t inner = 1;
    for (size_t i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(x.dim(i));
    size_t outer = x.numel() / (inner * x.dim(axis));
    size_t in_stride = inner * x.dim(axis);
    size_t out_stride = inner * length;
    const double* px = x.data();
    double* po = out.data();
    for (size_t o = 0; o < outer; ++o) {
        std::memcpy(po + o * out_stride, px + o * in_stride + start * inner,
                    out_stride * sizeof(double));
    }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, outer, inner, in_stride, out_stride, start] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
                const double* g = oi->grad.data() + o * out_stride;
                double* dst = xi->grad.data() + o * in_stride + start * inner;
                for (size_t i = 0; i < out_stride; ++i) dst[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis >= parts[0].rank()) throw ShapeError("concat: axis out of range");
    std::vector<int> os = parts[0].shape();
    int total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < t.rank(); ++i) {
            if (i != axis && t.dim(i) != parts[0].dim(i)) {
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
            }
        }
        total += t.dim(axis);
    }
    os[axis] = total;
    Tensor out(os);
    size_t inner = 1;
    for (size_t i = axis + 1; i < out.rank(); ++i) inner *= static_cast<size_t>(out.dim(i));
    size_t outer = out.numel() / (inner * total);
    size_t out_stride = inner * total;
    double* po = out.data();
    size_t offset = 0;
    bool record = false;
    for (const Tensor& t : parts)
        if (grad_enabled() && t.requires_grad()) record = true;
    struct Piece {
        detail::ImplPtr impl;
        size_t offset;
        size_t stride;
    };
    std::vector<Piece> pieces;
    for (const Tensor& t : parts) {
        size_t t_stride = inner * t.dim(axis);
        const double* pt = t.data();
        for (size_t o = 0; o < outer; ++o) {
            std::memcpy(po + o * out_stride + offset, pt + o * t_stride, t_stride * sizeof(double));
        }
        if (record) pieces.push_back({t.impl(), offset, t_stride});
        offset += t_stride;
    }
    if (record) {
        detail::mark_output(out);
        auto oi = out.impl();
        Tape::active().record([oi, pieces, outer, out_stride] {
            if (oi->grad.empty()) return;
            for (const auto& p : pieces) {
                if (!p.impl->requires_grad) continue;
                p.impl->ensure_grad();
                for (size_t o = 0; o < outer; ++o) {
                    const double* g = oi->grad.data() + o * out_stride + p.offset;
                    double* dst = p.impl->grad.data() + o * p.stride;
                    for (size_t i = 0; i < p.stride; ++i) dst[i] += g[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

namespace detail {
// C[m,n] += A[m,k] * B[k,n], contiguous row-major
inline void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        int l = 0;
        for (; l + 4 <= k; l += 4) {
            double a0 = arow[l], a1 = arow[l + 1], a2 = arow[l + 2], a3 = arow[l + 3];
            const double* b0 = b + static_cast<size_t>(l) * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (int j = 0; j < n; ++j)
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; l < k; ++l) {
            double av = arow[l];
            const double* brow = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Dot product with independent partial sums; the fixed reassociation keeps
// results reproducible while letting the chains pipeline.
inline double dot(const double* a, const double* b, int n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    double s4 = 0.0, s5 = 0.0, s6 = 0.0, s7 = 0.0;
    int j = 0;
    for (; j + 8 <= n; j += 8) {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        s4 += a[j + 4] * b[j + 4];
        s5 += a[j + 5] * b[j + 5];
        s6 += a[j + 6] * b[j + 6];
        s7 += a[j + 7] * b[j + 7];
    }
    double s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; j < n; ++j) s += a[j] * b[j];
    return s;
}

// C[m,k] += A[m,n] * B[k,n]^T (row-dot form)
inline void acc_abt(const double* a, const double* b, double* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * n;
        double* crow = c + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            crow[l] += dot(arow, b + static_cast<size_t>(l) * n, n);
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n] (axpy form)
inline void acc_atb(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            double av = arow[l];
            if (av == 0.0) continue;
            double* crow = c + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B^T ; dB[k,n] += A^T * dC
inline void matmul_backward(const double* a, const double* b, const double* dc, double* da,
                            double* db, int m, int k, int n) {
    if (da) acc_abt(dc, b, da, m, n, k);
    if (db) acc_atb(a, dc, db, m, k, n);
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    detail::matmul_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::should_record({&a, &b})) {
        detail::mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([ai, bi, oi, m, k, n] {
            if (oi->grad.empty()) return;
            double* da = nullptr;
            double* db = nullptr;
            if (ai->requires_grad) {
                ai->ensure_grad();
                da = ai->grad.data();
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                db = bi->grad.data();
            }
            detail::matmul_backward(ai->data.data(), bi->data.data(), oi->grad.data(), da, db, m, k,
                                    n);
        });
    }
    return out;
}

// x[..., din] * w[din, dout] + b[dout]; leading axes are treated as rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(0)) {
        throw ShapeError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    }
    int din = w.dim(0), dout = w.dim(1);
    if (b.numel() != static_cast<size_t>(dout)) throw ShapeError("linear: bias length mismatch");
    int rows = static_cast<int>(x.numel()) / din;
    std::vector<int> out_shape = x.shape();
    out_shape.back() = dout;
    Tensor out(out_shape);
    double* po = out.data();
    const double* pb = b.data();
    for (int r = 0; r < rows; ++r) std::memcpy(po + static_cast<size_t>(r) * dout, pb, dout * sizeof(double));
    detail::matmul_acc(x.data(), w.data(), po, rows, din, dout);
    if (detail::should_record({&x, &w, &b})) {
        detail::mark_output(out);
        auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([xi, wi, bi, oi, rows, din, dout] {
            if (oi->grad.empty()) return;
            const double* g = oi->grad.data();
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < dout; ++j) bi->grad[j] += g[static_cast<size_t>(r) * dout + j];
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                detail::acc_atb(xi->data.data(), g, wi->grad.data(), rows, din, dout);
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                detail::acc_abt(g, wi->data.data(), xi->grad.data(), rows, dout, din);
            }
        });
    }
    return out;
}

inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    int batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out({batch, m, n});
    for (int i = 0; i < batch; ++i) {
        detail::matmul_acc(a.data() + static_cast<size_t>(i) * m * k,
                           b.data() + static_cast<size_t>(i) * k * n,
                           out.data() + static_cast<size_t>(i) * m * n, m, k, n);
    }
    if (detail::should_record({&a, &b})) {
        detail::mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Tape::active().record([ai, bi, oi, batch, m, k, n] {
            if (oi->grad.empty()) return;
            double* da = nullptr;
            double* db = nullptr;
            if (ai->requires_grad) {
                ai->ensure_grad();
                da = ai->grad.data();
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                db = bi->grad.data();
            }
            for (int i = 0; i < batch; ++i) {
                detail::matmul_backward(
                    ai->data.data() + static_cast<size_t>(i) * m * k,
                    bi->data.data() + static_cast<size_t>(i) * k * n,
                    oi->grad.data() + static_cast<size_t>(i) * m * n,
                    da ? da + static_cast<size_t>(i) * m * k : nullptr,
                    db ? db + static_cast<size_t>(i) * k * n : nullptr, m, k, n);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) s += x.data()[i];
    Tensor out = Tensor::scalar(s);
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            double g = oi->grad[0];
            for (double& v : xi->grad) v += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& x) {
    double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) s += x.data()[i];
    Tensor out = Tensor::scalar(s * inv);
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, inv] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            double g = oi->grad[0] * inv;
            for (double& v : xi->grad) v += g;
        });
    }
    return out;
}

// sum over one axis, removing it
inline Tensor sum_axis(const Tensor& x, size_t axis) {
    if (axis >= x.rank()) throw ShapeError("sum_axis: axis out of range");
    std::vector<int> os;
    for (size_t i = 0; i < x.rank(); ++i)
        if (i != axis) os.push_back(x.dim(i));
    if (os.empty()) os.push_back(1);
    size_t inner = 1;
    for (size_t i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(x.dim(i));
    size_t count = static_cast<size_t>(x.dim(axis));
    size_t outer = x.numel() / (inner * count);
    Tensor out(os);
    const double* px = x.data();
    double* po = out.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t c = 0; c < count; ++c) {
            const double* src = px + (o * count + c) * inner;
            double* dst = po + o * inner;
            for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, outer, count, inner] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t o = 0; o < outer; ++o)
                for (size_t c = 0; c < count; ++c) {
                    const double* g = oi->grad.data() + o * inner;
                    double* dst = xi->grad.data() + (o * count + c) * inner;
                    for (size_t i = 0; i < inner; ++i) dst[i] += g[i];
                }
        });
    }
    return out;
}

// [B,C,h,w] -> [B,C] (mean over positions) or [B,T,D] -> [B,D] (mean over tokens)
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() == 4) {
        int b = x.dim(0), c = x.dim(1);
        size_t hw = static_cast<size_t>(x.dim(2)) * x.dim(3);
        Tensor out({b, c});
        const double* px = x.data();
        double* po = out.data();
        double inv = 1.0 / static_cast<double>(hw);
        for (size_t bc = 0; bc < static_cast<size_t>(b) * c; ++bc) {
            double s = 0.0;
            const double* plane = px + bc * hw;
            for (size_t i = 0; i < hw; ++i) s += plane[i];
            po[bc] = s * inv;
        }
        if (detail::should_record({&x})) {
            detail::mark_output(out);
            auto xi = x.impl(), oi = out.impl();
            Tape::active().record([xi, oi, b, c, hw, inv] {
                if (oi->grad.empty()) return;
                xi->ensure_grad();
                for (size_t bc = 0; bc < static_cast<size_t>(b) * c; ++bc) {
                    double g = oi->grad[bc] * inv;
                    double* dst = xi->grad.data() + bc * hw;
                    for (size_t i = 0; i < hw; ++i) dst[i] += g;
                }
            });
        }
        return out;
    }
    if (x.rank() == 3) {
        int b = x.dim(0), t = x.dim(1), d = x.dim(2);
        Tensor out({b, d});
        const double* px = x.data();
        double* po = out.data();
        double inv = 1.0 / static_cast<double>(t);
        for (int bb = 0; bb < b; ++bb) {
            double* dst = po + static_cast<size_t>(bb) * d;
            for (int tt = 0; tt < t; ++tt) {
                const double* src = px + (static_cast<size_t>(bb) * t + tt) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
            for (int j = 0; j < d; ++j) dst[j] *= inv;
        }
        if (detail::should_record({&x})) {
            detail::mark_output(out);
            auto xi = x.impl(), oi = out.impl();
            Tape::active().record([xi, oi, b, t, d, inv] {
                if (oi->grad.empty()) return;
                xi->ensure_grad();
                for (int bb = 0; bb < b; ++bb) {
                    const double* g = oi->grad.data() + static_cast<size_t>(bb) * d;
                    for (int tt = 0; tt < t; ++tt) {
                        double* dst = xi->grad.data() + (static_cast<size_t>(bb) * t + tt) * d;
                        for (int j = 0; j < d; ++j) dst[j] += g[j] * inv;
                    }
                }
            });
        }
        return out;
    }
    throw ShapeError("global_avg_pool: expected rank 3 or 4, got " + shape_str(x.shape()));
}

// ---------------------------------------------------------------------------
// softmax / KL divergence
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    Tensor out(x.shape());
    size_t inner = 1;
    for (size_t i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(x.dim(i));
    size_t count = static_cast<size_t>(x.dim(axis));
    size_t outer = x.numel() / (inner * count);
    const double* px = x.data();
    double* po = out.data();
    for (size_t o = 0; o < outer; ++o) {
        for (size_t i = 0; i < inner; ++i) {
            size_t base = o * count * inner + i;
            double mx = px[base];
            for (size_t c = 1; c < count; ++c) mx = std::max(mx, px[base + c * inner]);
            double z = 0.0;
            for (size_t c = 0; c < count; ++c) {
                double e = std::exp(px[base + c * inner] - mx);
                po[base + c * inner] = e;
                z += e;
            }
            double invz = 1.0 / z;
            for (size_t c = 0; c < count; ++c) po[base + c * inner] *= invz;
        }
    }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, outer, count, inner] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
                for (size_t i = 0; i < inner; ++i) {
                    size_t base = o * count * inner + i;
                    double dot = 0.0;
                    for (size_t c = 0; c < count; ++c)
                        dot += oi->grad[base + c * inner] * oi->data[base + c * inner];
                    for (size_t c = 0; c < count; ++c) {
                        size_t idx = base + c * inner;
                        xi->grad[idx] += (oi->grad[idx] - dot) * oi->data[idx];
                    }
                }
            }
        });
    }
    return out;
}

// Floor applied to the denominator before the log; p == 0 entries contribute
// zero (and receive zero gradient).
constexpr double kKlEps = 1e-12;

// Row-averaged KL divergence sum_j p*log(p/q) over the last axis. Both
// inputs must be valid distributions along that axis.
inline Tensor kl_div(const Tensor& p, const Tensor& q) {
    detail::check_same_shape(p, q, "kl_div");
    size_t d = static_cast<size_t>(p.dim(p.rank() - 1));
    size_t rows = p.numel() / d;
    const double* pp = p.data();
    const double* pq = q.data();
    for (size_t r = 0; r < rows; ++r) {
        double sp = 0.0, sq = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double a = pp[r * d + j], b = pq[r * d + j];
            if (a < 0.0 || b < 0.0) throw ValueError("kl_div: negative probability entry");
            sp += a;
            sq += b;
        }
        if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) {
            throw ValueError("kl_div: input rows must sum to 1 (got " + std::to_string(sp) +
                             " and " + std::to_string(sq) + ")");
        }
    }
    double inv_rows = 1.0 / static_cast<double>(rows);
    double total = 0.0;
    for (size_t i = 0; i < p.numel(); ++i) {
        double a = pp[i];
        if (a > 0.0) total += a * std::log(a / std::max(pq[i], kKlEps));
    }
    Tensor out = Tensor::scalar(total * inv_rows);
    if (detail::should_record({&p, &q})) {
        detail::mark_output(out);
        auto pi = p.impl(), qi = q.impl(), oi = out.impl();
        Tape::active().record([pi, qi, oi, inv_rows] {
            if (oi->grad.empty()) return;
            double g = oi->grad[0] * inv_rows;
            if (pi->requires_grad) {
                pi->ensure_grad();
                for (size_t i = 0; i < pi->data.size(); ++i) {
                    double a = pi->data[i];
                    if (a > 0.0)
                        pi->grad[i] += g * (std::log(a / std::max(qi->data[i], kKlEps)) + 1.0);
                }
            }
            if (qi->requires_grad) {
                qi->ensure_grad();
                for (size_t i = 0; i < qi->data.size(); ++i) {
                    double b = qi->data[i];
                    if (b >= kKlEps) qi->grad[i] -= g * pi->data[i] / b;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// LayerNorm over the last axis with learnable scale/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    size_t d = static_cast<size_t>(x.dim(x.rank() - 1));
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm: scale/shift must have length " + std::to_string(d));
    }
    size_t rows = x.numel() / d;
    Tensor out(x.shape());
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    double* po = out.data();
    std::vector<double> invstd(rows), xhat(x.numel());
    for (size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double mu = 0.0;
        for (size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        invstd[r] = is;
        for (size_t j = 0; j < d; ++j) {
            double h = (row[j] - mu) * is;
            xhat[r * d + j] = h;
            po[r * d + j] = h * pg[j] + pb[j];
        }
    }
    if (detail::should_record({&x, &gamma, &beta})) {
        detail::mark_output(out);
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        Tape::active().record([xi, gi, bi, oi, invstd, xhat, rows, d] {
            if (oi->grad.empty()) return;
            for (size_t r = 0; r < rows; ++r) {
                const double* go = oi->grad.data() + r * d;
                const double* h = xhat.data() + r * d;
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (size_t j = 0; j < d; ++j) gi->grad[j] += go[j] * h[j];
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (size_t j = 0; j < d; ++j) bi->grad[j] += go[j];
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        double dh = go[j] * gi->data[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    double invd = 1.0 / static_cast<double>(d);
                    for (size_t j = 0; j < d; ++j) {
                        double dh = go[j] * gi->data[j];
                        xi->grad[r * d + j] +=
                            invstd[r] * (dh - invd * sum_dh - h[j] * invd * sum_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution / pooling / resampling
// ---------------------------------------------------------------------------

namespace detail {
struct ConvDims {
    int b, ic, h, w, oc, kh, kw, oh, ow, stride, pad;
    size_t cols() const { return static_cast<size_t>(oh) * ow; }
    size_t krows() const { return static_cast<size_t>(ic) * kh * kw; }
};

// Gathers one sample into the [ic*kh*kw, oh*ow] patch matrix (zero-padded).
inline void im2col(const double* x, const ConvDims& d, double* col) {
    size_t n = d.cols();
    size_t row = 0;
    for (int c = 0; c < d.ic; ++c) {
        const double* plane = x + static_cast<size_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx, ++row) {
                double* dst = col + row * n;
                for (int oy = 0; oy < d.oh; ++oy) {
                    double* drow = dst + static_cast<size_t>(oy) * d.ow;
                    int iy = oy * d.stride + ky - d.pad;
                    if (iy < 0 || iy >= d.h) {
                        std::fill(drow, drow + d.ow, 0.0);
                        continue;
                    }
                    const double* irow = plane + static_cast<size_t>(iy) * d.w;
                    int ox0 = std::max(0, (d.pad - kx + d.stride - 1) / d.stride);
                    int ox1 = std::min(d.ow - 1, (d.w - 1 + d.pad - kx) / d.stride);
                    if (ox0 > 0) std::fill(drow, drow + ox0, 0.0);
                    if (d.stride == 1) {
                        if (ox1 >= ox0)
                            std::memcpy(drow + ox0, irow + ox0 + kx - d.pad,
                                        static_cast<size_t>(ox1 - ox0 + 1) * sizeof(double));
                    } else {
                        for (int ox = ox0; ox <= ox1; ++ox)
                            drow[ox] = irow[ox * d.stride + kx - d.pad];
                    }
                    if (ox1 < d.ow - 1) std::fill(drow + ox1 + 1, drow + d.ow, 0.0);
                }
            }
        }
    }
}

// Scatter-adds a patch-matrix gradient back onto the input plane gradient.
inline void col2im_add(const double* col, const ConvDims& d, double* dx) {
    size_t n = d.cols();
    size_t row = 0;
    for (int c = 0; c < d.ic; ++c) {
        double* plane = dx + static_cast<size_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx, ++row) {
                const double* src = col + row * n;
                for (int oy = 0; oy < d.oh; ++oy) {
                    int iy = oy * d.stride + ky - d.pad;
                    if (iy < 0 || iy >= d.h) continue;
                    const double* srow = src + static_cast<size_t>(oy) * d.ow;
                    double* drow = plane + static_cast<size_t>(iy) * d.w;
                    int ox0 = std::max(0, (d.pad - kx + d.stride - 1) / d.stride);
                    int ox1 = std::min(d.ow - 1, (d.w - 1 + d.pad - kx) / d.stride);
                    if (d.stride == 1) {
                        int shift = kx - d.pad;
                        for (int ox = ox0; ox <= ox1; ++ox) drow[ox + shift] += srow[ox];
                    } else {
                        for (int ox = ox0; ox <= ox1; ++ox)
                            drow[ox * d.stride + kx - d.pad] += srow[ox];
                    }
                }
            }
        }
    }
}
}  // namespace detail

// Cross-correlation with bias. weight [OC,IC,KH,KW], odd kernels, symmetric
// zero padding; output extent follows the usual floor((H+2p-k)/s)+1 rule.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
                     int pad) {
    if (x.rank() != 4 || weight.rank() != 4) throw ShapeError("conv2d: expected rank-4 tensors");
    detail::ConvDims d{x.dim(0), x.dim(1),     x.dim(2),      x.dim(3), weight.dim(0), weight.dim(2),
                       weight.dim(3), 0,        0,             stride,   pad};
    if (d.ic != weight.dim(1)) {
        throw ShapeError("conv2d: input channels " + std::to_string(d.ic) +
                         " do not match weight channels " + std::to_string(weight.dim(1)));
    }
    if (d.kh % 2 == 0 || d.kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
    if (bias.numel() != static_cast<size_t>(d.oc)) throw ShapeError("conv2d: bias length mismatch");
    if (d.h + 2 * pad - d.kh < 0 || d.w + 2 * pad - d.kw < 0) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    Tensor out({d.b, d.oc, d.oh, d.ow});
    size_t n = d.cols(), k = d.krows();
    size_t in_plane = static_cast<size_t>(d.ic) * d.h * d.w;
    size_t out_plane = static_cast<size_t>(d.oc) * n;
    std::vector<double> col(k * n);
    const double* pb = bias.data();
    for (int bb = 0; bb < d.b; ++bb) {
        detail::im2col(x.data() + bb * in_plane, d, col.data());
        double* oplane = out.data() + bb * out_plane;
        for (int o = 0; o < d.oc; ++o) std::fill(oplane + o * n, oplane + (o + 1) * n, pb[o]);
        detail::matmul_acc(weight.data(), col.data(), oplane, d.oc, static_cast<int>(k),
                           static_cast<int>(n));
    }
    if (detail::should_record({&x, &weight, &bias})) {
        detail::mark_output(out);
        auto xi = x.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
        Tape::active().record([xi, wi, bi, oi, d, n, k, in_plane, out_plane] {
            if (oi->grad.empty()) return;
            if (bi->requires_grad) bi->ensure_grad();
            if (wi->requires_grad) wi->ensure_grad();
            if (xi->requires_grad) xi->ensure_grad();
            std::vector<double> col(k * n);
            std::vector<double> dcol(xi->requires_grad ? k * n : 0);
            for (int bb = 0; bb < d.b; ++bb) {
                const double* gplane = oi->grad.data() + bb * out_plane;
                if (bi->requires_grad) {
                    for (int o = 0; o < d.oc; ++o) {
                        double s = 0.0;
                        const double* g = gplane + o * n;
                        for (size_t i = 0; i < n; ++i) s += g[i];
                        bi->grad[o] += s;
                    }
                }
                if (wi->requires_grad) {
                    detail::im2col(xi->data.data() + bb * in_plane, d, col.data());
                    detail::acc_abt(gplane, col.data(), wi->grad.data(), d.oc,
                                    static_cast<int>(n), static_cast<int>(k));
                }
                if (xi->requires_grad) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    detail::acc_atb(wi->data.data(), gplane, dcol.data(), d.oc,
                                    static_cast<int>(k), static_cast<int>(n));
                    detail::col2im_add(dcol.data(), d, xi->grad.data() + bb * in_plane);
                }
            }
        });
    }
    return out;
}

// Non-overlapping k x k mean pooling; extents must divide.
inline Tensor avg_pool2d(const Tensor& x, int k) {
    if (x.rank() != 4) throw ShapeError("avg_pool2d: expected rank-4 input");
    int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % k != 0 || w % k != 0) throw ShapeError("avg_pool2d: extents not divisible by window");
    int oh = h / k, ow = w / k;
    Tensor out({b, c, oh, ow});
    const double* px = x.data();
    double* po = out.data();
    double inv = 1.0 / static_cast<double>(k * k);
    for (size_t plane = 0; plane < static_cast<size_t>(b) * c; ++plane) {
        const double* ip = px + plane * h * w;
        double* op = po + plane * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = 0.0;
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) s += ip[(oy * k + dy) * w + ox * k + dx];
                op[oy * ow + ox] = s * inv;
            }
    }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, b, c, h, w, k, oh, ow, inv] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t plane = 0; plane < static_cast<size_t>(b) * c; ++plane) {
                const double* g = oi->grad.data() + plane * oh * ow;
                double* dst = xi->grad.data() + plane * h * w;
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        double gv = g[oy * ow + ox] * inv;
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx)
                                dst[(oy * k + dy) * w + ox * k + dx] += gv;
                    }
            }
        });
    }
    return out;
}

// Bilinear resize of [B,C,H,W] maps (half-pixel centers, clamped edges).
inline Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
    if (x.rank() != 4) throw ShapeError("bilinear_resize: expected rank-4 input");
    int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (oh <= 0 || ow <= 0) throw ShapeError("bilinear_resize: non-positive output size");
    struct Lerp {
        int lo, hi;
        double t;
    };
    auto build = [](int in, int out) {
        std::vector<Lerp> m(out);
        double scale = static_cast<double>(in) / out;
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            int lo = static_cast<int>(std::floor(src));
            double t = src - lo;
            int hi = lo + 1;
            if (lo < 0) lo = 0;
            if (hi > in - 1) hi = in - 1;
            if (lo > in - 1) lo = in - 1;
            m[o] = {lo, hi, t};
        }
        return m;
    };
    std::vector<Lerp> ym = build(h, oh), xm = build(w, ow);
    Tensor out({b, c, oh, ow});
    const double* px = x.data();
    double* po = out.data();
    for (size_t plane = 0; plane < static_cast<size_t>(b) * c; ++plane) {
        const double* ip = px + plane * h * w;
        double* op = po + plane * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            const Lerp& ly = ym[oy];
            for (int ox = 0; ox < ow; ++ox) {
                const Lerp& lx = xm[ox];
                double top = ip[ly.lo * w + lx.lo] * (1 - lx.t) + ip[ly.lo * w + lx.hi] * lx.t;
                double bot = ip[ly.hi * w + lx.lo] * (1 - lx.t) + ip[ly.hi * w + lx.hi] * lx.t;
                op[oy * ow + ox] = top * (1 - ly.t) + bot * ly.t;
            }
        }
    }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, b, c, h, w, oh, ow, ym, xm] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (size_t plane = 0; plane < static_cast<size_t>(b) * c; ++plane) {
                const double* g = oi->grad.data() + plane * oh * ow;
                double* dst = xi->grad.data() + plane * h * w;
                for (int oy = 0; oy < oh; ++oy) {
                    const Lerp& ly = ym[oy];
                    for (int ox = 0; ox < ow; ++ox) {
                        const Lerp& lx = xm[ox];
                        double gv = g[oy * ow + ox];
                        dst[ly.lo * w + lx.lo] += gv * (1 - ly.t) * (1 - lx.t);
                        dst[ly.lo * w + lx.hi] += gv * (1 - ly.t) * lx.t;
                        dst[ly.hi * w + lx.lo] += gv * ly.t * (1 - lx.t);
                        dst[ly.hi * w + lx.hi] += gv * ly.t * lx.t;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// patch movement
// ---------------------------------------------------------------------------

namespace detail {
// index maps shared by patch_partition / patch_reverse
struct PatchDims {
    int b, c, h, w, p, th, tw, t, len;
};
inline PatchDims patch_dims(const std::vector<int>& shape, int p) {
    if (shape.size() != 4) throw ShapeError("patch ops: expected rank-4 input");
    PatchDims d{shape[0], shape[1], shape[2], shape[3], p, 0, 0, 0, 0};
    if (p <= 0 || d.h % p != 0 || d.w % p != 0) {
        throw ShapeError("patch ops: spatial extents " + std::to_string(d.h) + "x" +
                         std::to_string(d.w) + " not divisible by patch size " + std::to_string(p));
    }
    d.th = d.h / p;
    d.tw = d.w / p;
    d.t = d.th * d.tw;
    d.len = d.c * p * p;
    return d;
}
}  // namespace detail

// [B,C,H,W] -> [B,T,C*p*p]; raster-order patches, each flattened channel-major.
inline Tensor patch_partition(const Tensor& x, int p) {
    detail::PatchDims d = detail::patch_dims(x.shape(), p);
    Tensor out({d.b, d.t, d.len});
    const double* px = x.data();
    double* po = out.data();
    for (int bb = 0; bb < d.b; ++bb)
        for (int ty = 0; ty < d.th; ++ty)
            for (int tx = 0; tx < d.tw; ++tx) {
                double* dst = po + ((static_cast<size_t>(bb) * d.t) + ty * d.tw + tx) * d.len;
                for (int c = 0; c < d.c; ++c) {
                    const double* plane = px + (static_cast<size_t>(bb) * d.c + c) * d.h * d.w;
                    for (int py = 0; py < p; ++py)
                        for (int qx = 0; qx < p; ++qx)
                            dst[(c * p + py) * p + qx] = plane[(ty * p + py) * d.w + tx * p + qx];
                }
            }
    if (detail::should_record({&x})) {
        detail::mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        Tape::active().record([xi, oi, d, p] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (int bb = 0; bb < d.b; ++bb)
                for (int ty = 0; ty < d.th; ++ty)
                    for (int tx = 0; tx < d.tw; ++tx) {
                        const double* g =
                            oi->grad.data() + ((static_cast<size_t>(bb) * d.t) + ty * d.tw + tx) * d.len;
                        for (int c = 0; c < d.c; ++c) {
                            double* plane =
                                xi->grad.data() + (static_cast<size_t>(bb) * d.c + c) * d.h * d.w;
                            for (int py = 0; py < p; ++py)
                                for (int qx = 0; qx < p; ++qx)
                                    plane[(ty * p + py) * d.w + tx * p + qx] +=
                                        g[(c * p + py) * p + qx];
                        }
                    }
        });
    }
    return out;
}

// Exact inverse of patch_partition: [B,T,C*p*p] -> [B,C,H,W].
inline Tensor patch_reverse(const Tensor& tokens, int p, int h, int w) {
    if (tokens.rank() != 3) throw ShapeError("patch_reverse: expected rank-3 input");
    int b = tokens.dim(0), t = tokens.dim(1), len = tokens.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0 || t != (h / p) * (w / p) || len % (p * p) != 0) {
        throw ShapeError("patch_reverse: tokens " + shape_str(tokens.shape()) +
                         " incompatible with target " + std::to_string(h) + "x" + std::to_string(w) +
                         " patch " + std::to_string(p));
    }
    int c = len / (p * p);
    int tw = w / p;
    Tensor out({b, c, h, w});
    const double* px = tokens.data();
    double* po = out.data();
    for (int bb = 0; bb < b; ++bb)
        for (int tt = 0; tt < t; ++tt) {
            int ty = tt / tw, tx = tt % tw;
            const double* src = px + (static_cast<size_t>(bb) * t + tt) * len;
            for (int cc = 0; cc < c; ++cc) {
                double* plane = po + (static_cast<size_t>(bb) * c + cc) * h * w;
                for (int py = 0; py < p; ++py)
                    for (int qx = 0; qx < p; ++qx)
                        plane[(ty * p + py) * w + tx * p + qx] = src[(cc * p + py) * p + qx];
            }
        }
    if (detail::should_record({&tokens})) {
        detail::mark_output(out);
        auto xi = tokens.impl(), oi = out.impl();
        Tape::active().record([xi, oi, b, c, h, w, p, t, tw, len] {
            if (oi->grad.empty()) return;
            xi->ensure_grad();
            for (int bb = 0; bb < b; ++bb)
                for (int tt = 0; tt < t; ++tt) {
                    int ty = tt / tw, tx = tt % tw;
                    double* dst = xi->grad.data() + (static_cast<size_t>(bb) * t + tt) * len;
                    for (int cc = 0; cc < c; ++cc) {
                        const double* plane =
                            oi->grad.data() + (static_cast<size_t>(bb) * c + cc) * h * w;
                        for (int py = 0; py < p; ++py)
                            for (int qx = 0; qx < p; ++qx)
                                dst[(cc * p + py) * p + qx] +=
                                    plane[(ty * p + py) * w + tx * p + qx];
                    }
                }
        });
    }
    return out;
}

// [B,C,h,w] -> [B,h*w,C] token view (raster order)
inline Tensor map_to_tokens(const Tensor& x) { return patch_partition(x, 1); }

// [B,T,D] -> [B,D,h,w], token t placed at raster position (t / w, t % w)
inline Tensor tokens_to_map(const Tensor& tokens, int h, int w) {
    return patch_reverse(tokens, 1, h, w);
}

// ---------------------------------------------------------------------------
// finite differences (test oracle)
// ---------------------------------------------------------------------------

// Central-difference gradient estimate of a deterministic scalar function.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double eps) {
    if (eps <= 0.0) throw ValueError("finite_diff_grad: eps must be positive");
    NoGradGuard ng;
    Tensor probe(x.shape(), std::vector<double>(x.vec()));
    Tensor out(x.shape());
    for (size_t i = 0; i < probe.numel(); ++i) {
        double orig = probe.data()[i];
        probe.data()[i] = orig + eps;
        double hi = f(probe);
        probe.data()[i] = orig - eps;
        double lo = f(probe);
        probe.data()[i] = orig;
        out.data()[i] = (hi - lo) / (2.0 * eps);
    }
    return out;
}

// Same estimate for one coordinate; used for parameter-space checks.
inline double finite_diff_at(const std::function<double()>& f, Tensor& param, size_t index,
                             double eps) {
    NoGradGuard ng;
    double orig = param.data()[index];
    param.data()[index] = orig + eps;
    double hi = f();
    param.data()[index] = orig - eps;
    double lo = f();
    param.data()[index] = orig;
    return (hi - lo) / (2.0 * eps);
}

}  // namespace c2v
