#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vivim/common.hpp"
#include "vivim/rng.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Allocation accounting.
//
// Every tensor buffer (data, gradients, saved activations) is registered with
// this counter. An optional byte budget makes oversized allocations fail with
// MemoryLimitError before any memory is requested from the host, which is how
// the scaling benchmark detects exhaustion without actually allocating the
// full amount. The engine is single threaded; the counters are plain values.
// ---------------------------------------------------------------------------
namespace memory {

struct Counters {
    std::size_t current = 0;
    std::size_t peak = 0;
    std::size_t limit = 0;  // 0 = unlimited
};

inline Counters& counters() {
    static Counters c;
    return c;
}

inline std::size_t current_bytes() { return counters().current; }
inline std::size_t peak_bytes() { return counters().peak; }
inline void reset_peak() { counters().peak = counters().current; }
inline void set_limit(std::size_t bytes) { counters().limit = bytes; }
inline std::size_t limit_bytes() { return counters().limit; }

inline void reserve(std::size_t bytes) {
    Counters& c = counters();
    if (c.limit != 0 && c.current + bytes > c.limit) {
        throw MemoryLimitError(str_cat("allocation of ", bytes,
                                       " bytes exceeds budget: ", c.current, " in use, limit ",
                                       c.limit));
    }
    c.current += bytes;
    if (c.current > c.peak) c.peak = c.current;
}

inline void release(std::size_t bytes) {
    Counters& c = counters();
    c.current = (bytes <= c.current) ? c.current - bytes : 0;
}

// Applies a byte budget for the lifetime of the guard and restores the
// previous budget afterwards.
class ScopedLimit {
  public:
    explicit ScopedLimit(std::size_t bytes) : prev_(limit_bytes()) { set_limit(bytes); }
    ~ScopedLimit() { set_limit(prev_); }
    ScopedLimit(const ScopedLimit&) = delete;
    ScopedLimit& operator=(const ScopedLimit&) = delete;

  private:
    std::size_t prev_;
};

}  // namespace memory

namespace detail {

// Zero-initialised buffer whose bytes are registered with memory::.
template <class Real>
class TrackedBuffer {
  public:
    TrackedBuffer() = default;
    explicit TrackedBuffer(std::size_t n) { resize(n); }
    TrackedBuffer(const TrackedBuffer&) = delete;
    TrackedBuffer& operator=(const TrackedBuffer&) = delete;
    TrackedBuffer(TrackedBuffer&& other) noexcept { *this = std::move(other); }
    TrackedBuffer& operator=(TrackedBuffer&& other) noexcept {
        if (this != &other) {
            clear();
            data_.swap(other.data_);
        }
        return *this;
    }
    ~TrackedBuffer() { clear(); }

    void resize(std::size_t n) {
        clear();
        memory::reserve(n * sizeof(Real));
        try {
            data_.assign(n, Real(0));
        } catch (...) {
            memory::release(n * sizeof(Real));
            throw;
        }
    }

    void clear() {
        if (!data_.empty()) {
            memory::release(data_.size() * sizeof(Real));
            data_.clear();
            data_.shrink_to_fit();
        }
    }

    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    Real& operator[](std::size_t i) { return data_[i]; }
    const Real& operator[](std::size_t i) const { return data_[i]; }

  private:
    std::vector<Real> data_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient mode. Operations built while disabled record no graph.
// ---------------------------------------------------------------------------
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
  public:
    NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// ---------------------------------------------------------------------------
// Tensor node. Shape, values, optional gradient, and the reverse-mode hook
// that scatters this node's gradient into its parents. backward_fn receives
// the node itself so it never has to keep a shared_ptr to it (no cycles).
// ---------------------------------------------------------------------------
template <class Real>
struct TensorImpl {
    Shape shape;
    detail::TrackedBuffer<Real> data;
    detail::TrackedBuffer<Real> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;
    const char* op = "leaf";

    std::size_t numel() const { return data.size(); }
    bool in_graph() const { return requires_grad || static_cast<bool>(backward_fn); }
    void ensure_grad() {
        if (grad.size() != numel()) grad.resize(numel());
    }
};

template <class Real>
class TensorT {
  public:
    using value_type = Real;

    TensorT() = default;

    explicit TensorT(Shape shape) {
        impl_ = std::make_shared<TensorImpl<Real>>();
        impl_->shape = std::move(shape);
        impl_->data.resize(shape_numel(impl_->shape));
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, Real v) {
        TensorT t(std::move(shape));
        std::fill(t.mut_data(), t.mut_data() + t.numel(), v);
        return t;
    }

    static TensorT scalar(Real v) { return full({1}, v); }

    static TensorT from_vector(Shape shape, const std::vector<Real>& vals) {
        TensorT t(std::move(shape));
        if (vals.size() != t.numel())
            throw ShapeError(str_cat("from_vector: ", vals.size(), " values for shape ",
                                     shape_str(t.shape())));
        std::copy(vals.begin(), vals.end(), t.mut_data());
        return t;
    }

    static TensorT randn(Shape shape, Rng& rng, Real stddev = Real(1)) {
        TensorT t(std::move(shape));
        Real* p = t.mut_data();
        for (std::size_t i = 0; i < t.numel(); ++i) p[i] = Real(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_ ? impl_->numel() : 0; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }

    const Real* data() const { return impl_->data.data(); }
    Real* mut_data() { return impl_->data.data(); }

    std::vector<Real> to_vector() const {
        return std::vector<Real>(data(), data() + numel());
    }

    Real item() const {
        if (numel() != 1) throw ShapeError(str_cat("item() on shape ", shape_str(shape())));
        return data()[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }

    TensorT& set_requires_grad(bool v) {
        if (v && impl_->backward_fn)
            throw Error("set_requires_grad: only leaf tensors can be marked");
        impl_->requires_grad = v;
        return *this;
    }

    bool in_graph() const { return impl_ && impl_->in_graph(); }

    bool has_grad() const { return impl_->grad.size() == impl_->numel() && impl_->numel() > 0; }

    const Real* grad_data() const {
        if (!has_grad()) throw Error("grad_data: no gradient present");
        return impl_->grad.data();
    }

    Real* mut_grad() {
        impl_->ensure_grad();
        return impl_->grad.data();
    }

    std::vector<Real> grad_vector() const {
        if (!has_grad()) return std::vector<Real>(numel(), Real(0));
        return std::vector<Real>(impl_->grad.data(), impl_->grad.data() + numel());
    }

    void zero_grad() {
        if (impl_->grad.size() > 0)
            std::fill(impl_->grad.data(), impl_->grad.data() + impl_->grad.size(), Real(0));
    }

    // Value copy with no graph history.
    TensorT detach() const {
        TensorT t(impl_->shape);
        std::copy(data(), data() + numel(), t.mut_data());
        return t;
    }

    void backward() const;

    std::shared_ptr<TensorImpl<Real>> impl() const { return impl_; }

  private:
    std::shared_ptr<TensorImpl<Real>> impl_;
};

using Tensor = TensorT<double>;

namespace detail {

// Registers `out` as an operation result. `parents` must be the in-graph
// inputs (used for the topological walk); `fn` scatters out.grad into them.
template <class Real, class F>
void attach_node(TensorT<Real>& out, std::vector<std::shared_ptr<TensorImpl<Real>>> parents,
                 F&& fn, const char* name) {
    auto impl = out.impl();
    impl->parents = std::move(parents);
    impl->backward_fn = std::forward<F>(fn);
    impl->op = name;
}

template <class Real>
bool any_in_graph(std::initializer_list<const TensorT<Real>*> ts) {
    if (!grad_enabled()) return false;
    for (const TensorT<Real>* t : ts)
        if (t->in_graph()) return true;
    return false;
}

template <class Real>
void accumulate(TensorImpl<Real>& dst, const Real* src, std::size_t n) {
    dst.ensure_grad();
    Real* g = dst.grad.data();
    for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

template <class Real>
void TensorT<Real>::backward() const {
    if (!impl_) throw Error("backward: undefined tensor");
    if (numel() != 1) throw ShapeError("backward: root must be a scalar");
    if (!impl_->in_graph()) throw Error("backward: root is detached from any graph");

    // Iterative post-order over parent edges; reversed it yields a valid
    // topological order (consumers before producers).
    std::vector<TensorImpl<Real>*> order;
    std::unordered_set<TensorImpl<Real>*> visited;
    std::vector<std::pair<TensorImpl<Real>*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl<Real>* p = node->parents[idx].get();
            ++idx;
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Leaf gradients accumulate across calls; interior nodes are scratch for
    // this pass and start from zero.
    for (TensorImpl<Real>* node : order) {
        if (node->backward_fn && node->grad.size() > 0)
            std::fill(node->grad.data(), node->grad.data() + node->grad.size(), Real(0));
    }

    impl_->ensure_grad();
    impl_->grad[0] += Real(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl<Real>* node = *it;
        if (node->backward_fn && node->grad.size() == node->numel() && node->numel() > 0)
            node->backward_fn(*node);
    }
}

// ---------------------------------------------------------------------------
// Shape checks and finite checks.
// ---------------------------------------------------------------------------
template <class Real>
void check_same_shape(const TensorT<Real>& a, const TensorT<Real>& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(str_cat(what, ": shapes ", shape_str(a.shape()), " and ",
                                 shape_str(b.shape()), " differ"));
}

template <class Real>
bool all_finite(const TensorT<Real>& t) {
    const Real* p = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(static_cast<double>(p[i]))) return false;
    return true;
}

template <class Real>
void assert_finite(const TensorT<Real>& t, const char* what) {
    if (!all_finite(t)) throw NumericError(str_cat(what, ": non-finite value"));
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
    check_same_shape(a, b, "add");
    TensorT<Real> out(a.shape());
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (detail::any_in_graph<Real>({&a, &b})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ia = a.impl(), ib = b.impl();
        if (ia->in_graph()) parents.push_back(ia);
        if (ib->in_graph()) parents.push_back(ib);
        detail::attach_node(out, parents,
                            [ia, ib, n](TensorImpl<Real>& self) {
                                if (ia->in_graph()) detail::accumulate(*ia, self.grad.data(), n);
                                if (ib->in_graph()) detail::accumulate(*ib, self.grad.data(), n);
                            },
                            "add");
    }
    return out;
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
    check_same_shape(a, b, "sub");
    TensorT<Real> out(a.shape());
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    if (detail::any_in_graph<Real>({&a, &b})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ia = a.impl(), ib = b.impl();
        if (ia->in_graph()) parents.push_back(ia);
        if (ib->in_graph()) parents.push_back(ib);
        detail::attach_node(out, parents,
                            [ia, ib, n](TensorImpl<Real>& self) {
                                if (ia->in_graph()) detail::accumulate(*ia, self.grad.data(), n);
                                if (ib->in_graph()) {
                                    ib->ensure_grad();
                                    Real* g = ib->grad.data();
                                    const Real* s = self.grad.data();
                                    for (std::size_t i = 0; i < n; ++i) g[i] -= s[i];
                                }
                            },
                            "sub");
    }
    return out;
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
    check_same_shape(a, b, "mul");
    TensorT<Real> out(a.shape());
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (detail::any_in_graph<Real>({&a, &b})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ia = a.impl(), ib = b.impl();
        if (ia->in_graph()) parents.push_back(ia);
        if (ib->in_graph()) parents.push_back(ib);
        detail::attach_node(out, parents,
                            [ia, ib, n](TensorImpl<Real>& self) {
                                const Real* s = self.grad.data();
                                if (ia->in_graph()) {
                                    ia->ensure_grad();
                                    Real* g = ia->grad.data();
                                    const Real* vb = ib->data.data();
                                    for (std::size_t i = 0; i < n; ++i) g[i] += s[i] * vb[i];
                                }
                                if (ib->in_graph()) {
                                    ib->ensure_grad();
                                    Real* g = ib->grad.data();
                                    const Real* va = ia->data.data();
                                    for (std::size_t i = 0; i < n; ++i) g[i] += s[i] * va[i];
                                }
                            },
                            "mul");
    }
    return out;
}

// Elementwise quotient; the caller guarantees a nonzero denominator.
template <class Real>
TensorT<Real> div(const TensorT<Real>& a, const TensorT<Real>& b) {
    check_same_shape(a, b, "div");
    TensorT<Real> out(a.shape());
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
    if (detail::any_in_graph<Real>({&a, &b})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ia = a.impl(), ib = b.impl();
        if (ia->in_graph()) parents.push_back(ia);
        if (ib->in_graph()) parents.push_back(ib);
        detail::attach_node(out, parents,
                            [ia, ib, n](TensorImpl<Real>& self) {
                                const Real* s = self.grad.data();
                                const Real* va = ia->data.data();
                                const Real* vb = ib->data.data();
                                if (ia->in_graph()) {
                                    ia->ensure_grad();
                                    Real* g = ia->grad.data();
                                    for (std::size_t i = 0; i < n; ++i) g[i] += s[i] / vb[i];
                                }
                                if (ib->in_graph()) {
                                    ib->ensure_grad();
                                    Real* g = ib->grad.data();
                                    for (std::size_t i = 0; i < n; ++i)
                                        g[i] -= s[i] * va[i] / (vb[i] * vb[i]);
                                }
                            },
                            "div");
    }
    return out;
}

template <class Real>
TensorT<Real> add_scalar(const TensorT<Real>& a, Real v) {
    TensorT<Real> out(a.shape());
    const Real* pa = a.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + v;
    if (detail::any_in_graph<Real>({&a})) {
        auto ia = a.impl();
        detail::attach_node(out, {ia},
                            [ia, n](TensorImpl<Real>& self) {
                                detail::accumulate(*ia, self.grad.data(), n);
                            },
                            "add_scalar");
    }
    return out;
}

template <class Real>
TensorT<Real> mul_scalar(const TensorT<Real>& a, Real v) {
    TensorT<Real> out(a.shape());
    const Real* pa = a.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * v;
    if (detail::any_in_graph<Real>({&a})) {
        auto ia = a.impl();
        detail::attach_node(out, {ia},
                            [ia, v, n](TensorImpl<Real>& self) {
                                ia->ensure_grad();
                                Real* g = ia->grad.data();
                                const Real* s = self.grad.data();
                                for (std::size_t i = 0; i < n; ++i) g[i] += s[i] * v;
                            },
                            "mul_scalar");
    }
    return out;
}

template <class Real>
TensorT<Real> neg(const TensorT<Real>& a) {
    return mul_scalar(a, Real(-1));
}

// Broadcast of a length-C vector over the leading axis of x.
template <class Real>
TensorT<Real> add_channel(const TensorT<Real>& x, const TensorT<Real>& v) {
    if (x.rank() < 1 || v.rank() != 1 || v.dim(0) != x.dim(0))
        throw ShapeError(str_cat("add_channel: ", shape_str(x.shape()), " with ",
                                 shape_str(v.shape())));
    const std::size_t c = x.dim(0);
    const std::size_t inner = x.numel() / c;
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    const Real* pv = v.data();
    Real* po = out.mut_data();
    for (std::size_t i = 0; i < c; ++i) {
        const Real b = pv[i];
        for (std::size_t j = 0; j < inner; ++j) po[i * inner + j] = px[i * inner + j] + b;
    }
    if (detail::any_in_graph<Real>({&x, &v})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ix = x.impl(), iv = v.impl();
        if (ix->in_graph()) parents.push_back(ix);
        if (iv->in_graph()) parents.push_back(iv);
        detail::attach_node(out, parents,
                            [ix, iv, c, inner](TensorImpl<Real>& self) {
                                const Real* s = self.grad.data();
                                if (ix->in_graph()) detail::accumulate(*ix, s, c * inner);
                                if (iv->in_graph()) {
                                    iv->ensure_grad();
                                    Real* g = iv->grad.data();
                                    for (std::size_t i = 0; i < c; ++i) {
                                        Real acc = Real(0);
                                        for (std::size_t j = 0; j < inner; ++j)
                                            acc += s[i * inner + j];
                                        g[i] += acc;
                                    }
                                }
                            },
                            "add_channel");
    }
    return out;
}

template <class Real>
TensorT<Real> mul_channel(const TensorT<Real>& x, const TensorT<Real>& v) {
    if (x.rank() < 1 || v.rank() != 1 || v.dim(0) != x.dim(0))
        throw ShapeError(str_cat("mul_channel: ", shape_str(x.shape()), " with ",
                                 shape_str(v.shape())));
    const std::size_t c = x.dim(0);
    const std::size_t inner = x.numel() / c;
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    const Real* pv = v.data();
    Real* po = out.mut_data();
    for (std::size_t i = 0; i < c; ++i) {
        const Real m = pv[i];
        for (std::size_t j = 0; j < inner; ++j) po[i * inner + j] = px[i * inner + j] * m;
    }
    if (detail::any_in_graph<Real>({&x, &v})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ix = x.impl(), iv = v.impl();
        if (ix->in_graph()) parents.push_back(ix);
        if (iv->in_graph()) parents.push_back(iv);
        detail::attach_node(out, parents,
                            [ix, iv, c, inner](TensorImpl<Real>& self) {
                                const Real* s = self.grad.data();
                                const Real* px = ix->data.data();
                                const Real* pv = iv->data.data();
                                if (ix->in_graph()) {
                                    ix->ensure_grad();
                                    Real* g = ix->grad.data();
                                    for (std::size_t i = 0; i < c; ++i) {
                                        const Real m = pv[i];
                                        for (std::size_t j = 0; j < inner; ++j)
                                            g[i * inner + j] += s[i * inner + j] * m;
                                    }
                                }
                                if (iv->in_graph()) {
                                    iv->ensure_grad();
                                    Real* g = iv->grad.data();
                                    for (std::size_t i = 0; i < c; ++i) {
                                        Real acc = Real(0);
                                        for (std::size_t j = 0; j < inner; ++j)
                                            acc += s[i * inner + j] * px[i * inner + j];
                                        g[i] += acc;
                                    }
                                }
                            },
                            "mul_channel");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> sigmoid(const TensorT<Real>& x) {
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = Real(1) / (Real(1) + std::exp(-px[i]));
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, n](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                const Real* y = self.data.data();
                                for (std::size_t i = 0; i < n; ++i)
                                    g[i] += s[i] * y[i] * (Real(1) - y[i]);
                            },
                            "sigmoid");
    }
    return out;
}

template <class Real>
TensorT<Real> silu(const TensorT<Real>& x) {
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const Real s = Real(1) / (Real(1) + std::exp(-px[i]));
        po[i] = px[i] * s;
    }
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, n](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                const Real* px = ix->data.data();
                                for (std::size_t i = 0; i < n; ++i) {
                                    const Real sg = Real(1) / (Real(1) + std::exp(-px[i]));
                                    g[i] += s[i] * sg * (Real(1) + px[i] * (Real(1) - sg));
                                }
                            },
                            "silu");
    }
    return out;
}

template <class Real>
TensorT<Real> softplus(const TensorT<Real>& x) {
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const Real v = px[i];
        po[i] = v > Real(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, n](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                const Real* px = ix->data.data();
                                for (std::size_t i = 0; i < n; ++i)
                                    g[i] += s[i] / (Real(1) + std::exp(-px[i]));
                            },
                            "softplus");
    }
    return out;
}

template <class Real>
TensorT<Real> exp(const TensorT<Real>& x) {
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, n](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                const Real* y = self.data.data();
                                for (std::size_t i = 0; i < n; ++i) g[i] += s[i] * y[i];
                            },
                            "exp");
    }
    return out;
}

// Square root with a zero subgradient at 0, so exact zeros propagate no
// gradient instead of infinities.
template <class Real>
TensorT<Real> sqrt(const TensorT<Real>& x) {
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = std::sqrt(px[i]);
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, n](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                const Real* y = self.data.data();
                                for (std::size_t i = 0; i < n; ++i)
                                    if (y[i] > Real(0)) g[i] += s[i] / (Real(2) * y[i]);
                            },
                            "sqrt");
    }
    return out;
}

// Softmax over the last axis, numerically shifted by the row max.
template <class Real>
TensorT<Real> softmax_last(const TensorT<Real>& x) {
    if (x.rank() < 1) throw ShapeError("softmax_last: rank 0");
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.mut_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = px + r * d;
        Real* yr = po + r * d;
        Real m = xr[0];
        for (std::size_t i = 1; i < d; ++i) m = std::max(m, xr[i]);
        Real sum = Real(0);
        for (std::size_t i = 0; i < d; ++i) {
            yr[i] = std::exp(xr[i] - m);
            sum += yr[i];
        }
        const Real inv = Real(1) / sum;
        for (std::size_t i = 0; i < d; ++i) yr[i] *= inv;
    }
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, rows, d](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                const Real* y = self.data.data();
                                for (std::size_t r = 0; r < rows; ++r) {
                                    const Real* yr = y + r * d;
                                    const Real* sr = s + r * d;
                                    Real dot = Real(0);
                                    for (std::size_t i = 0; i < d; ++i) dot += sr[i] * yr[i];
                                    Real* gr = g + r * d;
                                    for (std::size_t i = 0; i < d; ++i)
                                        gr[i] += yr[i] * (sr[i] - dot);
                                }
                            },
                            "softmax_last");
    }
    return out;
}

// Layer normalisation over the last axis (biased variance), with affine
// scale/shift. gamma and beta have the width of the last axis.
template <class Real>
TensorT<Real> layer_norm(const TensorT<Real>& x, const TensorT<Real>& gamma,
                         const TensorT<Real>& beta, Real eps = Real(1e-6)) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank 0");
    const std::size_t d = x.shape().back();
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw ShapeError(str_cat("layer_norm: affine params must be [", d, "]"));
    const std::size_t rows = x.numel() / d;
    TensorT<Real> out(x.shape());
    auto saved = std::make_shared<detail::TrackedBuffer<Real>>(2 * rows);  // mean, rstd
    const Real* px = x.data();
    const Real* pg = gamma.data();
    const Real* pb = beta.data();
    Real* po = out.mut_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = px + r * d;
        Real mean = Real(0);
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= Real(d);
        Real var = Real(0);
        for (std::size_t i = 0; i < d; ++i) {
            const Real c = xr[i] - mean;
            var += c * c;
        }
        var /= Real(d);
        const Real rstd = Real(1) / std::sqrt(var + eps);
        (*saved)[2 * r] = mean;
        (*saved)[2 * r + 1] = rstd;
        Real* yr = po + r * d;
        for (std::size_t i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * rstd * pg[i] + pb[i];
    }
    if (detail::any_in_graph<Real>({&x, &gamma, &beta})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ix = x.impl(), ig = gamma.impl(), ib = beta.impl();
        if (ix->in_graph()) parents.push_back(ix);
        if (ig->in_graph()) parents.push_back(ig);
        if (ib->in_graph()) parents.push_back(ib);
        detail::attach_node(
            out, parents,
            [ix, ig, ib, saved, rows, d](TensorImpl<Real>& self) {
                const Real* s = self.grad.data();
                const Real* px = ix->data.data();
                const Real* pg = ig->data.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const Real mean = (*saved)[2 * r];
                    const Real rstd = (*saved)[2 * r + 1];
                    const Real* xr = px + r * d;
                    const Real* sr = s + r * d;
                    if (ig->in_graph() || ib->in_graph()) {
                        ig->ensure_grad();
                        ib->ensure_grad();
                        Real* gg = ig->grad.data();
                        Real* gb = ib->grad.data();
                        for (std::size_t i = 0; i < d; ++i) {
                            gg[i] += sr[i] * (xr[i] - mean) * rstd;
                            gb[i] += sr[i];
                        }
                    }
                    if (ix->in_graph()) {
                        ix->ensure_grad();
                        Real* gx = ix->grad.data() + r * d;
                        Real sum1 = Real(0), sum2 = Real(0);
                        for (std::size_t i = 0; i < d; ++i) {
                            const Real gy = sr[i] * pg[i];
                            const Real xh = (xr[i] - mean) * rstd;
                            sum1 += gy;
                            sum2 += gy * xh;
                        }
                        sum1 /= Real(d);
                        sum2 /= Real(d);
                        for (std::size_t i = 0; i < d; ++i) {
                            const Real gy = sr[i] * pg[i];
                            const Real xh = (xr[i] - mean) * rstd;
                            gx[i] += rstd * (gy - sum1 - xh * sum2);
                        }
                    }
                }
            },
            "layer_norm");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix product. Row-major GEMM kernels; loop orders keep the inner axis
// contiguous so the compiler can vectorise them.
// ---------------------------------------------------------------------------
namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <class Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const Real* __restrict a,
             const Real* __restrict b, Real* __restrict c) {
    for (std::size_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        const Real* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = ai[p];
            const Real* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x n] += A^T * B where A is stored [k x m]
template <class Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const Real* __restrict a,
             const Real* __restrict b, Real* __restrict c) {
    for (std::size_t p = 0; p < k; ++p) {
        const Real* ap = a + p * m;
        const Real* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real av = ap[i];
            Real* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x n] += A * B^T where B is stored [n x k]
template <class Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const Real* __restrict a,
             const Real* __restrict b, Real* __restrict c) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        Real* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const Real* bj = b + j * k;
            Real acc = Real(0);
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

}  // namespace detail

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError(str_cat("matmul: expects rank-2 operands, got ", shape_str(a.shape()),
                                 " and ", shape_str(b.shape())));
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError(str_cat("matmul: inner extents differ: ", shape_str(a.shape()), " vs ",
                                 shape_str(b.shape())));
    TensorT<Real> out(Shape{m, n});
    detail::gemm_nn(m, n, k, a.data(), b.data(), out.mut_data());
    if (detail::any_in_graph<Real>({&a, &b})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ia = a.impl(), ib = b.impl();
        if (ia->in_graph()) parents.push_back(ia);
        if (ib->in_graph()) parents.push_back(ib);
        detail::attach_node(out, parents,
                            [ia, ib, m, n, k](TensorImpl<Real>& self) {
                                const Real* g = self.grad.data();
                                if (ia->in_graph()) {
                                    ia->ensure_grad();
                                    // dA += G * B^T
                                    detail::gemm_nt(m, k, n, g, ib->data.data(),
                                                    ia->grad.data());
                                }
                                if (ib->in_graph()) {
                                    ib->ensure_grad();
                                    // dB += A^T * G
                                    detail::gemm_tn(k, n, m, ia->data.data(), g,
                                                    ib->grad.data());
                                }
                            },
                            "matmul");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> reshape(const TensorT<Real>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError(str_cat("reshape: ", shape_str(x.shape()), " to ", shape_str(shape),
                                 " changes element count"));
    TensorT<Real> out(std::move(shape));
    std::copy(x.data(), x.data() + x.numel(), out.mut_data());
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        const std::size_t n = x.numel();
        detail::attach_node(out, {ix},
                            [ix, n](TensorImpl<Real>& self) {
                                detail::accumulate(*ix, self.grad.data(), n);
                            },
                            "reshape");
    }
    return out;
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

}  // namespace detail

// Axis reordering: out dimension i is input dimension axes[i].
template <class Real>
TensorT<Real> permute(const TensorT<Real>& x, const std::vector<std::size_t>& axes) {
    const std::size_t r = x.rank();
    if (axes.size() != r) throw ShapeError("permute: axes size mismatch");
    std::vector<bool> seen(r, false);
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (axes[i] >= r || seen[axes[i]]) throw ShapeError("permute: invalid axes");
        seen[axes[i]] = true;
        out_shape[i] = x.dim(axes[i]);
    }
    TensorT<Real> out(out_shape);
    const auto in_strides = detail::row_major_strides(x.shape());
    std::vector<std::size_t> gather_stride(r);
    for (std::size_t i = 0; i < r; ++i) gather_stride[i] = in_strides[axes[i]];
    const Real* px = x.data();
    Real* po = out.mut_data();
    const std::size_t n = out.numel();
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < n; ++o) {
        po[o] = px[src];
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            src += gather_stride[ax];
            if (idx[ax] < out_shape[ax]) break;
            src -= gather_stride[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, gather_stride, out_shape, r, n](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                std::vector<std::size_t> idx(r, 0);
                                std::size_t src = 0;
                                for (std::size_t o = 0; o < n; ++o) {
                                    g[src] += s[o];
                                    for (std::size_t ax = r; ax-- > 0;) {
                                        ++idx[ax];
                                        src += gather_stride[ax];
                                        if (idx[ax] < out_shape[ax]) break;
                                        src -= gather_stride[ax] * out_shape[ax];
                                        idx[ax] = 0;
                                    }
                                }
                            },
                            "permute");
    }
    return out;
}

template <class Real>
TensorT<Real> concat(const std::vector<TensorT<Real>>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const std::size_t r = xs[0].rank();
    if (axis >= r) throw ShapeError("concat: axis out of range");
    Shape out_shape = xs[0].shape();
    std::size_t axis_total = 0;
    for (const auto& t : xs) {
        if (t.rank() != r) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < r; ++i)
            if (i != axis && t.dim(i) != out_shape[i])
                throw ShapeError("concat: non-axis extents differ");
        axis_total += t.dim(axis);
    }
    out_shape[axis] = axis_total;
    TensorT<Real> out(out_shape);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
    for (std::size_t i = axis + 1; i < r; ++i) inner *= out_shape[i];
    Real* po = out.mut_data();
    std::size_t offset = 0;
    for (const auto& t : xs) {
        const std::size_t block = t.dim(axis) * inner;
        const Real* pt = t.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(pt + o * block, pt + (o + 1) * block,
                      po + o * axis_total * inner + offset);
        offset += block;
    }
    bool track = false;
    for (const auto& t : xs) track = track || t.in_graph();
    if (grad_enabled() && track) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> impls;
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        for (const auto& t : xs) {
            impls.push_back(t.impl());
            if (t.in_graph()) parents.push_back(t.impl());
        }
        detail::attach_node(out, parents,
                            [impls, outer, inner, axis_total, axis](TensorImpl<Real>& self) {
                                const Real* s = self.grad.data();
                                std::size_t offset = 0;
                                for (const auto& ip : impls) {
                                    const std::size_t block = ip->shape[axis] * inner;
                                    if (ip->in_graph()) {
                                        ip->ensure_grad();
                                        Real* g = ip->grad.data();
                                        for (std::size_t o = 0; o < outer; ++o) {
                                            const Real* src = s + o * axis_total * inner + offset;
                                            Real* dst = g + o * block;
                                            for (std::size_t i = 0; i < block; ++i)
                                                dst[i] += src[i];
                                        }
                                    }
                                    offset += block;
                                }
                            },
                            "concat");
    }
    return out;
}

template <class Real>
TensorT<Real> slice(const TensorT<Real>& x, std::size_t axis, std::size_t start,
                    std::size_t len) {
    const std::size_t r = x.rank();
    if (axis >= r) throw ShapeError("slice: axis out of range");
    if (start + len > x.dim(axis))
        throw ShapeError(str_cat("slice: [", start, ",", start + len, ") exceeds extent ",
                                 x.dim(axis)));
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    TensorT<Real> out(out_shape);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < r; ++i) inner *= x.dim(i);
    const std::size_t in_block = x.dim(axis) * inner;
    const std::size_t out_block = len * inner;
    const Real* px = x.data();
    Real* po = out.mut_data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(px + o * in_block + start * inner, px + o * in_block + (start + len) * inner,
                  po + o * out_block);
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, outer, inner, in_block, out_block, start](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                for (std::size_t o = 0; o < outer; ++o) {
                                    Real* dst = g + o * in_block + start * inner;
                                    const Real* src = s + o * out_block;
                                    for (std::size_t i = 0; i < out_block; ++i) dst[i] += src[i];
                                }
                            },
                            "slice");
    }
    return out;
}

// Applies a position permutation to every row of a [C x L] tensor:
// out[c][i] = x[c][perm[i]]. perm must be a bijection on [0, L).
template <class Real>
TensorT<Real> permute_positions(const TensorT<Real>& x,
                                std::shared_ptr<const std::vector<std::size_t>> perm) {
    if (x.rank() != 2) throw ShapeError("permute_positions: expects [C x L]");
    const std::size_t c = x.dim(0), l = x.dim(1);
    if (!perm || perm->size() != l)
        throw ShapeError(str_cat("permute_positions: permutation size ",
                                 perm ? perm->size() : 0, " vs length ", l));
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    Real* po = out.mut_data();
    const std::size_t* pp = perm->data();
    for (std::size_t i = 0; i < c; ++i) {
        const Real* xr = px + i * l;
        Real* yr = po + i * l;
        for (std::size_t j = 0; j < l; ++j) yr[j] = xr[pp[j]];
    }
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, perm, c, l](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real* s = self.grad.data();
                                const std::size_t* pp = perm->data();
                                for (std::size_t i = 0; i < c; ++i) {
                                    Real* gr = g + i * l;
                                    const Real* sr = s + i * l;
                                    for (std::size_t j = 0; j < l; ++j) gr[pp[j]] += sr[j];
                                }
                            },
                            "permute_positions");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& x) {
    TensorT<Real> out(Shape{1});
    const Real* px = x.data();
    Real acc = Real(0);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) acc += px[i];
    out.mut_data()[0] = acc;
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(out, {ix},
                            [ix, n](TensorImpl<Real>& self) {
                                ix->ensure_grad();
                                Real* g = ix->grad.data();
                                const Real s = self.grad[0];
                                for (std::size_t i = 0; i < n; ++i) g[i] += s;
                            },
                            "sum_all");
    }
    return out;
}

template <class Real>
TensorT<Real> mean_all(const TensorT<Real>& x) {
    if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
    return mul_scalar(sum_all(x), Real(1) / Real(x.numel()));
}

// ---------------------------------------------------------------------------
// First-order linear recurrence along the last axis, batched over rows:
//   h[r][0] = b[r][0],  h[r][t] = a[r][t] * h[r][t-1] + b[r][t].
// The output itself is the full state sequence, so the adjoint only needs
// the inputs and the output.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> linear_scan(const TensorT<Real>& a, const TensorT<Real>& b) {
    check_same_shape(a, b, "linear_scan");
    if (a.rank() < 1) throw ShapeError("linear_scan: rank 0");
    const std::size_t l = a.shape().back();
    const std::size_t rows = a.numel() / l;
    TensorT<Real> out(a.shape());
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* po = out.mut_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* ar = pa + r * l;
        const Real* br = pb + r * l;
        Real* hr = po + r * l;
        Real h = Real(0);
        for (std::size_t t = 0; t < l; ++t) {
            h = ar[t] * h + br[t];
            hr[t] = h;
        }
    }
    if (detail::any_in_graph<Real>({&a, &b})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ia = a.impl(), ib = b.impl();
        if (ia->in_graph()) parents.push_back(ia);
        if (ib->in_graph()) parents.push_back(ib);
        detail::attach_node(
            out, parents,
            [ia, ib, rows, l](TensorImpl<Real>& self) {
                const Real* s = self.grad.data();
                const Real* h = self.data.data();
                const Real* pa = ia->data.data();
                Real* ga = nullptr;
                Real* gb = nullptr;
                if (ia->in_graph()) {
                    ia->ensure_grad();
                    ga = ia->grad.data();
                }
                if (ib->in_graph()) {
                    ib->ensure_grad();
                    gb = ib->grad.data();
                }
                for (std::size_t r = 0; r < rows; ++r) {
                    const Real* ar = pa + r * l;
                    const Real* hr = h + r * l;
                    const Real* sr = s + r * l;
                    // Reverse-time adjoint: st = d(loss)/d(h[t]) accumulates
                    // the downstream carry a[t+1] * s[t+1].
                    Real s_next = Real(0);
                    for (std::size_t t = l; t-- > 0;) {
                        const Real st =
                            sr[t] + (t + 1 < l ? ar[t + 1] * s_next : Real(0));
                        if (gb) gb[r * l + t] += st;
                        if (ga) ga[r * l + t] += st * (t > 0 ? hr[t - 1] : Real(0));
                        s_next = st;
                    }
                }
            },
            "linear_scan");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Central-difference gradient verification. Runs f once with gradients to get
// the analytic values, then perturbs each requested coordinate of x by +/- h
// under NoGradGuard. Returns the maximum relative error
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
// Non-finite values anywhere raise NumericError.
// ---------------------------------------------------------------------------
template <class Real>
double finite_diff_check(const std::function<TensorT<Real>(const TensorT<Real>&)>& f,
                         const TensorT<Real>& x0, double h = 1e-4,
                         const std::vector<std::size_t>* coords = nullptr) {
    TensorT<Real> x = x0.detach();
    x.set_requires_grad(true);
    TensorT<Real> y = f(x);
    if (y.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
    assert_finite(y, "finite_diff_check: f(x)");
    y.backward();
    const std::vector<Real> g = x.grad_vector();

    auto eval_shifted = [&](std::size_t i, double delta) {
        TensorT<Real> xp = x0.detach();
        xp.mut_data()[i] += Real(delta);
        NoGradGuard ng;
        TensorT<Real> yp = f(xp);
        if (yp.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
        const double v = static_cast<double>(yp.item());
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite f(x +/- h)");
        return v;
    };

    double max_rel = 0.0;
    auto check_coord = [&](std::size_t i) {
        if (i >= x0.numel()) throw ShapeError("finite_diff_check: coordinate out of range");
        const double numeric = (eval_shifted(i, h) - eval_shifted(i, -h)) / (2.0 * h);
        const double analytic = static_cast<double>(g[i]);
        if (!std::isfinite(analytic) || !std::isfinite(numeric))
            throw NumericError("finite_diff_check: non-finite gradient");
        const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
        max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    };

    if (coords) {
        for (std::size_t i : *coords) check_coord(i);
    } else {
        for (std::size_t i = 0; i < x0.numel(); ++i) check_coord(i);
    }
    return max_rel;
}

}  // namespace vivim
