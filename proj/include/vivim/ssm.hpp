#pragma once

#include "vivim/scan_order.hpp"
#include "vivim/tensor.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Zero-order-hold discretisation of a scalar continuous-time state equation
//   h' = a h + b x  ->  h[t] = abar h[t-1] + bbar x[t]
// with abar = exp(delta a) and bbar = (exp(delta a) - 1)/a * b. Below
// |delta * a| = 1e-8 the quotient is replaced by its limit delta * b, which
// is exact to first order and avoids the cancellation in expm1(p)/a.
// ---------------------------------------------------------------------------
struct ZohCoeffs {
    double abar;
    double bbar;
};

inline ZohCoeffs discretize_zoh(double a, double b, double delta) {
    if (delta == 0.0) return {1.0, 0.0};
    const double p = delta * a;
    if (std::abs(p) < 1e-8) return {std::exp(p), delta * b};
    return {std::exp(p), std::expm1(p) / a * b};
}

// ---------------------------------------------------------------------------
// Time-invariant diagonal SSM, run as a recurrence. Batched over channels:
// abar, bbar, cvec are [C, N]; x is [C, M]; y[c][t] = sum_n cvec * h[c][n][t].
// Differentiable in all four inputs; the state trajectory is saved for the
// adjoint, which runs the recurrence backwards in time.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> ssm_recurrent(const TensorT<Real>& abar, const TensorT<Real>& bbar,
                            const TensorT<Real>& cvec, const TensorT<Real>& x) {
    check_same_shape(abar, bbar, "ssm_recurrent");
    check_same_shape(abar, cvec, "ssm_recurrent");
    if (abar.rank() != 2 || x.rank() != 2 || x.dim(0) != abar.dim(0))
        throw ShapeError(str_cat("ssm_recurrent: params ", shape_str(abar.shape()), ", x ",
                                 shape_str(x.shape())));
    const std::size_t c = abar.dim(0), n = abar.dim(1), m = x.dim(1);
    if (m == 0) throw ShapeError("ssm_recurrent: length-0 sequence");
    const bool track = detail::any_in_graph<Real>({&abar, &bbar, &cvec, &x});

    TensorT<Real> y(Shape{c, m});
    std::shared_ptr<detail::TrackedBuffer<Real>> hsave;
    if (track) hsave = std::make_shared<detail::TrackedBuffer<Real>>(c * m * n);
    {
        std::vector<Real> s(n);
        const Real* pa = abar.data();
        const Real* pb = bbar.data();
        const Real* pc = cvec.data();
        const Real* px = x.data();
        Real* py = y.mut_data();
        for (std::size_t ci = 0; ci < c; ++ci) {
            std::fill(s.begin(), s.end(), Real(0));
            const Real* ar = pa + ci * n;
            const Real* br = pb + ci * n;
            const Real* cr = pc + ci * n;
            for (std::size_t t = 0; t < m; ++t) {
                const Real xt = px[ci * m + t];
                Real acc = Real(0);
                Real* hrow = hsave ? hsave->data() + (ci * m + t) * n : nullptr;
                for (std::size_t k = 0; k < n; ++k) {
                    s[k] = ar[k] * s[k] + br[k] * xt;
                    if (hrow) hrow[k] = s[k];
                    acc += cr[k] * s[k];
                }
                py[ci * m + t] = acc;
            }
        }
    }

    if (track) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ia = abar.impl(), ib = bbar.impl(), ic = cvec.impl(), ix = x.impl();
        for (auto& p : {ia, ib, ic, ix})
            if (p->in_graph()) parents.push_back(p);
        detail::attach_node(
            y, parents,
            [ia, ib, ic, ix, hsave, c, n, m](TensorImpl<Real>& self) {
                const Real* g = self.grad.data();
                const Real* pa = ia->data.data();
                const Real* pb = ib->data.data();
                const Real* pc = ic->data.data();
                const Real* px = ix->data.data();
                const Real* h = hsave->data();
                Real *ga = nullptr, *gb = nullptr, *gc = nullptr, *gx = nullptr;
                if (ia->in_graph()) { ia->ensure_grad(); ga = ia->grad.data(); }
                if (ib->in_graph()) { ib->ensure_grad(); gb = ib->grad.data(); }
                if (ic->in_graph()) { ic->ensure_grad(); gc = ic->grad.data(); }
                if (ix->in_graph()) { ix->ensure_grad(); gx = ix->grad.data(); }
                std::vector<Real> gs(n);
                for (std::size_t ci = 0; ci < c; ++ci) {
                    std::fill(gs.begin(), gs.end(), Real(0));
                    const Real* ar = pa + ci * n;
                    const Real* br = pb + ci * n;
                    const Real* cr = pc + ci * n;
                    for (std::size_t t = m; t-- > 0;) {
                        const Real gy = g[ci * m + t];
                        const Real xt = px[ci * m + t];
                        const Real* ht = h + (ci * m + t) * n;
                        const Real* hprev = t > 0 ? h + (ci * m + t - 1) * n : nullptr;
                        Real dx = Real(0);
                        for (std::size_t k = 0; k < n; ++k) {
                            gs[k] += gy * cr[k];
                            if (gc) gc[ci * n + k] += gy * ht[k];
                            if (gb) gb[ci * n + k] += gs[k] * xt;
                            if (ga && hprev) ga[ci * n + k] += gs[k] * hprev[k];
                            dx += gs[k] * br[k];
                            gs[k] *= ar[k];
                        }
                        if (gx) gx[ci * m + t] += dx;
                    }
                }
            },
            "ssm_recurrent");
    }
    return y;
}

// ---------------------------------------------------------------------------
// Convolutional form of the same LTI system: an independent reference path.
// The impulse-response kernel K[c][k] = sum_n cvec * abar^k * bbar is built
// explicitly and applied as a causal convolution. No gradients.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> ssm_kernel(const TensorT<Real>& abar, const TensorT<Real>& bbar,
                         const TensorT<Real>& cvec, std::size_t klen) {
    check_same_shape(abar, bbar, "ssm_kernel");
    check_same_shape(abar, cvec, "ssm_kernel");
    if (abar.rank() != 2) throw ShapeError("ssm_kernel: params must be [C, N]");
    const std::size_t c = abar.dim(0), n = abar.dim(1);
    TensorT<Real> k(Shape{c, klen});
    std::vector<Real> pw(n);
    for (std::size_t ci = 0; ci < c; ++ci) {
        const Real* ar = abar.data() + ci * n;
        const Real* br = bbar.data() + ci * n;
        const Real* cr = cvec.data() + ci * n;
        for (std::size_t j = 0; j < n; ++j) pw[j] = br[j];
        Real* kr = k.mut_data() + ci * klen;
        for (std::size_t t = 0; t < klen; ++t) {
            Real acc = Real(0);
            for (std::size_t j = 0; j < n; ++j) {
                acc += cr[j] * pw[j];
                pw[j] *= ar[j];
            }
            kr[t] = acc;
        }
    }
    return k;
}

template <class Real>
TensorT<Real> ssm_conv(const TensorT<Real>& abar, const TensorT<Real>& bbar,
                       const TensorT<Real>& cvec, const TensorT<Real>& x) {
    if (x.rank() != 2 || x.dim(0) != abar.dim(0))
        throw ShapeError("ssm_conv: x must be [C, M]");
    const std::size_t c = x.dim(0), m = x.dim(1);
    NoGradGuard ng;
    TensorT<Real> k = ssm_kernel(abar, bbar, cvec, m);
    TensorT<Real> y(Shape{c, m});
    for (std::size_t ci = 0; ci < c; ++ci) {
        const Real* kr = k.data() + ci * m;
        const Real* xr = x.data() + ci * m;
        Real* yr = y.mut_data() + ci * m;
        for (std::size_t t = 0; t < m; ++t) {
            Real acc = Real(0);
            for (std::size_t j = 0; j <= t; ++j) acc += kr[j] * xr[t - j];
            yr[t] = acc;
        }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Selective scan core. Input-dependent step sizes and projections:
//   abar[c][n][t] = exp(delta[c][t] * A_n),   A_n = -(n + 1)
//   h[c][n][t]    = abar * h[c][n][t-1] + (abar - 1)/A_n * B[n][t] * u[c][t]
//   y[c][t]       = sum_n C[n][t] * h[c][n][t]
// The fixed integer spectrum lets abar be built from one exp per (c, t) by
// repeated multiplication. delta must be positive (softplus upstream). When
// gradients are on, the state trajectory and exp(-delta) are saved; without
// gradients the scan streams with O(C*N) state, so peak memory stays linear
// in sequence length.
// ---------------------------------------------------------------------------
template <class Real>
TensorT<Real> selective_scan_core(const TensorT<Real>& delta, const TensorT<Real>& bmat,
                                  const TensorT<Real>& cmat, const TensorT<Real>& u) {
    check_same_shape(delta, u, "selective_scan_core");
    check_same_shape(bmat, cmat, "selective_scan_core");
    if (delta.rank() != 2 || bmat.rank() != 2 || bmat.dim(1) != delta.dim(1))
        throw ShapeError(str_cat("selective_scan_core: delta ", shape_str(delta.shape()),
                                 ", B ", shape_str(bmat.shape())));
    const std::size_t c = delta.dim(0), m = delta.dim(1), n = bmat.dim(0);
    if (m == 0) throw ShapeError("selective_scan_core: length-0 sequence");
    const bool track = detail::any_in_graph<Real>({&delta, &bmat, &cmat, &u});

    TensorT<Real> y(Shape{c, m});
    std::shared_ptr<detail::TrackedBuffer<Real>> hsave;
    std::shared_ptr<detail::TrackedBuffer<Real>> esave;
    if (track) {
        hsave = std::make_shared<detail::TrackedBuffer<Real>>(c * m * n);
        esave = std::make_shared<detail::TrackedBuffer<Real>>(c * m);
    }
    {
        std::vector<Real> s(n);
        const Real* pd = delta.data();
        const Real* pb = bmat.data();
        const Real* pc = cmat.data();
        const Real* pu = u.data();
        Real* py = y.mut_data();
        for (std::size_t ci = 0; ci < c; ++ci) {
            std::fill(s.begin(), s.end(), Real(0));
            for (std::size_t t = 0; t < m; ++t) {
                const Real e1 = std::exp(-pd[ci * m + t]);
                if (esave) (*esave)[ci * m + t] = e1;
                const Real ut = pu[ci * m + t];
                Real* hrow = hsave ? hsave->data() + (ci * m + t) * n : nullptr;
                Real pw = Real(1);
                Real acc = Real(0);
                for (std::size_t k = 0; k < n; ++k) {
                    pw *= e1;
                    const Real phi = (Real(1) - pw) / Real(k + 1);
                    s[k] = pw * s[k] + phi * pb[k * m + t] * ut;
                    if (hrow) hrow[k] = s[k];
                    acc += pc[k * m + t] * s[k];
                }
                if (!std::isfinite(static_cast<double>(acc)))
                    throw NumericError(str_cat("selective_scan_core: non-finite value at channel ",
                                               ci, " step ", t));
                py[ci * m + t] = acc;
            }
        }
    }

    if (track) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto id = delta.impl(), ib = bmat.impl(), ic = cmat.impl(), iu = u.impl();
        for (auto& p : {id, ib, ic, iu})
            if (p->in_graph()) parents.push_back(p);
        detail::attach_node(
            y, parents,
            [id, ib, ic, iu, hsave, esave, c, n, m](TensorImpl<Real>& self) {
                const Real* g = self.grad.data();
                const Real* pb = ib->data.data();
                const Real* pc = ic->data.data();
                const Real* pu = iu->data.data();
                const Real* h = hsave->data();
                const Real* e = esave->data();
                Real *gd = nullptr, *gb = nullptr, *gc = nullptr, *gu = nullptr;
                if (id->in_graph()) { id->ensure_grad(); gd = id->grad.data(); }
                if (ib->in_graph()) { ib->ensure_grad(); gb = ib->grad.data(); }
                if (ic->in_graph()) { ic->ensure_grad(); gc = ic->grad.data(); }
                if (iu->in_graph()) { iu->ensure_grad(); gu = iu->grad.data(); }
                std::vector<Real> gs(n);
                for (std::size_t ci = 0; ci < c; ++ci) {
                    std::fill(gs.begin(), gs.end(), Real(0));
                    for (std::size_t t = m; t-- > 0;) {
                        const Real gy = g[ci * m + t];
                        const Real ut = pu[ci * m + t];
                        const Real e1 = e[ci * m + t];
                        const Real* ht = h + (ci * m + t) * n;
                        const Real* hprev = t > 0 ? h + (ci * m + t - 1) * n : nullptr;
                        Real du = Real(0);
                        Real dd = Real(0);
                        Real pw = Real(1);
                        for (std::size_t k = 0; k < n; ++k) {
                            pw *= e1;
                            const Real an = -Real(k + 1);
                            const Real phi = (Real(1) - pw) / Real(k + 1);
                            const Real bt = pb[k * m + t];
                            gs[k] += gy * pc[k * m + t];
                            if (gc) gc[k * m + t] += gy * ht[k];
                            // d(abar): through the recurrence and through phi
                            const Real dabar =
                                gs[k] * ((hprev ? hprev[k] : Real(0)) + bt * ut / an);
                            dd += dabar * an * pw;
                            if (gb) gb[k * m + t] += gs[k] * phi * ut;
                            du += gs[k] * phi * bt;
                            gs[k] *= pw;
                        }
                        if (gd) gd[ci * m + t] += dd;
                        if (gu) gu[ci * m + t] += du;
                    }
                }
            },
            "selective_scan_core");
    }
    return y;
}

// ---------------------------------------------------------------------------
// Full selective-scan block: input projection, input-dependent step size and
// state projections, the scan itself, learned skip, multiplicative SiLU gate,
// and the output projection back to the block width.
// ---------------------------------------------------------------------------
template <class Real>
void fill_trunc_normal(TensorT<Real>& t, Rng& rng, double stddev) {
    Real* p = t.mut_data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
        double v = rng.normal();
        while (std::abs(v) > 2.0) v = rng.normal();
        p[i] = Real(v * stddev);
    }
}

template <class Real>
struct SelectiveScanBlock {
    std::size_t d_model = 0;   // block input/output width
    std::size_t d_inner = 0;   // expanded scan width
    std::size_t n_state = 0;   // state dimension per channel
    bool use_gate = true;
    bool use_skip = true;

    TensorT<Real> w_in, b_in;        // [d_inner, d_model], [d_inner]
    TensorT<Real> w_gate, b_gate;    // [d_inner, d_model], [d_inner]
    TensorT<Real> w_delta, b_delta;  // [d_inner, d_model], [d_inner]
    TensorT<Real> w_b, w_c;          // [n_state, d_model]
    TensorT<Real> d_skip;            // [d_inner]
    TensorT<Real> w_out, b_out;      // [d_model, d_inner]

    void init(std::size_t d, std::size_t n, Rng& rng, std::size_t expand = 2,
              double dt_min = 1e-3, double dt_max = 0.1) {
        d_model = d;
        d_inner = d * expand;
        n_state = n;
        const double std_w = 0.02;
        w_in = TensorT<Real>(Shape{d_inner, d_model});
        fill_trunc_normal(w_in, rng, std_w);
        b_in = TensorT<Real>(Shape{d_inner});
        w_gate = TensorT<Real>(Shape{d_inner, d_model});
        fill_trunc_normal(w_gate, rng, std_w);
        b_gate = TensorT<Real>(Shape{d_inner});
        w_delta = TensorT<Real>(Shape{d_inner, d_model});
        fill_trunc_normal(w_delta, rng, std_w);
        b_delta = TensorT<Real>(Shape{d_inner});
        // Step-size bias: softplus(b_delta) lands log-uniformly in
        // [dt_min, dt_max], so every channel starts with a usable timescale.
        for (std::size_t i = 0; i < d_inner; ++i) {
            const double dt = std::exp(rng.uniform(std::log(dt_min), std::log(dt_max)));
            b_delta.mut_data()[i] = Real(std::log(std::expm1(dt)));
        }
        w_b = TensorT<Real>(Shape{n_state, d_model});
        fill_trunc_normal(w_b, rng, std_w);
        w_c = TensorT<Real>(Shape{n_state, d_model});
        fill_trunc_normal(w_c, rng, std_w);
        d_skip = TensorT<Real>::full(Shape{d_inner}, Real(1));
        w_out = TensorT<Real>(Shape{d_model, d_inner});
        fill_trunc_normal(w_out, rng, std_w);
        b_out = TensorT<Real>(Shape{d_model});
    }

    // x: [d_model, L] -> [d_model, L]
    TensorT<Real> forward(const TensorT<Real>& x) const {
        TensorT<Real> u = add_channel(matmul(w_in, x), b_in);
        TensorT<Real> dpre = add_channel(matmul(w_delta, x), b_delta);
        TensorT<Real> dt = softplus(dpre);
        TensorT<Real> bm = matmul(w_b, x);
        TensorT<Real> cm = matmul(w_c, x);
        TensorT<Real> core = selective_scan_core(dt, bm, cm, u);
        if (use_skip) core = add(core, mul_channel(u, d_skip));
        if (use_gate) core = mul(core, silu(add_channel(matmul(w_gate, x), b_gate)));
        return add_channel(matmul(w_out, core), b_out);
    }

    template <class F>
    void visit_params(const std::string& prefix, F&& f) {
        f(prefix + "w_in", w_in);
        f(prefix + "b_in", b_in);
        f(prefix + "w_gate", w_gate);
        f(prefix + "b_gate", b_gate);
        f(prefix + "w_delta", w_delta);
        f(prefix + "b_delta", b_delta);
        f(prefix + "w_b", w_b);
        f(prefix + "w_c", w_c);
        f(prefix + "d_skip", d_skip);
        f(prefix + "w_out", w_out);
        f(prefix + "b_out", b_out);
    }
};

// Layer norm over the channel axis of a [C, L] sequence (per position).
template <class Real>
TensorT<Real> channel_layer_norm(const TensorT<Real>& x, const TensorT<Real>& g,
                                 const TensorT<Real>& b) {
    return permute(layer_norm(permute(x, {1, 0}), g, b), {1, 0});
}

// ---------------------------------------------------------------------------
// Tri-directional scan layer over the canonical [C, L] sequence: pre-norm,
// up to three direction branches (temporal forward/backward, spatial
// forward), summed and merged by a shared projection, added residually.
// The merge weight starts at zero so a fresh layer is the identity.
// ---------------------------------------------------------------------------
template <class Real>
struct TriScanLayer {
    std::size_t dim = 0;
    bool use_tf = true, use_tb = true, use_sp = true;
    TensorT<Real> ln_g, ln_b;
    SelectiveScanBlock<Real> tf, tb, sp;
    TensorT<Real> w_merge, b_merge;

    void init(std::size_t d, std::size_t n_state, Rng& rng) {
        dim = d;
        ln_g = TensorT<Real>::full(Shape{d}, Real(1));
        ln_b = TensorT<Real>(Shape{d});
        tf.init(d, n_state, rng);
        tb.init(d, n_state, rng);
        sp.init(d, n_state, rng);
        w_merge = TensorT<Real>(Shape{d, d});  // zero: layer starts as identity
        b_merge = TensorT<Real>(Shape{d});
    }

    TensorT<Real> channel_norm(const TensorT<Real>& x) const {
        return channel_layer_norm(x, ln_g, ln_b);
    }

    // x: [C, L] in canonical temporal-first order.
    TensorT<Real> forward(const TensorT<Real>& x, const scan::Layout& lay) const {
        if (!(use_tf || use_tb || use_sp)) return x;
        TensorT<Real> xn = channel_norm(x);
        TensorT<Real> acc;
        auto run = [&](const SelectiveScanBlock<Real>& block, bool spatial, bool backward) {
            TensorT<Real> yb;
            if (!spatial && !backward) {
                yb = block.forward(xn);  // canonical order is temporal-forward
            } else {
                const scan::DirectionPerms perms =
                    scan::direction_perms(lay, spatial, backward);
                yb = permute_positions(block.forward(permute_positions(xn, perms.fwd)),
                                       perms.inv);
            }
            acc = acc.defined() ? add(acc, yb) : yb;
        };
        if (use_tf) run(tf, false, false);
        if (use_tb) run(tb, false, true);
        if (use_sp) run(sp, true, false);
        return add(x, add_channel(matmul(w_merge, acc), b_merge));
    }

    template <class F>
    void visit_params(const std::string& prefix, F&& f) {
        f(prefix + "ln.g", ln_g);
        f(prefix + "ln.b", ln_b);
        tf.visit_params(prefix + "tf.", f);
        tb.visit_params(prefix + "tb.", f);
        sp.visit_params(prefix + "sp.", f);
        f(prefix + "merge.w", w_merge);
        f(prefix + "merge.b", b_merge);
    }
};

}  // namespace vivim
