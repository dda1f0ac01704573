#pragma once

#include "vivim/tensor.hpp"

namespace vivim {

namespace detail {

// Unfolds one [C x H x W] image into a [C*kh*kw, Ho*Wo] patch matrix with
// zero padding, so convolution becomes a single GEMM.
template <class Real>
void im2col(const Real* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho,
            std::size_t wo, Real* col) {
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                Real* row = col + ((ch * kh + ki) * kw + kj) * (ho * wo);
                for (std::size_t oh = 0; oh < ho; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * stride + ki) -
                        static_cast<std::ptrdiff_t>(pad);
                    Real* out = row + oh * wo;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
                        for (std::size_t ow = 0; ow < wo; ++ow) out[ow] = Real(0);
                        continue;
                    }
                    const Real* xr = x + (ch * h + static_cast<std::size_t>(ih)) * w;
                    for (std::size_t ow = 0; ow < wo; ++ow) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
                        out[ow] = (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w))
                                      ? xr[static_cast<std::size_t>(iw)]
                                      : Real(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds the patch matrix back into the image.
template <class Real>
void col2im_add(const Real* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho,
                std::size_t wo, Real* x) {
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const Real* row = col + ((ch * kh + ki) * kw + kj) * (ho * wo);
                for (std::size_t oh = 0; oh < ho; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * stride + ki) -
                        static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                    Real* xr = x + (ch * h + static_cast<std::size_t>(ih)) * w;
                    const Real* in = row + oh * wo;
                    for (std::size_t ow = 0; ow < wo; ++ow) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w))
                            xr[static_cast<std::size_t>(iw)] += in[ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Strided 2-D convolution with zero padding and channel groups.
//   x: [N, Cin, H, W], w: [Cout, Cin/groups, kh, kw], bias: [Cout] or undefined.
// Patch matrices are rebuilt in the backward pass instead of being saved.
template <class Real>
TensorT<Real> conv2d(const TensorT<Real>& x, const TensorT<Real>& w, const TensorT<Real>& bias,
                     std::size_t stride, std::size_t pad, std::size_t groups = 1) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError(str_cat("conv2d: x ", shape_str(x.shape()), ", w ",
                                 shape_str(w.shape())));
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t cout = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (groups == 0 || cin % groups != 0 || cout % groups != 0 || cg != cin / groups)
        throw ShapeError(str_cat("conv2d: ", cin, " channels, ", groups, " groups, kernel ",
                                 shape_str(w.shape())));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        throw ShapeError("conv2d: bias shape");
    if (h + 2 * pad < kh || wd + 2 * pad < kw) throw ShapeError("conv2d: kernel exceeds input");
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
    const std::size_t coutg = cout / groups;
    const std::size_t krows = cg * kh * kw;

    TensorT<Real> out(Shape{n, cout, ho, wo});
    {
        detail::TrackedBuffer<Real> col(krows * ho * wo);
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t g = 0; g < groups; ++g) {
                const Real* xg = x.data() + (b * cin + g * cg) * h * wd;
                detail::im2col(xg, cg, h, wd, kh, kw, stride, pad, ho, wo, col.data());
                Real* og = out.mut_data() + (b * cout + g * coutg) * ho * wo;
                detail::gemm_nn(coutg, ho * wo, krows, w.data() + g * coutg * krows,
                                col.data(), og);
            }
        }
        if (bias.defined()) {
            Real* po = out.mut_data();
            const Real* pb = bias.data();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t co = 0; co < cout; ++co) {
                    Real* p = po + (b * cout + co) * ho * wo;
                    const Real bv = pb[co];
                    for (std::size_t i = 0; i < ho * wo; ++i) p[i] += bv;
                }
        }
    }

    const bool track = bias.defined()
                           ? detail::any_in_graph<Real>({&x, &w, &bias})
                           : detail::any_in_graph<Real>({&x, &w});
    if (track) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ix = x.impl(), iw = w.impl();
        std::shared_ptr<TensorImpl<Real>> ib = bias.defined() ? bias.impl() : nullptr;
        if (ix->in_graph()) parents.push_back(ix);
        if (iw->in_graph()) parents.push_back(iw);
        if (ib && ib->in_graph()) parents.push_back(ib);
        detail::attach_node(
            out, parents,
            [ix, iw, ib, n, cin, h, wd, cout, cg, kh, kw, stride, pad, groups, ho, wo, coutg,
             krows](TensorImpl<Real>& self) {
                const Real* gout = self.grad.data();
                detail::TrackedBuffer<Real> col(krows * ho * wo);
                detail::TrackedBuffer<Real> gcol(krows * ho * wo);
                for (std::size_t b = 0; b < n; ++b) {
                    for (std::size_t g = 0; g < groups; ++g) {
                        const Real* gg = gout + (b * cout + g * coutg) * ho * wo;
                        if (iw->in_graph() || ix->in_graph())
                            detail::im2col(ix->data.data() + (b * cin + g * cg) * h * wd, cg, h,
                                           wd, kh, kw, stride, pad, ho, wo, col.data());
                        if (iw->in_graph()) {
                            iw->ensure_grad();
                            // dW += G * col^T
                            detail::gemm_nt(coutg, krows, ho * wo, gg, col.data(),
                                            iw->grad.data() + g * coutg * krows);
                        }
                        if (ix->in_graph()) {
                            ix->ensure_grad();
                            std::fill(gcol.data(), gcol.data() + gcol.size(), Real(0));
                            // dcol = W^T * G, scattered back onto the image
                            detail::gemm_tn(krows, ho * wo, coutg,
                                            iw->data.data() + g * coutg * krows, gg,
                                            gcol.data());
                            detail::col2im_add(gcol.data(), cg, h, wd, kh, kw, stride, pad, ho,
                                               wo,
                                               ix->grad.data() + (b * cin + g * cg) * h * wd);
                        }
                    }
                }
                if (ib && ib->in_graph()) {
                    ib->ensure_grad();
                    Real* gb = ib->grad.data();
                    for (std::size_t b = 0; b < n; ++b)
                        for (std::size_t co = 0; co < cout; ++co) {
                            const Real* p = gout + (b * cout + co) * ho * wo;
                            Real acc = Real(0);
                            for (std::size_t i = 0; i < ho * wo; ++i) acc += p[i];
                            gb[co] += acc;
                        }
                }
            },
            "conv2d");
    }
    return out;
}

template <class Real>
TensorT<Real> conv2d(const TensorT<Real>& x, const TensorT<Real>& w, std::size_t stride,
                     std::size_t pad, std::size_t groups = 1) {
    return conv2d(x, w, TensorT<Real>(), stride, pad, groups);
}

// Depthwise 3x3x3 convolution over [C, T, H, W] with zero padding 1 on every
// spatiotemporal axis, stride 1, no bias. Each channel has its own kernel.
template <class Real>
TensorT<Real> conv3d_depthwise(const TensorT<Real>& x, const TensorT<Real>& k) {
    if (x.rank() != 4) throw ShapeError("conv3d_depthwise: x must be [C, T, H, W]");
    const std::size_t c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k.rank() != 4 || k.dim(0) != c || k.dim(1) != 3 || k.dim(2) != 3 || k.dim(3) != 3)
        throw ShapeError(str_cat("conv3d_depthwise: kernel must be [", c, ", 3, 3, 3], got ",
                                 shape_str(k.shape())));
    TensorT<Real> out(x.shape());
    const Real* px = x.data();
    const Real* pk = k.data();
    Real* po = out.mut_data();
    const std::size_t hw = h * w;
    const std::size_t thw = t * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const Real* xc = px + ch * thw;
        const Real* kc = pk + ch * 27;
        Real* oc = po + ch * thw;
        for (std::size_t ot = 0; ot < t; ++ot)
            for (std::size_t oh = 0; oh < h; ++oh)
                for (std::size_t ow = 0; ow < w; ++ow) {
                    Real acc = Real(0);
                    for (std::size_t a = 0; a < 3; ++a) {
                        const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(ot + a) - 1;
                        if (it < 0 || it >= static_cast<std::ptrdiff_t>(t)) continue;
                        for (std::size_t b = 0; b < 3; ++b) {
                            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + b) - 1;
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                            const Real* xr = xc + static_cast<std::size_t>(it) * hw +
                                             static_cast<std::size_t>(ih) * w;
                            const Real* kr = kc + (a * 3 + b) * 3;
                            for (std::size_t d = 0; d < 3; ++d) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow + d) - 1;
                                if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(w))
                                    acc += kr[d] * xr[static_cast<std::size_t>(iw)];
                            }
                        }
                    }
                    oc[(ot * h + oh) * w + ow] = acc;
                }
    }
    if (detail::any_in_graph<Real>({&x, &k})) {
        std::vector<std::shared_ptr<TensorImpl<Real>>> parents;
        auto ix = x.impl(), ik = k.impl();
        if (ix->in_graph()) parents.push_back(ix);
        if (ik->in_graph()) parents.push_back(ik);
        detail::attach_node(
            out, parents,
            [ix, ik, c, t, h, w, hw, thw](TensorImpl<Real>& self) {
                const Real* gout = self.grad.data();
                const Real* px = ix->data.data();
                const Real* pk = ik->data.data();
                Real* gx = nullptr;
                Real* gk = nullptr;
                if (ix->in_graph()) {
                    ix->ensure_grad();
                    gx = ix->grad.data();
                }
                if (ik->in_graph()) {
                    ik->ensure_grad();
                    gk = ik->grad.data();
                }
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const Real* xc = px + ch * thw;
                    const Real* kc = pk + ch * 27;
                    const Real* gc = gout + ch * thw;
                    for (std::size_t ot = 0; ot < t; ++ot)
                        for (std::size_t oh = 0; oh < h; ++oh)
                            for (std::size_t ow = 0; ow < w; ++ow) {
                                const Real go = gc[(ot * h + oh) * w + ow];
                                if (go == Real(0)) continue;
                                for (std::size_t a = 0; a < 3; ++a) {
                                    const std::ptrdiff_t it =
                                        static_cast<std::ptrdiff_t>(ot + a) - 1;
                                    if (it < 0 || it >= static_cast<std::ptrdiff_t>(t))
                                        continue;
                                    for (std::size_t b = 0; b < 3; ++b) {
                                        const std::ptrdiff_t ih =
                                            static_cast<std::ptrdiff_t>(oh + b) - 1;
                                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h))
                                            continue;
                                        const std::size_t base =
                                            static_cast<std::size_t>(it) * hw +
                                            static_cast<std::size_t>(ih) * w;
                                        for (std::size_t d = 0; d < 3; ++d) {
                                            const std::ptrdiff_t iw =
                                                static_cast<std::ptrdiff_t>(ow + d) - 1;
                                            if (iw < 0 ||
                                                iw >= static_cast<std::ptrdiff_t>(w))
                                                continue;
                                            const std::size_t xi =
                                                base + static_cast<std::size_t>(iw);
                                            const std::size_t kidx = (a * 3 + b) * 3 + d;
                                            if (gx) gx[ch * thw + xi] += go * kc[kidx];
                                            if (gk) gk[ch * 27 + kidx] += go * xc[xi];
                                        }
                                    }
                                }
                            }
                }
            },
            "conv3d_depthwise");
    }
    return out;
}

// Bilinear upsampling of [N, C, H, W] by an integer factor, half-pixel
// centre convention: src = (dst + 0.5) / factor - 0.5, clamped at the edges.
template <class Real>
TensorT<Real> bilinear_upsample2d(const TensorT<Real>& x, std::size_t factor) {
    if (x.rank() != 4) throw ShapeError("bilinear_upsample2d: x must be [N, C, H, W]");
    if (factor == 0) throw ShapeError("bilinear_upsample2d: factor must be positive");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = h * factor, wo = w * factor;

    // Per-axis source indices and weights, shared across batch and channels.
    auto make_axis = [factor](std::size_t in, std::size_t out) {
        std::vector<std::size_t> i0(out), i1(out);
        std::vector<Real> w1(out);
        for (std::size_t o = 0; o < out; ++o) {
            const double src =
                (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
            double f = std::floor(src);
            double frac = src - f;
            std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(f);
            if (lo < 0) {
                lo = 0;
                frac = 0.0;
            }
            if (lo >= static_cast<std::ptrdiff_t>(in) - 1) {
                lo = static_cast<std::ptrdiff_t>(in) - 1;
                frac = 0.0;
            }
            i0[o] = static_cast<std::size_t>(lo);
            i1[o] = std::min(i0[o] + 1, in - 1);
            w1[o] = Real(frac);
        }
        return std::make_tuple(i0, i1, w1);
    };
    auto [hi0, hi1, hw1] = make_axis(h, ho);
    auto [wi0, wi1, ww1] = make_axis(w, wo);

    TensorT<Real> out(Shape{n, c, ho, wo});
    const Real* px = x.data();
    Real* po = out.mut_data();
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const Real* xp = px + nc * h * w;
        Real* op = po + nc * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
            const Real* r0 = xp + hi0[oh] * w;
            const Real* r1 = xp + hi1[oh] * w;
            const Real fh = hw1[oh];
            Real* orow = op + oh * wo;
            for (std::size_t ow = 0; ow < wo; ++ow) {
                const Real fw = ww1[ow];
                const Real top = r0[wi0[ow]] * (Real(1) - fw) + r0[wi1[ow]] * fw;
                const Real bot = r1[wi0[ow]] * (Real(1) - fw) + r1[wi1[ow]] * fw;
                orow[ow] = top * (Real(1) - fh) + bot * fh;
            }
        }
    }
    if (detail::any_in_graph<Real>({&x})) {
        auto ix = x.impl();
        detail::attach_node(
            out, {ix},
            [ix, n, c, h, w, ho, wo, hi0, hi1, hw1, wi0, wi1, ww1](TensorImpl<Real>& self) {
                ix->ensure_grad();
                Real* gx = ix->grad.data();
                const Real* s = self.grad.data();
                for (std::size_t nc = 0; nc < n * c; ++nc) {
                    Real* gp = gx + nc * h * w;
                    const Real* sp = s + nc * ho * wo;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const Real fh = hw1[oh];
                        Real* g0 = gp + hi0[oh] * w;
                        Real* g1 = gp + hi1[oh] * w;
                        const Real* srow = sp + oh * wo;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const Real fw = ww1[ow];
                            const Real g = srow[ow];
                            g0[wi0[ow]] += g * (Real(1) - fh) * (Real(1) - fw);
                            g0[wi1[ow]] += g * (Real(1) - fh) * fw;
                            g1[wi0[ow]] += g * fh * (Real(1) - fw);
                            g1[wi1[ow]] += g * fh * fw;
                        }
                    }
                }
            },
            "bilinear_upsample2d");
    }
    return out;
}

}  // namespace vivim
