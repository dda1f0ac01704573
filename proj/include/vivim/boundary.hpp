#pragma once

// Boundary-aware affine constraint.
//
// Ground-truth edges come from a Sobel magnitude on the binary mask,
// binarized at > 0. Edge extraction uses replicate padding so constant
// masks produce no border response and edges of m equal edges of 1-m.
//
// A small frozen MLP regresses the 2x3 affine transform between a
// predicted edge-probability patch and a ground-truth edge patch. The
// constraint pulls the estimate for the target frame toward identity
// and pushes the estimate against the first frame's edges away from it:
//
//   L = (1/N_p) sum_i (d1*|th_t(i) - I|_F - d2*|th_1(i) - I|_F)
//
// Gradients flow only into the predicted patches; estimator weights are
// detached from the graph once frozen.

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "vivim/net.hpp"
#include "vivim/optim.hpp"
#include "vivim/rng.hpp"
#include "vivim/tensor.hpp"

namespace vivim {

struct LossWeights {
    double delta1 = 1.00;
    double delta2 = 0.01;
    double lambda1 = 0.3;
    double lambda2 = 0.3;
};

// --------------------------------------------------------------------------
// Sobel edges

inline Tensor sobel_edges(const Tensor& mask) {
    if (mask.rank() != 2) throw ShapeError(str_cat("sobel_edges: want [H,W], got ", shape_str(mask.shape())));
    check_binary(mask, "sobel_edges");
    const std::size_t h = mask.shape()[0], w = mask.shape()[1];
    const double* m = mask.data();
    auto at = [&](long r, long c) {
        if (r < 0) r = 0;
        if (c < 0) c = 0;
        if (r >= static_cast<long>(h)) r = static_cast<long>(h) - 1;
        if (c >= static_cast<long>(w)) c = static_cast<long>(w) - 1;
        return m[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
    };
    Tensor out({h, w});
    double* o = out.mut_data();
    for (long r = 0; r < static_cast<long>(h); ++r) {
        for (long c = 0; c < static_cast<long>(w); ++c) {
            const double gx = -at(r - 1, c - 1) + at(r - 1, c + 1) - 2.0 * at(r, c - 1) +
                              2.0 * at(r, c + 1) - at(r + 1, c - 1) + at(r + 1, c + 1);
            const double gy = -at(r - 1, c - 1) - 2.0 * at(r - 1, c) - at(r - 1, c + 1) +
                              at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1);
            o[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] =
                (gx * gx + gy * gy > 0.0) ? 1.0 : 0.0;
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// Synthetic edge patches and affine warps (estimator pretraining corpus)

// Row-major 2x3 coefficients [a, b, tx, c, d, ty] over normalized patch
// coordinates in [-1, 1]: src_x = a*x + b*y + tx, src_y = c*x + d*y + ty.
using AffineParams = std::array<double, 6>;

inline constexpr AffineParams kAffineIdentity = {1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

// Translation |t| <= 0.25*P pixels, rotation <= 20 degrees, scale in
// [0.8, 1.25]. pure_prob forces rotation 0 / scale 1 on a fraction of
// draws so translation-only pairs sit inside the training support.
inline AffineParams random_affine(Rng& rng, std::size_t p, double pure_prob = 0.2) {
    const double deg20 = 20.0 * 3.14159265358979323846 / 180.0;
    double phi = rng.uniform(-deg20, deg20);
    double s = rng.uniform(0.8, 1.25);
    if (rng.uniform() < pure_prob) {
        phi = 0.0;
        s = 1.0;
    }
    const double tpix = 0.25 * static_cast<double>(p);
    const double tx = rng.uniform(-tpix, tpix) * 2.0 / static_cast<double>(p);
    const double ty = rng.uniform(-tpix, tpix) * 2.0 / static_cast<double>(p);
    const double c = s * std::cos(phi), sn = s * std::sin(phi);
    return {c, -sn, tx, sn, c, ty};
}

namespace detail {

inline void draw_line_segment(Rng& rng, double* o, std::size_t p) {
    const double pd = static_cast<double>(p);
    const double cx = rng.uniform(0.2 * pd, 0.8 * pd);
    const double cy = rng.uniform(0.2 * pd, 0.8 * pd);
    const double phi = rng.uniform(0.0, 3.14159265358979323846);
    const double half = rng.uniform(0.25 * pd, 0.6 * pd);
    const double sp = std::sin(phi), cp = std::cos(phi);
    for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) {
            const double x = static_cast<double>(c) + 0.5 - cx;
            const double y = static_cast<double>(r) + 0.5 - cy;
            if (std::abs(x * sp - y * cp) < 0.8 && std::abs(x * cp + y * sp) < half)
                o[r * p + c] = 1.0;
        }
}

inline void draw_arc_segment(Rng& rng, double* o, std::size_t p) {
    const double pd = static_cast<double>(p);
    const double cx = rng.uniform(0.0, pd);
    const double cy = rng.uniform(0.0, pd);
    const double rad = rng.uniform(0.25 * pd, 0.6 * pd);
    for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) {
            const double x = static_cast<double>(c) + 0.5 - cx;
            const double y = static_cast<double>(r) + 0.5 - cy;
            if (std::abs(std::sqrt(x * x + y * y) - rad) < 0.8) o[r * p + c] = 1.0;
        }
}

}  // namespace detail

// One to three line/arc segments. A lone straight line is ambiguous under
// translation along itself, so most patches carry a second segment to make
// the transform identifiable.
inline Tensor random_edge_patch(Rng& rng, std::size_t p) {
    Tensor out({p, p});
    double* o = out.mut_data();
    for (int attempt = 0; attempt < 8; ++attempt) {
        std::fill(o, o + p * p, 0.0);
        std::size_t segs = 1;
        if (rng.uniform() < 0.8) ++segs;
        if (rng.uniform() < 0.3) ++segs;
        for (std::size_t s = 0; s < segs; ++s) {
            if (rng.uniform() < 0.5)
                detail::draw_line_segment(rng, o, p);
            else
                detail::draw_arc_segment(rng, o, p);
        }
        bool any = false;
        for (std::size_t i = 0; i < p * p; ++i)
            if (o[i] != 0.0) {
                any = true;
                break;
            }
        if (any) break;
    }
    return out;
}

// out(p) = src(theta(p)), bilinear, zero outside the patch. Identity
// reproduces the source exactly (samples land on grid points).
inline Tensor warp_patch(const Tensor& src, const AffineParams& th) {
    if (src.rank() != 2 || src.shape()[0] != src.shape()[1])
        throw ShapeError(str_cat("warp_patch: want square [P,P], got ", shape_str(src.shape())));
    const std::size_t p = src.shape()[0];
    const double pd = static_cast<double>(p);
    const double* s = src.data();
    Tensor out({p, p});
    double* o = out.mut_data();
    for (std::size_t r = 0; r < p; ++r) {
        const double y = (2.0 * static_cast<double>(r) + 1.0) / pd - 1.0;
        for (std::size_t c = 0; c < p; ++c) {
            const double x = (2.0 * static_cast<double>(c) + 1.0) / pd - 1.0;
            const double xs = th[0] * x + th[1] * y + th[2];
            const double ys = th[3] * x + th[4] * y + th[5];
            const double cs = (xs + 1.0) * pd / 2.0 - 0.5;
            const double rs = (ys + 1.0) * pd / 2.0 - 0.5;
            const double rf = std::floor(rs), cf = std::floor(cs);
            const double wr = rs - rf, wc = cs - cf;
            double acc = 0.0;
            for (int dr = 0; dr < 2; ++dr)
                for (int dc = 0; dc < 2; ++dc) {
                    const long ri = static_cast<long>(rf) + dr;
                    const long ci = static_cast<long>(cf) + dc;
                    if (ri < 0 || ci < 0 || ri >= static_cast<long>(p) || ci >= static_cast<long>(p)) continue;
                    const double wgt = (dr ? wr : 1.0 - wr) * (dc ? wc : 1.0 - wc);
                    acc += wgt * s[static_cast<std::size_t>(ri) * p + static_cast<std::size_t>(ci)];
                }
            o[r * p + c] = acc;
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// Affine estimator

class AffineEstimator {
  public:
    std::size_t patch = 16;
    std::size_t hidden1 = 128;
    std::size_t hidden2 = 64;
    Tensor w1, b1, w2, b2, w3, b3;

    void init(std::size_t p, Rng& rng) {
        patch = p;
        const std::size_t in = 2 * p * p;
        w1 = Tensor({hidden1, in});
        fill_trunc_normal(w1, rng, 0.02);
        b1 = Tensor::zeros({hidden1});
        w2 = Tensor({hidden2, hidden1});
        fill_trunc_normal(w2, rng, 0.02);
        b2 = Tensor::zeros({hidden2});
        w3 = Tensor::zeros({6, hidden2});
        b3 = Tensor::from_vector({6}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
        for (Tensor* t : {&w1, &b1, &w2, &b2, &w3, &b3}) t->set_requires_grad(true);
        frozen_ = false;
    }

    bool frozen() const { return frozen_; }

    void freeze() {
        for (Tensor* t : {&w1, &b1, &w2, &b2, &w3, &b3}) {
            t->zero_grad();
            t->set_requires_grad(false);
        }
        frozen_ = true;
    }

    void mark_frozen() { frozen_ = true; }  // checkpoint restore path

    // pairs: [2*P*P, B] concatenated (first, second) patch columns -> [6, B]
    Tensor forward(const Tensor& pairs) const {
        if (pairs.rank() != 2 || pairs.shape()[0] != 2 * patch * patch)
            throw ShapeError(str_cat("AffineEstimator: want [", 2 * patch * patch, ",B], got ",
                                     shape_str(pairs.shape())));
        Tensor h1 = silu(add_channel(matmul(w1, pairs), b1));
        Tensor h2 = silu(add_channel(matmul(w2, h1), b2));
        return add_channel(matmul(w3, h2), b3);
    }

    template <class F>
    void visit_params(const std::string& prefix, F&& f) {
        f(prefix + "w1", w1);
        f(prefix + "b1", b1);
        f(prefix + "w2", w2);
        f(prefix + "b2", b2);
        f(prefix + "w3", w3);
        f(prefix + "b3", b3);
    }

  private:
    bool frozen_ = false;
};

// Synthetic-warp pretraining: random line/arc patches warped by random
// affines, two-hidden-layer regressor, MSE to the true coefficients.
// A quarter of the pairs are exact identity and a further fifth shrink
// their warp toward identity; both anchor estimator(x, x) = I, which is
// the operating point the constraint loss pulls predictions toward. Half
// the source patches are scaled below 1 so probability-valued inputs sit
// inside the training distribution. The learning rate decays
// geometrically by 10x across the run.
inline AffineEstimator pretrain_affine_estimator(std::uint64_t seed, std::size_t steps,
                                                 std::size_t p = 16, std::size_t batch = 96,
                                                 double lr = 1e-3) {
    Rng rng(seed);
    AffineEstimator est;
    est.init(p, rng);
    Adam opt;
    est.visit_params("", [&](const std::string&, Tensor& t) { opt.add_param(t); });
    const std::size_t in = 2 * p * p;
    for (std::size_t step = 0; step < steps; ++step) {
        Tensor x({in, batch});
        Tensor target({6, batch});
        double* xd = x.mut_data();
        double* td = target.mut_data();
        for (std::size_t j = 0; j < batch; ++j) {
            const bool ident = rng.uniform() < 0.25;
            const bool soft = rng.uniform() < 0.5;
            Tensor a = random_edge_patch(rng, p);
            AffineParams th = ident ? kAffineIdentity : random_affine(rng, p);
            if (!ident && rng.uniform() < 0.2) {
                const double lam = rng.uniform(0.0, 0.3);
                for (std::size_t i = 0; i < 6; ++i)
                    th[i] = kAffineIdentity[i] + lam * (th[i] - kAffineIdentity[i]);
            }
            Tensor b = warp_patch(a, th);
            const double gamma = soft ? rng.uniform(0.5, 1.0) : 1.0;
            for (std::size_t i = 0; i < p * p; ++i) {
                xd[i * batch + j] = gamma * a.data()[i];
                xd[(p * p + i) * batch + j] = b.data()[i];
            }
            for (std::size_t i = 0; i < 6; ++i) td[i * batch + j] = th[i];
        }
        Tensor diff = sub(est.forward(x), target);
        Tensor loss = mean_all(mul(diff, diff));
        const double lv = loss.item();
        if (!std::isfinite(lv)) throw NumericError("pretrain_affine_estimator: non-finite loss");
        opt.zero_grad();
        loss.backward();
        const double t01 = steps > 1 ? static_cast<double>(step) / static_cast<double>(steps - 1)
                                     : 0.0;
        opt.step(lr * std::pow(0.1, t01));
    }
    est.freeze();
    return est;
}

// --------------------------------------------------------------------------
// Constraint loss

struct BoundaryPatchPair {
    Tensor pred;  // [P,P] edge probability, in graph
    Tensor gt_t;  // [P,P] binary, target frame
    Tensor gt_1;  // [P,P] binary, first frame
};

// Non-overlapping row-major tiling; N_p = (H/P)*(W/P).
inline std::vector<BoundaryPatchPair> tile_boundary_patches(const Tensor& pred, const Tensor& gt_t,
                                                            const Tensor& gt_1, std::size_t p) {
    if (pred.rank() != 2) throw ShapeError(str_cat("tile_boundary_patches: want [H,W], got ", shape_str(pred.shape())));
    check_same_shape(pred, gt_t, "tile_boundary_patches");
    check_same_shape(pred, gt_1, "tile_boundary_patches");
    const std::size_t h = pred.shape()[0], w = pred.shape()[1];
    if (p == 0 || h % p != 0 || w % p != 0)
        throw ShapeError(str_cat("tile_boundary_patches: ", h, "x", w, " not tiled by P=", p));
    std::vector<BoundaryPatchPair> out;
    out.reserve((h / p) * (w / p));
    for (std::size_t by = 0; by < h / p; ++by)
        for (std::size_t bx = 0; bx < w / p; ++bx) {
            BoundaryPatchPair pair;
            pair.pred = slice(slice(pred, 0, by * p, p), 1, bx * p, p);
            pair.gt_t = slice(slice(gt_t, 0, by * p, p), 1, bx * p, p);
            pair.gt_1 = slice(slice(gt_1, 0, by * p, p), 1, bx * p, p);
            out.push_back(std::move(pair));
        }
    return out;
}

// Column-wise Frobenius distance to the 2x3 identity: [6,B] -> [1,B].
inline Tensor affine_identity_distance(const Tensor& theta) {
    if (theta.rank() != 2 || theta.shape()[0] != 6)
        throw ShapeError(str_cat("affine_identity_distance: want [6,B], got ", shape_str(theta.shape())));
    Tensor neg_iota = Tensor::from_vector({6}, {-1.0, 0.0, 0.0, 0.0, -1.0, 0.0});
    Tensor d = add_channel(theta, neg_iota);
    Tensor ones = Tensor::full({1, 6}, 1.0);
    return sqrt(matmul(ones, mul(d, d)));
}

inline Tensor affine_constraint_from_estimates(const Tensor& theta_t, const Tensor& theta_1,
                                               const LossWeights& w) {
    Tensor dist_t = mean_all(affine_identity_distance(theta_t));
    Tensor dist_1 = mean_all(affine_identity_distance(theta_1));
    return add(mul_scalar(dist_t, w.delta1), mul_scalar(dist_1, -w.delta2));
}

inline Tensor affine_constraint_loss(const std::vector<BoundaryPatchPair>& pairs,
                                     const AffineEstimator& est, const LossWeights& w) {
    if (pairs.empty()) throw Error("affine_constraint_loss: empty pair list");
    if (!est.frozen()) throw Error("affine_constraint_loss: estimator not frozen");
    const std::size_t p = est.patch;
    const std::size_t np = pairs.size();
    std::vector<Tensor> cols_t, cols_1;
    cols_t.reserve(np);
    cols_1.reserve(np);
    for (const auto& pair : pairs) {
        if (pair.pred.rank() != 2 || pair.pred.shape()[0] != p || pair.pred.shape()[1] != p)
            throw ShapeError(str_cat("affine_constraint_loss: want [", p, ",", p, "] patches, got ",
                                     shape_str(pair.pred.shape())));
        Tensor pv = reshape(pair.pred, {p * p, 1});
        cols_t.push_back(concat(std::vector<Tensor>{pv, reshape(pair.gt_t, {p * p, 1})}, 0));
        cols_1.push_back(concat(std::vector<Tensor>{pv, reshape(pair.gt_1, {p * p, 1})}, 0));
    }
    Tensor theta_t = est.forward(np == 1 ? cols_t[0] : concat(cols_t, 1));
    Tensor theta_1 = est.forward(np == 1 ? cols_1[0] : concat(cols_1, 1));
    return affine_constraint_from_estimates(theta_t, theta_1, w);
}

// --------------------------------------------------------------------------
// Total loss

struct LossBreakdown {
    Tensor total;
    Tensor seg;
    Tensor affine;  // undefined when the constraint is disabled
    Tensor bce;     // undefined when no boundary logits are given
};

// total = seg + lambda1*affine + lambda2*bce over the target frame's
// boundary map. A zero lambda leaves its term out of the graph entirely,
// so lambda1 = lambda2 = 0 returns the seg node itself.
inline LossBreakdown total_loss(const Tensor& seg, const Tensor& affine,
                                const Tensor& boundary_logits_t, const Tensor& gt_edges_t,
                                const LossWeights& w) {
    LossBreakdown out;
    out.seg = seg;
    out.affine = affine;
    if (boundary_logits_t.defined()) {
        Tensor logits = boundary_logits_t.rank() == 2
                            ? boundary_logits_t
                            : reshape(boundary_logits_t, gt_edges_t.shape());
        out.bce = bce_from_logits_mean(logits, gt_edges_t);
    }
    auto check_finite = [](const Tensor& t, const char* what) {
        if (t.defined() && !std::isfinite(t.item()))
            throw NumericError(str_cat("total_loss: non-finite ", what));
    };
    check_finite(seg, "seg term");
    check_finite(affine, "affine term");
    check_finite(out.bce, "bce term");
    Tensor total = seg;
    if (w.lambda1 != 0.0) {
        if (!affine.defined()) throw Error("total_loss: lambda1 != 0 needs an affine term");
        total = add(total, mul_scalar(affine, w.lambda1));
    }
    if (w.lambda2 != 0.0) {
        if (!out.bce.defined()) throw Error("total_loss: lambda2 != 0 needs boundary logits");
        total = add(total, mul_scalar(out.bce, w.lambda2));
    }
    out.total = total;
    return out;
}

}  // namespace vivim
