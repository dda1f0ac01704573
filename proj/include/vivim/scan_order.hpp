#pragma once

#include "vivim/tensor.hpp"

namespace vivim {
namespace scan {

// A spatiotemporal grid flattened to a sequence. The canonical buffer order
// is temporal-first: position p = t*(H*W) + h*W + w.
struct Layout {
    std::size_t t = 1, h = 1, w = 1;
    std::size_t length() const { return t * h * w; }
    std::size_t spatial() const { return h * w; }
};

using Perm = std::vector<std::size_t>;
using PermPtr = std::shared_ptr<const Perm>;

// Identity: canonical order is already temporal-first.
inline Perm temporal_first_perm(const Layout& lay) {
    Perm p(lay.length());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = i;
    return p;
}

// Sequence position p' = (h*W + w)*T + t reads canonical position
// (p' mod T)*(H*W) + floor(p'/T).
inline Perm spatial_first_perm(const Layout& lay) {
    const std::size_t t = lay.t, m = lay.spatial();
    Perm p(lay.length());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = (i % t) * m + i / t;
    return p;
}

// Block-transpose bijection between the two orders:
// sigma(p) = (p mod M)*T + floor(p/M) maps a temporal-first position to the
// spatial-first position of the same grid element.
inline Perm block_transpose(const Layout& lay) {
    const std::size_t t = lay.t, m = lay.spatial();
    Perm p(lay.length());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = (i % m) * t + i / m;
    return p;
}

inline Perm reversed(const Perm& p) {
    Perm r(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) r[i] = p[p.size() - 1 - i];
    return r;
}

inline Perm inverse(const Perm& p) {
    Perm inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
    return inv;
}

// compose(f, g)[i] = f[g[i]]: gathering by g after gathering by f equals
// gathering by the composition.
inline Perm compose(const Perm& f, const Perm& g) {
    if (f.size() != g.size()) throw ShapeError("compose: size mismatch");
    Perm c(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) c[i] = f[g[i]];
    return c;
}

inline bool is_permutation(const Perm& p) {
    std::vector<bool> seen(p.size(), false);
    for (std::size_t v : p) {
        if (v >= p.size() || seen[v]) return false;
        seen[v] = true;
    }
    return true;
}

// The four scan directions used by the tri-directional layer. Forward
// permutations gather the branch sequence from the canonical buffer; apply
// the inverse afterwards to return to canonical order.
struct DirectionPerms {
    PermPtr fwd;
    PermPtr inv;
};

inline DirectionPerms direction_perms(const Layout& lay, bool spatial, bool backward) {
    Perm base = spatial ? spatial_first_perm(lay) : temporal_first_perm(lay);
    if (backward) base = reversed(base);
    auto fwd = std::make_shared<Perm>(std::move(base));
    auto inv = std::make_shared<Perm>(inverse(*fwd));
    return {fwd, inv};
}

}  // namespace scan

// [T, C, H, W] frames to the canonical channel-major sequence [C, T*H*W].
template <class Real>
TensorT<Real> flatten_sequence(const TensorT<Real>& x) {
    if (x.rank() != 4) throw ShapeError("flatten_sequence: expects [T, C, H, W]");
    const std::size_t t = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    return reshape(permute(x, {1, 0, 2, 3}), Shape{c, t * h * w});
}

// Inverse of flatten_sequence.
template <class Real>
TensorT<Real> unflatten_sequence(const TensorT<Real>& x, const scan::Layout& lay) {
    if (x.rank() != 2) throw ShapeError("unflatten_sequence: expects [C, L]");
    const std::size_t c = x.dim(0);
    if (x.dim(1) != lay.length())
        throw ShapeError(str_cat("unflatten_sequence: length ", x.dim(1), " vs layout ",
                                 lay.length()));
    return permute(reshape(x, Shape{c, lay.t, lay.h, lay.w}), {1, 0, 2, 3});
}

}  // namespace vivim
