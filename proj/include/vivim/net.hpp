#pragma once

#include <array>

#include "vivim/image_ops.hpp"
#include "vivim/scan_order.hpp"
#include "vivim/ssm.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Architecture configuration. Four encoder stages at 1/4, 1/8, 1/16, 1/32 of
// the input resolution; per-stage channel widths, Mamba-layer depth,
// attention reduction ratios and head counts; decoder width; scan-direction
// toggles shared by every layer.
// ---------------------------------------------------------------------------
struct VivimConfig {
    std::size_t frames = 5;
    std::size_t height = 64;
    std::size_t width = 64;
    std::array<std::size_t, 4> channels = {32, 64, 160, 256};
    std::array<std::size_t, 4> n_mamba = {2, 2, 2, 2};
    std::array<std::size_t, 4> reduction = {8, 4, 2, 1};
    std::array<std::size_t, 4> heads = {1, 2, 5, 8};
    std::size_t n_state = 16;
    std::size_t c_dec = 128;
    bool scan_tf = true;
    bool scan_tb = true;
    bool scan_sp = true;
    bool boundary_head = true;

    void validate() const {
        if (height % 32 != 0 || width % 32 != 0)
            throw ShapeError(str_cat("config: input ", height, "x", width,
                                     " must be divisible by 32"));
        if (frames == 0) throw ShapeError("config: frames must be positive");
        for (std::size_t i = 0; i < 4; ++i) {
            if (channels[i] == 0 || channels[i] % heads[i] != 0)
                throw ShapeError(str_cat("config: stage ", i + 1, " channels ", channels[i],
                                         " not divisible by ", heads[i], " heads"));
            if (i > 0 && channels[i] <= channels[i - 1])
                throw ShapeError("config: channels must be strictly increasing");
            const std::size_t hs = height >> (i + 2), ws = width >> (i + 2);
            if (reduction[i] == 0 || (hs * ws) % (reduction[i] * reduction[i]) != 0)
                throw ShapeError(str_cat("config: stage ", i + 1, " grid ", hs, "x", ws,
                                         " not divisible by reduction ", reduction[i], "^2"));
        }
        if (channels[0] % 4 != 0 && channels[0] >= 4)
            throw ShapeError("config: stage-1 channels must be divisible by 4");
    }
};

// ---------------------------------------------------------------------------
// Per-frame multi-head self-attention with spatially reduced keys/values.
// Output projection starts at zero, so the module begins as the identity.
// ---------------------------------------------------------------------------
struct SpatialAttention {
    std::size_t dim = 0, heads = 1, red = 1;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor wr, br;  // RxR strided reduction (present when red > 1)

    void init(std::size_t d, std::size_t h, std::size_t r, Rng& rng) {
        dim = d;
        heads = h;
        red = r;
        const double s = 0.02;
        wq = Tensor({d, d});
        fill_trunc_normal(wq, rng, s);
        bq = Tensor({d});
        wk = Tensor({d, d});
        fill_trunc_normal(wk, rng, s);
        bk = Tensor({d});
        wv = Tensor({d, d});
        fill_trunc_normal(wv, rng, s);
        bv = Tensor({d});
        wo = Tensor({d, d});  // zero: residual identity at init
        bo = Tensor({d});
        if (red > 1) {
            wr = Tensor({d, d, red, red});
            fill_trunc_normal(wr, rng, s);
            br = Tensor({d});
        }
    }

    // x: [T, C, H, W] -> same shape, residual included.
    Tensor forward(const Tensor& x) const {
        const std::size_t t = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        if (c != dim) throw ShapeError("attention: channel mismatch");
        if ((h * w) % (red * red) != 0)
            throw ShapeError(str_cat("attention: ", h, "x", w, " not divisible by ", red, "^2"));
        const std::size_t dh = dim / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> frames_out;
        frames_out.reserve(t);
        for (std::size_t f = 0; f < t; ++f) {
            Tensor xf = slice(x, 0, f, 1);                    // [1, C, H, W]
            Tensor tok = reshape(xf, {c, h * w});             // [C, M]
            Tensor kv_tok = tok;
            if (red > 1)
                kv_tok = reshape(conv2d(xf, wr, br, red, 0), {c, (h / red) * (w / red)});
            Tensor q = add_channel(matmul(wq, tok), bq);      // [C, M]
            Tensor k = add_channel(matmul(wk, kv_tok), bk);   // [C, Mr]
            Tensor v = add_channel(matmul(wv, kv_tok), bv);
            std::vector<Tensor> head_out;
            head_out.reserve(heads);
            for (std::size_t hd = 0; hd < heads; ++hd) {
                Tensor qh = slice(q, 0, hd * dh, dh);
                Tensor kh = slice(k, 0, hd * dh, dh);
                Tensor vh = slice(v, 0, hd * dh, dh);
                Tensor scores = mul_scalar(matmul(permute(qh, {1, 0}), kh), scale);
                Tensor att = softmax_last(scores);            // [M, Mr]
                head_out.push_back(matmul(vh, permute(att, {1, 0})));  // [dh, M]
            }
            Tensor merged = heads == 1 ? head_out[0] : concat(head_out, 0);
            Tensor of = add_channel(matmul(wo, merged), bo);  // [C, M]
            frames_out.push_back(reshape(of, {1, c, h, w}));
        }
        Tensor update = t == 1 ? frames_out[0] : concat(frames_out, 0);
        return add(x, update);
    }

    template <class F>
    void visit_params(const std::string& p, F&& f) {
        f(p + "wq", wq);
        f(p + "bq", bq);
        f(p + "wk", wk);
        f(p + "bk", bk);
        f(p + "wv", wv);
        f(p + "bv", bv);
        f(p + "wo", wo);
        f(p + "bo", bo);
        if (red > 1) {
            f(p + "wr", wr);
            f(p + "br", br);
        }
    }
};

// ---------------------------------------------------------------------------
// Mix-feedforward: pointwise expand x4, depthwise 3x3 2-D conv per frame,
// SiLU, pointwise contract. Contraction starts at zero. Residual included.
// ---------------------------------------------------------------------------
struct MixFfn {
    std::size_t dim = 0, hidden = 0;
    Tensor w1, b1;    // [4C, C]
    Tensor kdw, bdw;  // depthwise [4C, 1, 3, 3]
    Tensor w2, b2;    // [C, 4C], zero

    void init(std::size_t d, Rng& rng) {
        dim = d;
        hidden = 4 * d;
        w1 = Tensor({hidden, dim});
        fill_trunc_normal(w1, rng, 0.02);
        b1 = Tensor({hidden});
        kdw = Tensor({hidden, 1, 3, 3});
        fill_trunc_normal(kdw, rng, 0.02);
        bdw = Tensor({hidden});
        w2 = Tensor({dim, hidden});
        b2 = Tensor({dim});
    }

    // x: [T, C, H, W] -> same shape.
    Tensor forward(const Tensor& x) const {
        const std::size_t t = x.dim(0), h = x.dim(2), w = x.dim(3);
        const scan::Layout lay{t, h, w};
        Tensor xc = flatten_sequence(x);                       // [C, L]
        Tensor up = add_channel(matmul(w1, xc), b1);           // [4C, L]
        Tensor up4 = unflatten_sequence(up, lay);              // [T, 4C, H, W]
        Tensor conv = conv2d(up4, kdw, bdw, 1, 1, hidden);
        Tensor act = flatten_sequence(silu(conv));
        Tensor down = add_channel(matmul(w2, act), b2);        // [C, L]
        return add(x, unflatten_sequence(down, lay));
    }

    template <class F>
    void visit_params(const std::string& p, F&& f) {
        f(p + "w1", w1);
        f(p + "b1", b1);
        f(p + "kdw", kdw);
        f(p + "bdw", bdw);
        f(p + "w2", w2);
        f(p + "b2", b2);
    }
};

// ---------------------------------------------------------------------------
// Detail-specific feedforward: pointwise expand x4, depthwise 3x3x3 conv
// over the T/H/W grid, SiLU, pointwise contract (zero-initialised).
// Residual is applied by the caller.
// ---------------------------------------------------------------------------
struct Dsf {
    std::size_t dim = 0, hidden = 0;
    Tensor w1, b1;  // [4C, C]
    Tensor kdw;     // [4C, 3, 3, 3]
    Tensor w2, b2;  // [C, 4C], zero

    void init(std::size_t d, Rng& rng) {
        dim = d;
        hidden = 4 * d;
        w1 = Tensor({hidden, dim});
        fill_trunc_normal(w1, rng, 0.02);
        b1 = Tensor({hidden});
        kdw = Tensor({hidden, 3, 3, 3});
        fill_trunc_normal(kdw, rng, 0.02);
        w2 = Tensor({dim, hidden});
        b2 = Tensor({dim});
    }

    // h: [C, L] canonical -> [C, L]. The canonical buffer is already
    // [C, T, H, W] in row-major order, so only reshapes are needed.
    Tensor forward(const Tensor& h, const scan::Layout& lay) const {
        Tensor up = add_channel(matmul(w1, h), b1);  // [4C, L]
        Tensor grid = reshape(up, {hidden, lay.t, lay.h, lay.w});
        Tensor conv = silu(conv3d_depthwise(grid, kdw));
        Tensor flat = reshape(conv, {hidden, lay.length()});
        return add_channel(matmul(w2, flat), b2);
    }

    template <class F>
    void visit_params(const std::string& p, F&& f) {
        f(p + "w1", w1);
        f(p + "b1", b1);
        f(p + "kdw", kdw);
        f(p + "w2", w2);
        f(p + "b2", b2);
    }
};

// One stacked Mamba layer: tri-directional scan sub-layer, then DSF
// sub-layer, each pre-normed with its own residual.
struct MambaLayer {
    TriScanLayer<double> scan;
    Tensor ln2_g, ln2_b;
    Dsf dsf;

    void init(std::size_t d, std::size_t n_state, bool tf, bool tb, bool sp, Rng& rng) {
        scan.init(d, n_state, rng);
        scan.use_tf = tf;
        scan.use_tb = tb;
        scan.use_sp = sp;
        ln2_g = Tensor::full({d}, 1.0);
        ln2_b = Tensor({d});
        dsf.init(d, rng);
    }

    Tensor forward(const Tensor& h, const scan::Layout& lay) const {
        // No scan directions means no ST-Mamba sub-block at all; the stage
        // reduces to its attention/feedforward half.
        if (!(scan.use_tf || scan.use_tb || scan.use_sp)) return h;
        Tensor h1 = scan.forward(h, lay);
        return add(h1, dsf.forward(channel_layer_norm(h1, ln2_g, ln2_b), lay));
    }

    template <class F>
    void visit_params(const std::string& p, F&& f) {
        scan.visit_params(p + "scan.", f);
        f(p + "ln2.g", ln2_g);
        f(p + "ln2.b", ln2_b);
        dsf.visit_params(p + "dsf.", f);
    }
};

// ---------------------------------------------------------------------------
// One encoder stage: overlapped patch embed (stage 1, kernel 7 stride 4) or
// patch merge (kernel 3 stride 2), layer norm, spatial attention + Mix-FFN,
// then the stack of Mamba layers.
// ---------------------------------------------------------------------------
struct EncoderStage {
    bool first = false;
    std::size_t in_ch = 0, out_ch = 0;
    Tensor patch_w, patch_b;
    Tensor pln_g, pln_b;
    SpatialAttention attn;
    MixFfn ffn;
    std::vector<MambaLayer> layers;

    void init(bool is_first, std::size_t cin, std::size_t cout, std::size_t n_layers,
              std::size_t heads, std::size_t red, std::size_t n_state, bool tf, bool tb,
              bool sp, Rng& rng) {
        first = is_first;
        in_ch = cin;
        out_ch = cout;
        const std::size_t k = first ? 7 : 3;
        patch_w = Tensor({cout, cin, k, k});
        fill_trunc_normal(patch_w, rng, 0.02);
        patch_b = Tensor({cout});
        pln_g = Tensor::full({cout}, 1.0);
        pln_b = Tensor({cout});
        attn.init(cout, heads, red, rng);
        ffn.init(cout, rng);
        layers.resize(n_layers);
        for (auto& l : layers) l.init(cout, n_state, tf, tb, sp, rng);
    }

    Tensor forward(const Tensor& x) const {
        Tensor e = first ? conv2d(x, patch_w, patch_b, 4, 3)
                         : conv2d(x, patch_w, patch_b, 2, 1);
        const scan::Layout lay{e.dim(0), e.dim(2), e.dim(3)};
        Tensor ec = channel_layer_norm(flatten_sequence(e), pln_g, pln_b);
        Tensor a = ffn.forward(attn.forward(unflatten_sequence(ec, lay)));
        Tensor hc = flatten_sequence(a);
        for (const auto& l : layers) hc = l.forward(hc, lay);
        return unflatten_sequence(hc, lay);
    }

    template <class F>
    void visit_params(const std::string& p, F&& f) {
        f(p + "patch.w", patch_w);
        f(p + "patch.b", patch_b);
        f(p + "pln.g", pln_g);
        f(p + "pln.b", pln_b);
        attn.visit_params(p + "attn.", f);
        ffn.visit_params(p + "ffn.", f);
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].visit_params(p + "layer" + std::to_string(i) + ".", f);
    }
};

using FeaturePyramid = std::array<Tensor, 4>;

// ---------------------------------------------------------------------------
// Decoder: per-level pointwise projection to a common width, bilinear
// upsample of levels 2-4 to the 1/4 grid, concatenation, pointwise fusion,
// SiLU, 1x1 prediction, bilinear upsample x4 to the input resolution.
// ---------------------------------------------------------------------------
struct Decoder {
    std::size_t c_dec = 0;
    std::array<Tensor, 4> proj_w, proj_b;
    Tensor fuse_w, fuse_b;  // [C_dec, 4*C_dec]
    Tensor out_w, out_b;    // [1, C_dec]

    void init(const std::array<std::size_t, 4>& channels, std::size_t cd, Rng& rng) {
        c_dec = cd;
        for (std::size_t i = 0; i < 4; ++i) {
            proj_w[i] = Tensor({cd, channels[i]});
            fill_trunc_normal(proj_w[i], rng, 0.02);
            proj_b[i] = Tensor({cd});
        }
        fuse_w = Tensor({cd, 4 * cd});
        fill_trunc_normal(fuse_w, rng, 0.02);
        fuse_b = Tensor({cd});
        out_w = Tensor({1, cd});
        fill_trunc_normal(out_w, rng, 0.02);
        out_b = Tensor({1});
    }

    // Returns logits [T, 1, H, W] for the original frame extent.
    Tensor forward(const FeaturePyramid& p) const {
        const std::size_t t = p[0].dim(0), h4 = p[0].dim(2), w4 = p[0].dim(3);
        std::vector<Tensor> levels;
        levels.reserve(4);
        for (std::size_t i = 0; i < 4; ++i) {
            const scan::Layout lay{p[i].dim(0), p[i].dim(2), p[i].dim(3)};
            if (lay.t != t || lay.h != h4 >> i || lay.w != w4 >> i)
                throw ShapeError("decoder: inconsistent pyramid shapes");
            Tensor proj = add_channel(matmul(proj_w[i], flatten_sequence(p[i])), proj_b[i]);
            Tensor grid = unflatten_sequence(proj, lay);  // [T, C_dec, h_i, w_i]
            levels.push_back(i == 0 ? grid : bilinear_upsample2d(grid, std::size_t(1) << i));
        }
        Tensor cat = concat(levels, 1);  // [T, 4*C_dec, H/4, W/4]
        const scan::Layout l4{t, h4, w4};
        Tensor fused = silu(add_channel(matmul(fuse_w, flatten_sequence(cat)), fuse_b));
        Tensor logit = add_channel(matmul(out_w, fused), out_b);  // [1, L]
        return bilinear_upsample2d(unflatten_sequence(logit, l4), 4);
    }

    template <class F>
    void visit_params(const std::string& p, F&& f) {
        for (std::size_t i = 0; i < 4; ++i) {
            f(p + "proj" + std::to_string(i) + ".w", proj_w[i]);
            f(p + "proj" + std::to_string(i) + ".b", proj_b[i]);
        }
        f(p + "fuse.w", fuse_w);
        f(p + "fuse.b", fuse_b);
        f(p + "out.w", out_w);
        f(p + "out.b", out_b);
    }
};

// ---------------------------------------------------------------------------
// Auxiliary boundary head on stage-1 features: three 3x3 convolutions
// narrowing C1 -> C1/2 -> C1/4 -> 1 with SiLU between, upsampled x4.
// ---------------------------------------------------------------------------
struct BoundaryHead {
    Tensor w1, b1, w2, b2, w3, b3;

    void init(std::size_t c1, Rng& rng) {
        const std::size_t c2 = std::max<std::size_t>(1, c1 / 2);
        const std::size_t c3 = std::max<std::size_t>(1, c1 / 4);
        w1 = Tensor({c2, c1, 3, 3});
        fill_trunc_normal(w1, rng, 0.02);
        b1 = Tensor({c2});
        w2 = Tensor({c3, c2, 3, 3});
        fill_trunc_normal(w2, rng, 0.02);
        b2 = Tensor({c3});
        w3 = Tensor({1, c3, 3, 3});
        fill_trunc_normal(w3, rng, 0.02);
        b3 = Tensor({1});
    }

    // f1: [T, C1, H/4, W/4] -> logits [T, 1, H, W]
    Tensor forward(const Tensor& f1) const {
        Tensor h = silu(conv2d(f1, w1, b1, 1, 1));
        h = silu(conv2d(h, w2, b2, 1, 1));
        h = conv2d(h, w3, b3, 1, 1);
        return bilinear_upsample2d(h, 4);
    }

    template <class F>
    void visit_params(const std::string& p, F&& f) {
        f(p + "w1", w1);
        f(p + "b1", b1);
        f(p + "w2", w2);
        f(p + "b2", b2);
        f(p + "w3", w3);
        f(p + "b3", b3);
    }
};

// ---------------------------------------------------------------------------
// Full network.
// ---------------------------------------------------------------------------
struct VivimNet {
    VivimConfig cfg;
    std::array<EncoderStage, 4> stages;
    Decoder dec;
    BoundaryHead bhead;

    void init(const VivimConfig& c, Rng& rng) {
        c.validate();
        cfg = c;
        for (std::size_t i = 0; i < 4; ++i) {
            stages[i].init(i == 0, i == 0 ? 3 : cfg.channels[i - 1], cfg.channels[i],
                           cfg.n_mamba[i], cfg.heads[i], cfg.reduction[i], cfg.n_state,
                           cfg.scan_tf, cfg.scan_tb, cfg.scan_sp, rng);
        }
        dec.init(cfg.channels, cfg.c_dec, rng);
        bhead.init(cfg.channels[0], rng);
    }

    FeaturePyramid encode(const Tensor& clip) const {
        if (clip.rank() != 4 || clip.dim(1) != 3)
            throw ShapeError(str_cat("encode: clip must be [T, 3, H, W], got ",
                                     shape_str(clip.shape())));
        if (clip.dim(2) % 32 != 0 || clip.dim(3) % 32 != 0)
            throw ShapeError("encode: frame extents must be divisible by 32");
        FeaturePyramid p;
        Tensor x = clip;
        for (std::size_t i = 0; i < 4; ++i) {
            x = stages[i].forward(x);
            p[i] = x;
        }
        return p;
    }

    struct Output {
        Tensor logits;           // [T, 1, H, W]
        Tensor boundary_logits;  // [T, 1, H, W], undefined when the head is off
        FeaturePyramid pyramid;
    };

    Output forward(const Tensor& clip) const {
        Output o;
        o.pyramid = encode(clip);
        o.logits = dec.forward(o.pyramid);
        if (cfg.boundary_head) o.boundary_logits = bhead.forward(o.pyramid[0]);
        return o;
    }

    template <class F>
    void visit_params(F&& f) {
        for (std::size_t i = 0; i < 4; ++i)
            stages[i].visit_params("enc.s" + std::to_string(i + 1) + ".", f);
        dec.visit_params("dec.", f);
        bhead.visit_params("bnd.", f);
    }
};

// ---------------------------------------------------------------------------
// Segmentation loss: mean binary cross-entropy from logits plus soft IoU.
//   bce(l, g) = softplus(l) - l*g        (identity for -log sigmoid terms)
//   iou(p, g) = 1 - (sum p*g + eps) / (sum p + sum g - sum p*g + eps)
// gt must be binary and carries no gradient.
// ---------------------------------------------------------------------------
inline void check_binary(const Tensor& gt, const char* what) {
    const double* p = gt.data();
    for (std::size_t i = 0; i < gt.numel(); ++i)
        if (p[i] != 0.0 && p[i] != 1.0)
            throw NumericError(str_cat(what, ": ground truth must be binary"));
}

inline Tensor bce_from_logits_mean(const Tensor& logits, const Tensor& gt) {
    check_same_shape(logits, gt, "bce");
    check_binary(gt, "bce");
    return mean_all(sub(softplus(logits), mul(logits, gt)));
}

inline Tensor soft_iou_loss(const Tensor& logits, const Tensor& gt, double eps = 1.0) {
    check_same_shape(logits, gt, "soft_iou");
    check_binary(gt, "soft_iou");
    Tensor p = sigmoid(logits);
    Tensor inter = sum_all(mul(p, gt));
    Tensor uni = sub(add(sum_all(p), sum_all(gt)), inter);
    Tensor ratio = div(add_scalar(inter, eps), add_scalar(uni, eps));
    return add_scalar(neg(ratio), 1.0);
}

inline Tensor segmentation_loss(const Tensor& logits, const Tensor& gt) {
    return add(bce_from_logits_mean(logits, gt), soft_iou_loss(logits, gt));
}

}  // namespace vivim
