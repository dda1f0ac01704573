#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "testing.hpp"
#include "vivim/net.hpp"

using namespace vivim;
using vtest::max_abs_diff;
using vtest::randt;

namespace {

VivimConfig mini_cfg() {
    VivimConfig c;
    c.frames = 2;
    c.height = 32;
    c.width = 32;
    c.channels = {4, 8, 12, 16};
    c.n_mamba = {1, 1, 1, 1};
    c.reduction = {1, 1, 1, 1};
    c.heads = {1, 2, 3, 4};
    c.n_state = 4;
    c.c_dec = 8;
    return c;
}

Tensor identity_matrix(std::size_t n) {
    Tensor m = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) m.mut_data()[i * n + i] = 1.0;
    return m;
}

// Reverse the leading (frame) axis.
Tensor frame_reverse(const Tensor& x) {
    const std::size_t t = x.dim(0);
    if (t == 1) return x;
    std::vector<Tensor> frames;
    frames.reserve(t);
    for (std::size_t i = t; i-- > 0;) frames.push_back(slice(x, 0, i, 1));
    return concat(frames, 0);
}

}  // namespace

TEST_CASE("encoder emits the 1/4 to 1/32 pyramid") {
    NoGradGuard ng;
    VivimConfig cfg;
    cfg.frames = 2;
    Rng rng(1);
    VivimNet net;
    net.init(cfg, rng);
    Tensor clip = randt({2, 3, 64, 64}, 2, 0.5);
    FeaturePyramid p = net.encode(clip);
    CHECK(p[0].shape() == Shape{2, 32, 16, 16});
    CHECK(p[1].shape() == Shape{2, 64, 8, 8});
    CHECK(p[2].shape() == Shape{2, 160, 4, 4});
    CHECK(p[3].shape() == Shape{2, 256, 2, 2});

    Tensor logits = net.dec.forward(p);
    CHECK(logits.shape() == Shape{2, 1, 64, 64});
    Tensor bl = net.bhead.forward(p[0]);
    CHECK(bl.shape() == Shape{2, 1, 64, 64});

    // Same seed reproduces the pyramid bitwise; a fresh seed does not.
    Rng rng2(1);
    VivimNet net2;
    net2.init(cfg, rng2);
    FeaturePyramid q = net2.encode(clip);
    for (std::size_t i = 0; i < 4; ++i) CHECK(max_abs_diff(p[i], q[i]) == 0.0);

    CHECK_THROWS_AS(net.encode(Tensor::zeros({2, 1, 64, 64})), ShapeError);
    CHECK_THROWS_AS(net.encode(Tensor::zeros({2, 3, 48, 64})), ShapeError);
}

TEST_CASE("doubling the frame count doubles every pyramid extent") {
    NoGradGuard ng;
    VivimConfig cfg = mini_cfg();
    Rng rng(3);
    VivimNet net;
    net.init(cfg, rng);
    FeaturePyramid p1 = net.encode(randt({2, 3, 32, 32}, 4, 0.5));
    FeaturePyramid p2 = net.encode(randt({4, 3, 32, 32}, 5, 0.5));
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(p2[i].dim(0) == 2 * p1[i].dim(0));
        for (std::size_t d = 1; d < 4; ++d) CHECK(p2[i].dim(d) == p1[i].dim(d));
    }
}

TEST_CASE("patch embedding is frame-pure") {
    NoGradGuard ng;
    Rng rng(7);
    EncoderStage st;
    st.init(true, 3, 8, 0, 1, 1, 2, true, true, true, rng);
    Tensor frame = randt({1, 3, 32, 32}, 8, 0.5);
    Tensor clip = concat(std::vector<Tensor>{frame, frame}, 0);
    Tensor e = conv2d(clip, st.patch_w, st.patch_b, 4, 3);
    CHECK(e.shape() == Shape{2, 8, 8, 8});
    Tensor e0 = slice(e, 0, 0, 1);
    Tensor e1 = slice(e, 0, 1, 1);
    CHECK(max_abs_diff(e0, e1) == 0.0);
}

TEST_CASE("fresh encoder stages are identity maps after their embedding") {
    // Every sub-layer's output projection starts at zero, so the stage output
    // must equal the normed patch embedding exactly.
    NoGradGuard ng;
    Rng rng(11);
    for (bool first : {true, false}) {
        EncoderStage st;
        const std::size_t cin = first ? 3 : 6;
        st.init(first, cin, 8, 2, 2, 1, 3, true, true, true, rng);
        Tensor x = randt({2, cin, 8, 8}, first ? 12 : 13, 0.5);
        Tensor got = st.forward(x);
        Tensor e = first ? conv2d(x, st.patch_w, st.patch_b, 4, 3)
                         : conv2d(x, st.patch_w, st.patch_b, 2, 1);
        const scan::Layout lay{e.dim(0), e.dim(2), e.dim(3)};
        Tensor want = unflatten_sequence(
            channel_layer_norm(flatten_sequence(e), st.pln_g, st.pln_b), lay);
        CHECK(max_abs_diff(got, want) == 0.0);
    }
}

TEST_CASE("uniform attention reduces to the spatial mean of values") {
    // wq = wk = 0 makes every score equal, so softmax is uniform and each
    // token receives the per-frame mean of the value projection.
    NoGradGuard ng;
    Rng rng(17);
    SpatialAttention at;
    at.init(4, 1, 1, rng);
    at.wq = Tensor::zeros({4, 4});
    at.wk = Tensor::zeros({4, 4});
    at.wv = identity_matrix(4);
    at.wo = identity_matrix(4);

    Tensor x = randt({2, 4, 2, 2}, 18, 1.0);
    Tensor y = at.forward(x);
    for (std::size_t f = 0; f < 2; ++f)
        for (std::size_t c = 0; c < 4; ++c) {
            double mean = 0.0;
            for (std::size_t i = 0; i < 4; ++i) mean += x.data()[(f * 4 + c) * 4 + i];
            mean /= 4.0;
            for (std::size_t i = 0; i < 4; ++i) {
                const double want = x.data()[(f * 4 + c) * 4 + i] + mean;
                CHECK(y.data()[(f * 4 + c) * 4 + i] == doctest::Approx(want).epsilon(1e-10));
            }
        }
}

TEST_CASE("single-token attention is the value projection plus residual") {
    NoGradGuard ng;
    Rng rng(19);
    SpatialAttention at;
    at.init(3, 1, 1, rng);
    at.wo = identity_matrix(3);
    Tensor x = randt({2, 3, 1, 1}, 20, 1.0);
    Tensor y = at.forward(x);
    Tensor tok = reshape(x, {2 * 3, 1});
    for (std::size_t f = 0; f < 2; ++f)
        for (std::size_t c = 0; c < 3; ++c) {
            double v = at.bv.data()[c];
            for (std::size_t k = 0; k < 3; ++k)
                v += at.wv.data()[c * 3 + k] * x.data()[(f * 3 + k)];
            const double want = x.data()[f * 3 + c] + v + at.bo.data()[c];
            CHECK(y.data()[f * 3 + c] == doctest::Approx(want).epsilon(1e-10));
        }
    (void)tok;
}

TEST_CASE("attention commutes with frame permutation; temporal scan does not") {
    NoGradGuard ng;
    Rng rng(23);
    SpatialAttention at;
    at.init(4, 2, 1, rng);
    fill_trunc_normal(at.wo, rng, 0.2);  // nonzero update
    Tensor x = randt({3, 4, 2, 2}, 24, 1.0);
    Tensor lhs = at.forward(frame_reverse(x));
    Tensor rhs = frame_reverse(at.forward(x));
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);

    MixFfn ffn;
    ffn.init(4, rng);
    fill_trunc_normal(ffn.w2, rng, 0.2);
    Tensor fl = ffn.forward(frame_reverse(x));
    Tensor fr = frame_reverse(ffn.forward(x));
    CHECK(max_abs_diff(fl, fr) < 1e-12);

    TriScanLayer<double> layer;
    layer.init(4, 3, rng);
    layer.use_tb = layer.use_sp = false;
    for (Tensor* t : {&layer.tf.w_in, &layer.tf.w_delta, &layer.tf.w_b, &layer.tf.w_c,
                      &layer.tf.w_out})
        fill_trunc_normal(*t, rng, 0.5);
    fill_trunc_normal(layer.w_merge, rng, 0.3);
    const scan::Layout lay{3, 2, 2};
    Tensor sl = layer.forward(flatten_sequence(frame_reverse(x)), lay);
    Tensor sr = flatten_sequence(frame_reverse(
        unflatten_sequence(layer.forward(flatten_sequence(x), lay), lay)));
    CHECK(max_abs_diff(sl, sr) > 1e-6);
}

TEST_CASE("center-one-hot depthwise kernel turns DSF into a pointwise MLP") {
    NoGradGuard ng;
    Rng rng(29);
    Dsf dsf;
    dsf.init(3, rng);
    fill_trunc_normal(dsf.w2, rng, 0.3);
    fill_trunc_normal(dsf.b1, rng, 0.3);
    fill_trunc_normal(dsf.b2, rng, 0.3);
    dsf.kdw = Tensor::zeros({12, 3, 3, 3});
    for (std::size_t ch = 0; ch < 12; ++ch) dsf.kdw.mut_data()[ch * 27 + 13] = 1.0;

    const scan::Layout lay{2, 2, 2};
    Tensor h = randt({3, lay.length()}, 30, 1.0);
    Tensor got = dsf.forward(h, lay);
    Tensor want = add_channel(
        matmul(dsf.w2, silu(add_channel(matmul(dsf.w1, h), dsf.b1))), dsf.b2);
    CHECK(max_abs_diff(got, want) < 1e-10);
    CHECK(got.shape() == h.shape());

    // Zero kernel and zero final bias: zero update.
    dsf.kdw = Tensor::zeros({12, 3, 3, 3});
    dsf.b1 = Tensor::zeros({12});
    dsf.b2 = Tensor::zeros({3});
    Tensor z = dsf.forward(h, lay);
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z.data()[i] == 0.0);
}

TEST_CASE("zeroed prediction weights pin the decoder to its bias") {
    NoGradGuard ng;
    Rng rng(31);
    VivimConfig cfg = mini_cfg();
    VivimNet net;
    net.init(cfg, rng);
    net.dec.out_w = Tensor::zeros({1, cfg.c_dec});
    net.dec.out_b = Tensor::full({1}, 0.37);
    Tensor clip = randt({2, 3, 32, 32}, 32, 0.5);
    Tensor logits = net.dec.forward(net.encode(clip));
    CHECK(logits.shape() == Shape{2, 1, 32, 32});
    for (std::size_t i = 0; i < logits.numel(); ++i)
        CHECK(logits.data()[i] == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("decoder rejects inconsistent pyramids") {
    NoGradGuard ng;
    Rng rng(33);
    VivimConfig cfg = mini_cfg();
    VivimNet net;
    net.init(cfg, rng);
    FeaturePyramid p = net.encode(randt({2, 3, 32, 32}, 34, 0.5));
    p[2] = Tensor::zeros({2, 12, 4, 4});  // wrong extent for level 3
    CHECK_THROWS_AS(net.dec.forward(p), ShapeError);
}

TEST_CASE("boundary head at zero output weights predicts probability one half") {
    NoGradGuard ng;
    Rng rng(37);
    BoundaryHead bh;
    bh.init(4, rng);
    bh.w3 = Tensor::zeros({1, 1, 3, 3});
    bh.b3 = Tensor::zeros({1});
    Tensor f1 = randt({2, 4, 8, 8}, 38, 1.0);
    Tensor logits = bh.forward(f1);
    CHECK(logits.shape() == Shape{2, 1, 32, 32});
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        CHECK(logits.data()[i] == 0.0);
        CHECK(1.0 / (1.0 + std::exp(-logits.data()[i])) == 0.5);
    }
}

TEST_CASE("boundary gradients reach the stage-1 features") {
    Rng rng(41);
    BoundaryHead bh;
    bh.init(4, rng);
    Tensor f1 = randt({1, 4, 8, 8}, 42, 1.0);
    f1.set_requires_grad(true);
    Tensor logits = bh.forward(f1);
    Tensor gt = Tensor::zeros({1, 1, 32, 32});
    Tensor loss = bce_from_logits_mean(logits, gt);
    loss.backward();
    REQUIRE(f1.has_grad());
    double asum = 0.0;
    for (std::size_t i = 0; i < f1.numel(); ++i) asum += std::abs(f1.grad_data()[i]);
    CHECK(asum > 0.0);
}

TEST_CASE("every pyramid level feeds the decoder gradients") {
    VivimConfig cfg = mini_cfg();
    Rng rng(43);
    VivimNet net;
    net.init(cfg, rng);
    net.visit_params([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
    Tensor clip = randt({2, 3, 32, 32}, 44, 0.5);
    VivimNet::Output out = net.forward(clip);
    Tensor loss = sum_all(out.logits);
    loss.backward();
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(out.pyramid[i].has_grad());
        double asum = 0.0;
        const double* g = out.pyramid[i].grad_data();
        for (std::size_t k = 0; k < out.pyramid[i].numel(); ++k) asum += std::abs(g[k]);
        CHECK(asum > 0.0);
    }
}

TEST_CASE("segmentation loss matches the half-foreground hand value") {
    Tensor logits = Tensor::zeros({2, 1, 64, 64});
    Tensor gt = Tensor::zeros({2, 1, 64, 64});
    for (std::size_t i = 0; i < gt.numel() / 2; ++i) gt.mut_data()[i] = 1.0;
    const double total = segmentation_loss(logits, gt).item();
    CHECK(std::abs(total - 1.3598) < 1e-3);

    // Perfect prediction drives both terms to zero.
    Tensor sharp({1, 8});
    Tensor g2 = Tensor::from_vector({1, 8}, {1, 1, 1, 1, 0, 0, 0, 0});
    for (std::size_t i = 0; i < 8; ++i) sharp.mut_data()[i] = g2.data()[i] > 0.5 ? 40.0 : -40.0;
    CHECK(segmentation_loss(sharp, g2).item() < 1e-8);

    // Empty ground truth with confidently-empty logits: eps guards the union.
    Tensor empty = Tensor::full({1, 8}, -40.0);
    CHECK(segmentation_loss(empty, Tensor::zeros({1, 8})).item() < 1e-8);

    CHECK_THROWS_AS(segmentation_loss(logits, Tensor::full({2, 1, 64, 64}, 0.5)), NumericError);
}

TEST_CASE("segmentation loss is non-negative and decreases along its gradient") {
    Rng rng(47);
    for (int inst = 0; inst < 5; ++inst) {
        Tensor logits = randt({1, 1, 6, 6}, 100 + inst, 1.5);
        Tensor gt({1, 1, 6, 6});
        Rng gr(200 + inst);
        for (std::size_t i = 0; i < gt.numel(); ++i)
            gt.mut_data()[i] = gr.uniform() < 0.5 ? 1.0 : 0.0;
        logits.set_requires_grad(true);
        Tensor loss = segmentation_loss(logits, gt);
        CHECK(loss.item() >= 0.0);
        loss.backward();
        Tensor stepped = logits.detach();
        for (std::size_t i = 0; i < stepped.numel(); ++i)
            stepped.mut_data()[i] -= 1e-3 * logits.grad_data()[i];
        NoGradGuard ng;
        CHECK(segmentation_loss(stepped, gt).item() < loss.item());
    }
    (void)rng;
}

TEST_CASE("miniature end-to-end gradients match central differences") {
    VivimConfig cfg = mini_cfg();
    Rng rng(53);
    VivimNet net;
    net.init(cfg, rng);
    // Kick every projection off its zero-init point so no branch is
    // structurally dark, then track gradients everywhere.
    Rng noise(54);
    std::vector<std::pair<std::string, Tensor>> params;
    net.visit_params([&](const std::string& name, Tensor& t) {
        double* p = t.mut_data();
        for (std::size_t i = 0; i < t.numel(); ++i) p[i] += noise.normal() * 0.02;
        t.set_requires_grad(true);
        params.emplace_back(name, t);
    });

    Tensor clip = randt({2, 3, 32, 32}, 55, 0.5);
    Tensor gt({2, 1, 32, 32});
    Rng gr(56);
    for (std::size_t i = 0; i < gt.numel(); ++i)
        gt.mut_data()[i] = gr.uniform() < 0.3 ? 1.0 : 0.0;
    Tensor edges({2, 1, 32, 32});
    for (std::size_t i = 0; i < edges.numel(); ++i)
        edges.mut_data()[i] = gr.uniform() < 0.1 ? 1.0 : 0.0;

    auto loss_fn = [&]() {
        VivimNet::Output out = net.forward(clip);
        Tensor seg = segmentation_loss(out.logits, gt);
        Tensor bce = bce_from_logits_mean(out.boundary_logits, edges);
        return add(seg, mul_scalar(bce, 0.3));
    };

    Tensor loss = loss_fn();
    loss.backward();

    Rng pick(57);
    const double h = 1e-4;
    for (int probe = 0; probe < 6; ++probe) {
        auto& [name, param] = params[pick.uniform_index(params.size())];
        const std::size_t coord = pick.uniform_index(param.numel());
        const double analytic = param.has_grad() ? param.grad_data()[coord] : 0.0;
        const double saved = param.data()[coord];
        double fplus, fminus;
        {
            NoGradGuard ng;
            param.mut_data()[coord] = saved + h;
            fplus = loss_fn().item();
            param.mut_data()[coord] = saved - h;
            fminus = loss_fn().item();
            param.mut_data()[coord] = saved;
        }
        const double numeric = (fplus - fminus) / (2.0 * h);
        const double rel = std::abs(analytic - numeric) /
                           std::max({1.0, std::abs(analytic), std::abs(numeric)});
        INFO(name << "[" << coord << "]: analytic " << analytic << " numeric " << numeric);
        CHECK(rel < 1e-2);
    }
}
