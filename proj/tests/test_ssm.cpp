#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "testing.hpp"
#include "vivim/ssm.hpp"

using namespace vivim;
using vtest::fd;
using vtest::max_abs_diff;
using vtest::randt;

namespace {

// Random stable LTI system in [C, N] coefficient layout.
struct Lti {
    Tensor abar, bbar, cvec;
};

Lti random_lti(std::size_t c, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Lti s{Tensor({c, n}), Tensor({c, n}), Tensor({c, n})};
    for (std::size_t i = 0; i < c * n; ++i) {
        s.abar.mut_data()[i] = rng.uniform(0.0, 0.98);
        s.bbar.mut_data()[i] = rng.uniform(-1.0, 1.0);
        s.cvec.mut_data()[i] = rng.uniform(-1.0, 1.0);
    }
    return s;
}

}  // namespace

TEST_CASE("zero-order hold matches closed forms") {
    // Zero step: identity transition, no input injection.
    {
        const ZohCoeffs z = discretize_zoh(-3.7, 2.0, 0.0);
        CHECK(z.abar == 1.0);
        CHECK(z.bbar == 0.0);
    }
    // a=-1, delta=ln 2, b=1: abar = exp(-ln 2) = 1/2, bbar = (1/2 - 1)/(-1) = 1/2.
    {
        const ZohCoeffs z = discretize_zoh(-1.0, 1.0, std::log(2.0));
        CHECK(std::abs(z.abar - 0.5) < 1e-12);
        CHECK(std::abs(z.bbar - 0.5) < 1e-12);
    }
    // |delta*a| = 1e-12: bbar collapses to the analytic limit delta*b.
    {
        const double delta = 1e-12, a = -1.0, b = 3.0;
        const ZohCoeffs z = discretize_zoh(a, b, delta);
        CHECK(std::abs(z.bbar - delta * b) / (delta * b) < 1e-9);
        CHECK(z.abar == doctest::Approx(1.0).epsilon(1e-11));
    }
}

TEST_CASE("recurrent form reproduces the hand recurrence") {
    Tensor abar = Tensor::full({1, 1}, 0.5);
    Tensor bbar = Tensor::full({1, 1}, 0.5);
    Tensor cvec = Tensor::full({1, 1}, 1.0);
    Tensor x = Tensor::from_vector({1, 3}, {1.0, 0.0, 0.0});
    Tensor y = ssm_recurrent(abar, bbar, cvec, x);
    CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y.data()[2] == doctest::Approx(0.125).epsilon(1e-12));

    // Zero input -> zero output from a zero initial state.
    Tensor y0 = ssm_recurrent(abar, bbar, cvec, Tensor::zeros({1, 3}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(y0.data()[i] == 0.0);

    // abar = 0: memoryless, y_t = c*bbar*x_t.
    Tensor z = Tensor::zeros({1, 1});
    Tensor xr = randt({1, 5}, 4);
    Tensor ym = ssm_recurrent(z, bbar, cvec, xr);
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(ym.data()[i] == doctest::Approx(0.5 * xr.data()[i]).epsilon(1e-12));

    CHECK_THROWS_AS(ssm_recurrent(abar, bbar, cvec, Tensor::zeros({1, 0})), ShapeError);
}

TEST_CASE("kernel of the half-life system is the geometric sequence") {
    Tensor abar = Tensor::full({1, 1}, 0.5);
    Tensor bbar = Tensor::full({1, 1}, 0.5);
    Tensor cvec = Tensor::full({1, 1}, 1.0);
    Tensor k = ssm_kernel(abar, bbar, cvec, 4);
    const double want[] = {0.5, 0.25, 0.125, 0.0625};
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(k.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));

    // Unit impulse at t=0 recovers the kernel through the conv path.
    Tensor x = Tensor::from_vector({1, 4}, {1.0, 0.0, 0.0, 0.0});
    Tensor y = ssm_conv(abar, bbar, cvec, x);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(y.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("convolutional and recurrent routes agree on random LTI systems") {
    // Dual-route equivalence over 100 instances, strict 64-bit tolerance.
    Rng dims(1234);
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t c = 1 + dims.uniform_index(4);
        const std::size_t n = 1 + dims.uniform_index(16);
        const std::size_t m = 1 + dims.uniform_index(64);
        Lti s = random_lti(c, n, 5000 + inst);
        Tensor x = randt({c, m}, 9000 + inst);
        Tensor yr = ssm_recurrent(s.abar, s.bbar, s.cvec, x);
        Tensor yc = ssm_conv(s.abar, s.bbar, s.cvec, x);
        worst = std::max(worst, max_abs_diff(yr, yc));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("bounded input cannot blow up a stable scan") {
    // |h| <= max|bbar|*max|x| / (1 - max abar); 10k steps stay finite and bounded.
    const std::size_t m = 10000;
    Lti s = random_lti(2, 8, 77);
    Tensor x({2, m});
    Rng rng(78);
    for (std::size_t i = 0; i < 2 * m; ++i) x.mut_data()[i] = rng.uniform(-1.0, 1.0);
    Tensor y = ssm_recurrent(s.abar, s.bbar, s.cvec, x);
    double amax = 0.0, bmax = 0.0, cmax = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
        amax = std::max(amax, std::abs(s.abar.data()[i]));
        bmax = std::max(bmax, std::abs(s.bbar.data()[i]));
        cmax = std::max(cmax, std::abs(s.cvec.data()[i]));
    }
    const double bound = 8.0 * cmax * bmax / (1.0 - amax);
    for (std::size_t i = 0; i < y.numel(); ++i) {
        REQUIRE(std::isfinite(y.data()[i]));
        CHECK(std::abs(y.data()[i]) <= bound + 1e-9);
    }
}

TEST_CASE("recurrent scan gradients match central differences") {
    Lti s = random_lti(2, 3, 31);
    Tensor x = randt({2, 6}, 32);
    CHECK(fd([&](const Tensor& t) { return ssm_recurrent(t, s.bbar, s.cvec, x); }, s.abar) < 1e-3);
    CHECK(fd([&](const Tensor& t) { return ssm_recurrent(s.abar, t, s.cvec, x); }, s.bbar) < 1e-3);
    CHECK(fd([&](const Tensor& t) { return ssm_recurrent(s.abar, s.bbar, t, x); }, s.cvec) < 1e-3);
    CHECK(fd([&](const Tensor& t) { return ssm_recurrent(s.abar, s.bbar, s.cvec, t); }, x) < 1e-3);
}

TEST_CASE("selective core matches the recurrent oracle when frozen to LTI") {
    // Constant delta/B/C over time turn the selective core into the LTI
    // system abar_n = exp(-delta*(n+1)), bbar_n = (1-abar_n)/(n+1)*b_n.
    const std::size_t c = 3, n = 4, m = 12;
    Rng rng(55);
    std::vector<double> dl(c), bv(n), cv(n);
    for (auto& v : dl) v = rng.uniform(0.05, 0.8);
    for (auto& v : bv) v = rng.uniform(-1.0, 1.0);
    for (auto& v : cv) v = rng.uniform(-1.0, 1.0);

    Tensor delta({c, m}), bmat({n, m}), cmat({n, m});
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t t = 0; t < m; ++t) delta.mut_data()[ci * m + t] = dl[ci];
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t t = 0; t < m; ++t) {
            bmat.mut_data()[k * m + t] = bv[k];
            cmat.mut_data()[k * m + t] = cv[k];
        }
    Tensor u = randt({c, m}, 56);

    Tensor abar({c, n}), bbar({c, n}), cvec({c, n});
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t k = 0; k < n; ++k) {
            const double ab = std::exp(-dl[ci] * static_cast<double>(k + 1));
            abar.mut_data()[ci * n + k] = ab;
            bbar.mut_data()[ci * n + k] = (1.0 - ab) / static_cast<double>(k + 1) * bv[k];
            cvec.mut_data()[ci * n + k] = cv[k];
        }

    Tensor got = selective_scan_core(delta, bmat, cmat, u);
    Tensor want = ssm_recurrent(abar, bbar, cvec, u);
    CHECK(max_abs_diff(got, want) < 1e-8);
}

TEST_CASE("selective core gradients match central differences") {
    const std::size_t c = 2, n = 3, m = 5;
    Rng rng(61);
    Tensor delta({c, m});
    for (std::size_t i = 0; i < c * m; ++i) delta.mut_data()[i] = rng.uniform(0.05, 0.6);
    Tensor bmat = randt({n, m}, 62, 0.8);
    Tensor cmat = randt({n, m}, 63, 0.8);
    Tensor u = randt({c, m}, 64, 0.8);

    CHECK(fd([&](const Tensor& t) { return selective_scan_core(t, bmat, cmat, u); }, delta, 1e-5) <
          1e-3);
    CHECK(fd([&](const Tensor& t) { return selective_scan_core(delta, t, cmat, u); }, bmat) < 1e-3);
    CHECK(fd([&](const Tensor& t) { return selective_scan_core(delta, bmat, t, u); }, cmat) < 1e-3);
    CHECK(fd([&](const Tensor& t) { return selective_scan_core(delta, bmat, cmat, t); }, u) < 1e-3);
}

TEST_CASE("changing a later input never changes an earlier output") {
    const std::size_t c = 2, n = 4, m = 10, tcut = 6;
    Rng rng(71);
    Tensor delta({c, m});
    for (std::size_t i = 0; i < c * m; ++i) delta.mut_data()[i] = rng.uniform(0.05, 0.6);
    Tensor bmat = randt({n, m}, 72);
    Tensor cmat = randt({n, m}, 73);
    Tensor u = randt({c, m}, 74);

    Tensor y0 = selective_scan_core(delta, bmat, cmat, u);
    Tensor u2 = u.detach();
    u2.mut_data()[0 * m + tcut] += 5.0;
    u2.mut_data()[1 * m + m - 1] -= 3.0;
    Tensor y1 = selective_scan_core(delta, bmat, cmat, u2);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t t = 0; t < tcut; ++t)
            CHECK(y0.data()[ci * m + t] == y1.data()[ci * m + t]);
    CHECK(y0.data()[0 * m + tcut] != y1.data()[0 * m + tcut]);
}

TEST_CASE("no-grad selective scan streams instead of saving the trajectory") {
    const std::size_t c = 4, n = 16, m = 4096;
    Rng rng(81);
    Tensor delta({c, m});
    for (std::size_t i = 0; i < c * m; ++i) delta.mut_data()[i] = rng.uniform(0.05, 0.6);
    Tensor bmat = randt({n, m}, 82);
    Tensor cmat = randt({n, m}, 83);
    Tensor u = randt({c, m}, 84);

    const std::size_t trajectory_bytes = c * m * n * sizeof(double);  // 4 MiB
    {
        NoGradGuard ng;
        const std::size_t before = memory::current_bytes();
        memory::reset_peak();
        Tensor y = selective_scan_core(delta, bmat, cmat, u);
        CHECK(memory::peak_bytes() - before < trajectory_bytes / 2);
    }

    // With gradients on, the trajectory is retained (the adjoint needs it).
    delta.set_requires_grad(true);
    const std::size_t before = memory::current_bytes();
    memory::reset_peak();
    Tensor y = selective_scan_core(delta, bmat, cmat, u);
    CHECK(memory::peak_bytes() - before >= trajectory_bytes);
}

TEST_CASE("selective block is zero on zero input and deterministic per seed") {
    Rng r1(17), r2(17), r3(18);
    SelectiveScanBlock<double> b1, b2, b3;
    b1.init(6, 4, r1);
    b2.init(6, 4, r2);
    b3.init(6, 4, r3);

    CHECK(b1.w_in.to_vector() == b2.w_in.to_vector());
    CHECK(b1.b_delta.to_vector() == b2.b_delta.to_vector());
    CHECK(b1.w_out.to_vector() != b3.w_out.to_vector());

    // softplus(b_delta) lies in the configured timescale band.
    for (std::size_t i = 0; i < b1.d_inner; ++i) {
        const double dt = std::log1p(std::exp(b1.b_delta.data()[i]));
        CHECK(dt >= 1e-3 * (1.0 - 1e-9));
        CHECK(dt <= 0.1 * (1.0 + 1e-9));
    }

    Tensor x0 = Tensor::zeros({6, 7});
    Tensor y = b1.forward(x0);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);

    Tensor xr = randt({6, 7}, 19);
    CHECK(b1.forward(xr).to_vector() == b2.forward(xr).to_vector());
}

TEST_CASE("selective block gradients reach every parameter") {
    Rng rng(23);
    SelectiveScanBlock<double> blk;
    blk.init(3, 2, rng);
    Tensor x = randt({3, 4}, 24, 0.7);
    CHECK(fd([&](const Tensor& t) { return blk.forward(t); }, x) < 1e-3);
    CHECK(fd([&](const Tensor& t) {
              SelectiveScanBlock<double> b = blk;
              b.w_delta = t;
              return b.forward(x);
          },
             blk.w_delta) < 1e-3);
    CHECK(fd([&](const Tensor& t) {
              SelectiveScanBlock<double> b = blk;
              b.w_b = t;
              return b.forward(x);
          },
             blk.w_b) < 1e-3);
    CHECK(fd([&](const Tensor& t) {
              SelectiveScanBlock<double> b = blk;
              b.d_skip = t;
              return b.forward(x);
          },
             blk.d_skip) < 1e-3);
}

TEST_CASE("tri-directional layer starts as the identity") {
    Rng rng(29);
    TriScanLayer<double> layer;
    layer.init(4, 3, rng);
    const scan::Layout lay{3, 2, 2};
    Tensor x = randt({4, lay.length()}, 30);
    Tensor y = layer.forward(x, lay);
    CHECK(max_abs_diff(x, y) == 0.0);

    // All branches disabled: the input tensor passes through untouched.
    layer.use_tf = layer.use_tb = layer.use_sp = false;
    Tensor y2 = layer.forward(x, lay);
    CHECK(y2.impl() == x.impl());
}

TEST_CASE("single temporal branch over H=W=1 reduces to one scan") {
    Rng rng(33);
    TriScanLayer<double> layer;
    layer.init(3, 4, rng);
    layer.use_tb = layer.use_sp = false;
    fill_trunc_normal(layer.w_merge, rng, 0.3);  // nonzero so the branch shows
    const scan::Layout lay{6, 1, 1};
    Tensor x = randt({3, 6}, 34);

    Tensor got = layer.forward(x, lay);
    Tensor want = add(x, add_channel(matmul(layer.w_merge,
                                            layer.tf.forward(layer.channel_norm(x))),
                                     layer.b_merge));
    CHECK(max_abs_diff(got, want) < 1e-10);
}

TEST_CASE("shared-weight forward/backward pair is time-reversal equivariant") {
    Rng rng(41);
    TriScanLayer<double> layer;
    layer.init(2, 3, rng);
    layer.use_sp = false;
    // Fresh layers initialize near zero; strengthen the scan so direction
    // handling shows up well above rounding noise.
    for (Tensor* t : {&layer.tf.w_in, &layer.tf.w_delta, &layer.tf.w_b, &layer.tf.w_c,
                      &layer.tf.w_out})
        fill_trunc_normal(*t, rng, 0.5);
    layer.tb = layer.tf;  // symmetric parameters
    fill_trunc_normal(layer.w_merge, rng, 0.3);
    const std::size_t t = 5;
    const scan::Layout lay{t, 1, 1};

    auto rev = [&](const Tensor& v) {
        auto rp = std::make_shared<const scan::Perm>(
            scan::reversed(scan::temporal_first_perm(lay)));
        return permute_positions(v, rp);
    };

    // out(reverse(x)) == reverse(out(x)) for any input.
    Tensor x = randt({2, t}, 42);
    Tensor lhs = layer.forward(rev(x), lay);
    Tensor rhs = rev(layer.forward(x, lay));
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);

    // Palindromic input: both-direction output stays palindromic ...
    Tensor xp({2, t});
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < t; ++i) {
            const double v = vtest::randt({1}, 43 + c * t + std::min(i, t - 1 - i)).data()[0];
            xp.mut_data()[c * t + i] = v;
        }
    CHECK(max_abs_diff(xp, rev(xp)) == 0.0);
    Tensor yp = layer.forward(xp, lay);
    CHECK(max_abs_diff(yp, rev(yp)) < 1e-12);

    // ... while the forward-only branch breaks the symmetry.
    TriScanLayer<double> fwd_only = layer;
    fwd_only.use_tb = false;
    Tensor yf = fwd_only.forward(xp, lay);
    CHECK(max_abs_diff(yf, rev(yf)) > 1e-6);

    // Enabling the backward branch changes the output for asymmetric input.
    Tensor ya = layer.forward(x, lay);
    Tensor yb = fwd_only.forward(x, lay);
    CHECK(max_abs_diff(ya, yb) > 1e-8);
}

TEST_CASE("spatial branch scans the pixel-major ordering") {
    // With only the spatial branch, H*W=1 layouts make it equal the temporal
    // branch computation (the orderings coincide).
    Rng rng(51);
    TriScanLayer<double> layer;
    layer.init(2, 2, rng);
    layer.use_tf = layer.use_tb = false;
    layer.sp = layer.tf;
    fill_trunc_normal(layer.w_merge, rng, 0.3);
    const scan::Layout lay{4, 1, 1};
    Tensor x = randt({2, 4}, 52);

    Tensor got = layer.forward(x, lay);
    TriScanLayer<double> tf_only = layer;
    tf_only.use_sp = false;
    tf_only.use_tf = true;
    Tensor want = tf_only.forward(x, lay);
    CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("tri-scan layer gradients match central differences") {
    Rng rng(57);
    TriScanLayer<double> layer;
    layer.init(2, 2, rng);
    fill_trunc_normal(layer.w_merge, rng, 0.2);
    const scan::Layout lay{2, 2, 1};
    Tensor x = randt({2, 4}, 58, 0.7);
    CHECK(fd([&](const Tensor& t) { return layer.forward(t, lay); }, x) < 1e-3);
}
