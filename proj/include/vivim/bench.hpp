#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "vivim/common.hpp"
#include "vivim/metrics.hpp"
#include "vivim/rng.hpp"
#include "vivim/tensor.hpp"

namespace vivim::bench {

// ---------------------------------------------------------------------------
// Scaling benchmark: the selective-scan core against a full spatio-temporal
// attention core over growing clip lengths. Both cores run outside the
// autodiff engine on raw tracked buffers so the allocation counter sees
// every byte that scales with the token count, and both are templated on the
// float width (64-bit by default, 32-bit as a benchmark-only option).
//
// The attention core materialises the [TM, TM] score matrix, which is the
// quadratic object under test; a byte budget installed via
// memory::ScopedLimit turns that allocation into a MemoryLimitError, which
// the driver records as an exhausted row rather than a failure.
// ---------------------------------------------------------------------------

enum class Kind { st_mamba, full_attention };

inline const char* kind_name(Kind k) {
    return k == Kind::st_mamba ? "st_mamba" : "full_attention";
}

inline Kind parse_kind(const std::string& s) {
    if (s == "st_mamba") return Kind::st_mamba;
    if (s == "full_attention") return Kind::full_attention;
    throw Error(str_cat("bench: unknown kind '", s, "'"));
}

struct Row {
    Kind kind = Kind::st_mamba;
    std::size_t t = 0, h = 0, w = 0, d = 0;
    double wall_ms = 0.0;
    std::size_t peak_bytes = 0;
    std::uint64_t flops = 0;
    bool ok = true;
};

// Slopes are least-squares fits of log(cost) against log(T*H*W) over the
// rows that completed; NaN when fewer than two such rows exist.
struct Result {
    std::vector<Row> rows;
    double wall_slope = std::numeric_limits<double>::quiet_NaN();
    double peak_slope = std::numeric_limits<double>::quiet_NaN();
    double flops_slope = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

using vivim::detail::TrackedBuffer;

// c[m, p] = a[m, n] * b[n, p]
template <class F>
void mm(const TrackedBuffer<F>& a, const TrackedBuffer<F>& b, TrackedBuffer<F>& c,
        std::size_t m, std::size_t n, std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        F* ci = c.data() + i * p;
        std::fill(ci, ci + p, F(0));
        for (std::size_t k = 0; k < n; ++k) {
            const F aik = a[i * n + k];
            const F* bk = b.data() + k * p;
            for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
        }
    }
}

// c[m, m2] = a[m, n] * b[m2, n]^T, scaled
template <class F>
void mm_nt(const TrackedBuffer<F>& a, const TrackedBuffer<F>& b, TrackedBuffer<F>& c,
           std::size_t m, std::size_t n, std::size_t m2, F scale) {
    for (std::size_t i = 0; i < m; ++i) {
        const F* ai = a.data() + i * n;
        for (std::size_t j = 0; j < m2; ++j) {
            const F* bj = b.data() + j * n;
            F acc = F(0);
            for (std::size_t k = 0; k < n; ++k) acc += ai[k] * bj[k];
            c[i * m2 + j] = acc * scale;
        }
    }
}

template <class F>
void softmax_rows(TrackedBuffer<F>& s, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        F* r = s.data() + i * cols;
        F mx = r[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, r[j]);
        F sum = F(0);
        for (std::size_t j = 0; j < cols; ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        const F inv = F(1) / sum;
        for (std::size_t j = 0; j < cols; ++j) r[j] *= inv;
    }
}

template <class F>
void fill_normal(TrackedBuffer<F>& b, Rng& rng, double stddev) {
    for (std::size_t i = 0; i < b.size(); ++i)
        b[i] = static_cast<F>(rng.normal(0.0, stddev));
}

// Full self-attention over the flattened clip: QKV projections, scaled
// scores over all TM tokens, row softmax in place, value aggregation,
// output projection. Work and memory are quadratic in TM by construction.
template <class F>
struct AttentionCore {
    std::size_t d = 0;
    TrackedBuffer<F> wq, wk, wv, wo;

    void init(std::size_t dim, Rng& rng) {
        d = dim;
        for (TrackedBuffer<F>* w : {&wq, &wk, &wv, &wo}) {
            w->resize(d * d);
            fill_normal(*w, rng, 0.02);
        }
    }

    double run(const TrackedBuffer<F>& x, std::size_t tm) const {
        TrackedBuffer<F> q(tm * d), k(tm * d), v(tm * d);
        mm(x, wq, q, tm, d, d);
        mm(x, wk, k, tm, d, d);
        mm(x, wv, v, tm, d, d);
        TrackedBuffer<F> scores(tm * tm);
        mm_nt(q, k, scores, tm, d, tm, static_cast<F>(1.0 / std::sqrt(double(d))));
        softmax_rows(scores, tm, tm);
        TrackedBuffer<F> ctx(tm * d);
        mm(scores, v, ctx, tm, tm, d);
        TrackedBuffer<F> out(tm * d);
        mm(ctx, wo, out, tm, d, d);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += static_cast<double>(out[i]);
        return acc;
    }
};

// Selective-scan core at expansion ratio 2: input projection to E = 2D
// channels, a length-TM recurrence with input-dependent step size and
// N-state input/output projections per token, output projection back to D.
// State is O(E*N); activations are O(TM*E), linear in the token count.
template <class F>
struct StMambaCore {
    std::size_t d = 0, e = 0, n = 16;
    TrackedBuffer<F> w_in, w_dt, b_dt, w_b, w_c, w_out;

    void init(std::size_t dim, std::size_t n_state, Rng& rng) {
        d = dim;
        e = 2 * dim;
        n = n_state;
        w_in.resize(e * d);
        w_dt.resize(e);
        b_dt.resize(e);
        w_b.resize(n * e);
        w_c.resize(n * e);
        w_out.resize(d * e);
        for (TrackedBuffer<F>* w : {&w_in, &w_dt, &b_dt, &w_b, &w_c, &w_out})
            fill_normal(*w, rng, 0.02);
    }

    double run(const TrackedBuffer<F>& x, std::size_t tm) const {
        TrackedBuffer<F> u(tm * e), y(tm * e);
        for (std::size_t t = 0; t < tm; ++t) {
            const F* xt = x.data() + t * d;
            F* ut = u.data() + t * e;
            for (std::size_t c = 0; c < e; ++c) {
                const F* wc = w_in.data() + c * d;
                F acc = F(0);
                for (std::size_t k = 0; k < d; ++k) acc += wc[k] * xt[k];
                ut[c] = acc;
            }
        }
        TrackedBuffer<F> h(e * n);
        std::vector<F> bvec(n), cvec(n);
        for (std::size_t t = 0; t < tm; ++t) {
            const F* ut = u.data() + t * e;
            for (std::size_t i = 0; i < n; ++i) {
                const F* wbi = w_b.data() + i * e;
                const F* wci = w_c.data() + i * e;
                F ab = F(0), ac = F(0);
                for (std::size_t c = 0; c < e; ++c) {
                    ab += wbi[c] * ut[c];
                    ac += wci[c] * ut[c];
                }
                bvec[i] = ab;
                cvec[i] = ac;
            }
            F* yt = y.data() + t * e;
            for (std::size_t c = 0; c < e; ++c) {
                const F raw = w_dt[c] * ut[c] + b_dt[c];
                const F delta = raw > F(20) ? raw : std::log(F(1) + std::exp(raw));
                F* hc = h.data() + c * n;
                F acc = F(0);
                for (std::size_t i = 0; i < n; ++i) {
                    const F a = -static_cast<F>(i + 1);
                    const F abar = std::exp(delta * a);
                    const F phi = (F(1) - abar) / static_cast<F>(i + 1);
                    hc[i] = abar * hc[i] + phi * bvec[i] * ut[c];
                    acc += cvec[i] * hc[i];
                }
                yt[c] = acc;
            }
        }
        TrackedBuffer<F> out(tm * d);
        for (std::size_t t = 0; t < tm; ++t) {
            const F* yt = y.data() + t * e;
            F* ot = out.data() + t * d;
            for (std::size_t k = 0; k < d; ++k) {
                const F* wk2 = w_out.data() + k * e;
                F acc = F(0);
                for (std::size_t c = 0; c < e; ++c) acc += wk2[c] * yt[c];
                ot[k] = acc;
            }
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += static_cast<double>(out[i]);
        return acc;
    }
};

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

// One forward pass per repetition, median wall time of `reps` after one
// warm-up. Peak bytes are measured relative to the allocation level at
// entry, so ambient tensors elsewhere in the process do not skew the fit.
// An allocation failure under the installed budget marks the row exhausted
// and later rows are still attempted.
template <class F = double>
Result scaling_benchmark(Kind kind, const std::vector<std::size_t>& ts, std::size_t h,
                         std::size_t w, std::size_t d, std::size_t reps = 5,
                         std::uint64_t seed = 1234) {
    if (ts.size() < 4) throw Error("scaling_benchmark: need at least 4 sequence lengths");
    if (h == 0 || w == 0 || d == 0) throw Error("scaling_benchmark: degenerate geometry");
    for (std::size_t t : ts)
        if (t == 0) throw Error("scaling_benchmark: degenerate geometry");
    if (reps == 0) throw Error("scaling_benchmark: need at least one repetition");

    Result res;
    for (std::size_t t : ts) {
        const std::size_t tm = t * h * w;
        Row row;
        row.kind = kind;
        row.t = t;
        row.h = h;
        row.w = w;
        row.d = d;
        row.flops = kind == Kind::full_attention ? flops_attention(tm, d) : flops_ssm(tm, d, 16);
        const std::size_t ambient = memory::current_bytes();
        try {
            Rng rng(seed);
            detail::TrackedBuffer<F> x(tm * d);
            detail::fill_normal(x, rng, 1.0);
            detail::AttentionCore<F> attn;
            detail::StMambaCore<F> mamba;
            if (kind == Kind::full_attention) attn.init(d, rng);
            else mamba.init(d, 16, rng);
            auto run_once = [&]() {
                return kind == Kind::full_attention ? attn.run(x, tm) : mamba.run(x, tm);
            };
            memory::reset_peak();
            volatile double sink = run_once();  // warm-up
            std::vector<double> walls;
            for (std::size_t r = 0; r < reps; ++r) {
                const auto t0 = std::chrono::steady_clock::now();
                sink = run_once();
                const auto t1 = std::chrono::steady_clock::now();
                walls.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            }
            (void)sink;
            row.wall_ms = detail::median(walls);
            const std::size_t peak = memory::peak_bytes();
            row.peak_bytes = peak > ambient ? peak - ambient : 0;
        } catch (const MemoryLimitError&) {
            row.ok = false;
            row.wall_ms = 0.0;
            row.peak_bytes = 0;
        }
        res.rows.push_back(row);
    }

    std::vector<double> toks, walls, peaks, counts;
    for (const Row& r : res.rows) {
        if (!r.ok) continue;
        toks.push_back(static_cast<double>(r.t * r.h * r.w));
        walls.push_back(r.wall_ms);
        peaks.push_back(static_cast<double>(r.peak_bytes));
        counts.push_back(static_cast<double>(r.flops));
    }
    if (toks.size() >= 2) {
        res.peak_slope = fit_loglog_slope(toks, peaks);
        res.flops_slope = fit_loglog_slope(toks, counts);
        bool wall_ok = true;
        for (double v : walls) wall_ok = wall_ok && v > 0.0;
        if (wall_ok) res.wall_slope = fit_loglog_slope(toks, walls);
    }
    return res;
}

inline std::string to_csv(const std::vector<Row>& rows) {
    std::string out = "kind,T,H,W,D,wall_ms,peak_bytes,flops,status\n";
    for (const Row& r : rows) {
        char wall[32];
        std::snprintf(wall, sizeof(wall), "%.3f", r.wall_ms);
        out += str_cat(kind_name(r.kind), ",", r.t, ",", r.h, ",", r.w, ",", r.d, ",", wall, ",",
                       r.peak_bytes, ",", r.flops, ",", r.ok ? "ok" : "exhausted", "\n");
    }
    return out;
}

}  // namespace vivim::bench
