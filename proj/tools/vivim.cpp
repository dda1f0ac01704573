// Command line front end: data generation, estimator pretraining, training,
// held-out evaluation, the scaling benchmark, and a quick self test.

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vivim/bench.hpp"
#include "vivim/checkpoint.hpp"
#include "vivim/train.hpp"

using namespace vivim;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(str_cat("cannot open for writing: ", path.string()));
    out << text;
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenArgs {
    std::uint64_t seed = 0;
    std::size_t count = 1;
    std::size_t frames = 5;
    std::size_t size = 64;
    double difficulty = 0.5;
    std::string out;
};

int run_gen(const GenArgs& a) {
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < a.count; ++i) {
        VideoClip clip = generate_clip(a.seed + i, a.frames, a.size, a.size, a.difficulty);
        clip.clip_id = i;
        save_clip(clip, a.out);
        std::cout << "clip " << i << "  seed " << clip.seed << "  -> "
                  << clip_dir(a.out, i).string() << "\n";
    }
    std::cout << a.count << " clip(s), " << a.frames << " frames of " << a.size << "x"
              << a.size << " each\n";
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain-affine
// ---------------------------------------------------------------------------

struct PretrainArgs {
    std::uint64_t seed = 7;
    std::size_t steps = 3000;
    std::string out;
};

int run_pretrain(const PretrainArgs& a) {
    const auto t0 = std::chrono::steady_clock::now();
    AffineEstimator est = pretrain_affine_estimator(a.seed, a.steps);
    std::size_t n_params = 0;
    est.visit_params("", [&](const std::string&, Tensor& t) { n_params += t.numel(); });
    checkpoint_save_estimator(a.out, est);
    std::printf("pretrained affine estimator: %zu steps, %zu params, %.1fs -> %s\n", a.steps,
                n_params, seconds_since(t0), a.out.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string out;
    CLI::App* cmd = nullptr;

    // Mirrors of every config key; only the ones the user passed are applied.
    TrainConfig v;

    void apply_overrides(TrainConfig& cfg) const {
        auto passed = [&](const char* name) { return cmd->count(name) > 0; };
        if (passed("--epochs")) cfg.epochs = v.epochs;
        if (passed("--batch")) cfg.batch = v.batch;
        if (passed("--frames")) cfg.frames = v.frames;
        if (passed("--size")) cfg.size = v.size;
        if (passed("--train-clips")) cfg.train_clips = v.train_clips;
        if (passed("--eval-clips")) cfg.eval_clips = v.eval_clips;
        if (passed("--lr-start")) cfg.lr_start = v.lr_start;
        if (passed("--lr-end")) cfg.lr_end = v.lr_end;
        if (passed("--difficulty")) cfg.difficulty = v.difficulty;
        if (passed("--lambda1")) cfg.lambda1 = v.lambda1;
        if (passed("--lambda2")) cfg.lambda2 = v.lambda2;
        if (passed("--seed")) cfg.seed = v.seed;
        if (passed("--affine-ckpt")) cfg.affine_ckpt = v.affine_ckpt;
        if (passed("--scan-tf")) cfg.scan_tf = v.scan_tf;
        if (passed("--scan-tb")) cfg.scan_tb = v.scan_tb;
        if (passed("--scan-sp")) cfg.scan_sp = v.scan_sp;
        if (passed("--bac")) cfg.bac = v.bac;
    }
};

int run_train(const TrainArgs& a) {
    TrainConfig cfg;
    if (!a.config.empty()) cfg = load_train_config(a.config);
    a.apply_overrides(cfg);
    cfg.validate();

    std::cout << "training: " << cfg.train_clips << " clips, " << cfg.epochs << " epochs, "
              << cfg.frames << "x" << cfg.size << "x" << cfg.size << " input, scans tf=" << cfg.scan_tf
              << " tb=" << cfg.scan_tb << " sp=" << cfg.scan_sp << " bac=" << cfg.bac << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res = train(cfg, a.out, [&](std::size_t epoch, double vd, bool saved) {
        std::printf("epoch %3zu/%zu  val dice %.4f%s  [%.0fs]\n", epoch, cfg.epochs, vd,
                    saved ? "  (new best)" : "", seconds_since(t0));
        std::fflush(stdout);
    });
    std::printf("done in %.0fs: best val dice %.4f\n", seconds_since(t0), res.best_val_dice);
    std::cout << "checkpoint: " << res.checkpoint.string() << "\n"
              << "log:        " << (fs::path(a.out) / "train_log.csv").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string seeds = "0..49";
    std::string report;
    std::string config;
};

std::pair<std::size_t, std::size_t> parse_range(const std::string& s) {
    const std::size_t dots = s.find("..");
    if (dots == std::string::npos)
        throw FormatError(str_cat("range must look like A..B, got '", s, "'"));
    std::size_t a = 0, b = 0;
    try {
        a = std::stoull(s.substr(0, dots));
        b = std::stoull(s.substr(dots + 2));
    } catch (const std::exception&) {
        throw FormatError(str_cat("range must look like A..B, got '", s, "'"));
    }
    if (b < a) throw FormatError(str_cat("empty range '", s, "'"));
    return {a, b};
}

int run_eval(const EvalArgs& a) {
    fs::path cfg_path = a.config;
    if (cfg_path.empty()) {
        cfg_path = fs::path(a.checkpoint).parent_path() / "config.txt";
        if (!fs::exists(cfg_path))
            throw Error(str_cat("no config next to checkpoint; pass --config (looked for ",
                                cfg_path.string(), ")"));
    }
    TrainConfig cfg = load_train_config(cfg_path);

    Rng rng(cfg.seed);
    VivimNet net;
    net.init(net_config_for(cfg), rng);
    AffineEstimator est;
    if (cfg.bac) {
        Rng erng(cfg.seed);
        est.init(16, erng);
    }
    checkpoint_load_model(a.checkpoint, net, cfg.bac ? &est : nullptr);

    const auto [lo, hi] = parse_range(a.seeds);
    EvalSummary sum = evaluate_pool(net, cfg, lo, hi - lo + 1);
    write_text(a.report, eval_csv(sum));
    std::cout << eval_text(sum);
    std::cout << "report: " << a.report << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
    std::string kind;
    std::size_t tmin = 2;
    std::size_t tmax = 64;
    std::size_t size = 16;
    std::size_t d = 32;
    std::size_t reps = 5;
    std::size_t mem_limit_mb = 0;
    bool f32 = false;
    std::string out;
};

int run_bench(const BenchArgs& a) {
    std::vector<std::size_t> ts;
    for (std::size_t t = a.tmin; t <= a.tmax; t *= 2) ts.push_back(t);
    const bench::Kind kind = bench::parse_kind(a.kind);

    std::optional<memory::ScopedLimit> cap;
    if (a.mem_limit_mb > 0) cap.emplace(a.mem_limit_mb * std::size_t(1) << 20);

    bench::Result res = a.f32 ? bench::scaling_benchmark<float>(kind, ts, a.size, a.size, a.d,
                                                                a.reps)
                              : bench::scaling_benchmark<double>(kind, ts, a.size, a.size, a.d,
                                                                 a.reps);
    write_text(a.out, bench::to_csv(res.rows));
    for (const bench::Row& r : res.rows) {
        if (r.ok)
            std::printf("T=%4zu  TM=%7zu  %9.3f ms  peak %11zu B  flops %llu\n", r.t,
                        r.t * r.h * r.w, r.wall_ms, r.peak_bytes,
                        static_cast<unsigned long long>(r.flops));
        else
            std::printf("T=%4zu  exhausted memory budget\n", r.t);
    }
    std::printf("log-log slopes vs T*H*W: wall %.3f  peak %.3f  flops %.3f\n", res.wall_slope,
                res.peak_slope, res.flops_slope);
    std::cout << "csv: " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// selftest: fast oracle, gradient, and bijection checks.
// ---------------------------------------------------------------------------

struct SelfTest {
    int failures = 0;

    void check(bool ok, const std::string& what) {
        std::cout << (ok ? "ok:   " : "FAIL: ") << what << "\n";
        if (!ok) ++failures;
    }
};

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i)
        t.mut_data()[i] = lo + (hi - lo) * rng.uniform();
    return t;
}

int run_selftest() {
    SelfTest st;

    {  // Dual-route LTI oracle: convolution and recurrence agree.
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            Rng rng(seed);
            Tensor abar = uniform_tensor({4, 8}, rng, 0.05, 0.95);
            Tensor bbar = Tensor::randn({4, 8}, rng);
            Tensor cvec = Tensor::randn({4, 8}, rng);
            Tensor x = Tensor::randn({4, 32}, rng);
            worst = std::max(worst, max_abs_diff(ssm_conv(abar, bbar, cvec, x),
                                                 ssm_recurrent(abar, bbar, cvec, x)));
        }
        st.check(worst < 1e-9, str_cat("ssm conv == recurrent (max diff ", worst, ")"));
    }
    {  // Zero-order hold discretization.
        const ZohCoeffs z = discretize_zoh(-0.5, 2.0, 0.1);
        const bool exact = std::abs(z.abar - std::exp(-0.05)) < 1e-15 &&
                           std::abs(z.bbar - (std::expm1(-0.05) / -0.5 * 2.0)) < 1e-15;
        const ZohCoeffs z0 = discretize_zoh(-0.5, 2.0, 0.0);
        const ZohCoeffs zt = discretize_zoh(-1e-12, 3.0, 1.0);
        st.check(exact && z0.abar == 1.0 && z0.bbar == 0.0 &&
                     std::abs(zt.bbar - 3.0) < 1e-9,
                 "zero-order hold closed form");
    }
    {  // Gradients of the selective scan against finite differences.
        Rng rng(11);
        Tensor delta = uniform_tensor({3, 6}, rng, 0.05, 0.5);
        Tensor bmat = Tensor::randn({4, 6}, rng, 0.5);
        Tensor cmat = Tensor::randn({4, 6}, rng, 0.5);
        Tensor u = Tensor::randn({3, 6}, rng, 0.5);
        Tensor wfix = Tensor::randn({3, 6}, rng);
        std::function<Tensor(const Tensor&)> loss = [&](const Tensor& d) {
            return sum_all(mul(selective_scan_core(d, bmat, cmat, u), wfix));
        };
        const double rel = finite_diff_check<double>(loss, delta);
        st.check(rel < 1e-3, str_cat("selective scan gradient (max rel err ", rel, ")"));
    }
    {  // Scan-order bijections.
        bool ok = true;
        for (std::size_t t : {1, 2, 3})
            for (std::size_t h : {1, 2, 5})
                for (std::size_t w : {2, 3}) {
                    const scan::Layout lay{t, h, w};
                    for (const scan::Perm& p :
                         {scan::temporal_first_perm(lay), scan::spatial_first_perm(lay)}) {
                        ok = ok && scan::is_permutation(p);
                        const scan::Perm id = scan::compose(scan::inverse(p), p);
                        for (std::size_t i = 0; i < id.size(); ++i) ok = ok && id[i] == i;
                        const scan::Perm rr = scan::reversed(scan::reversed(p));
                        ok = ok && rr == p;
                    }
                }
        st.check(ok, "scan permutations invert and compose");
    }
    {  // Flop model pins.
        st.check(flops_attention(1024, 64) == 150994944ULL &&
                     flops_ssm(1024, 64, 16) == 41943040ULL,
                 "flop count pins");
    }
    {  // Sequence flatten round trip.
        Rng rng(3);
        const scan::Layout lay{2, 3, 4};
        Tensor x = Tensor::randn({2, 7, 3, 4}, rng);
        const double d = max_abs_diff(unflatten_sequence(flatten_sequence(x), lay), x);
        st.check(d == 0.0, "sequence flatten round trip");
    }

    std::cout << (st.failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
    return st.failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vivim: selective state-space video segmentation"};
    app.require_subcommand(1);

    GenArgs gen;
    CLI::App* cgen = app.add_subcommand("gen", "generate synthetic clips as PGM directories");
    cgen->add_option("--seed", gen.seed, "seed of the first clip; clip i uses seed+i");
    cgen->add_option("--count", gen.count, "number of clips");
    cgen->add_option("--frames", gen.frames, "frames per clip");
    cgen->add_option("--size", gen.size, "square frame size in pixels");
    cgen->add_option("--difficulty", gen.difficulty, "contrast difficulty in [0,1]");
    cgen->add_option("--out", gen.out, "output directory")->required();

    PretrainArgs pre;
    CLI::App* cpre = app.add_subcommand("pretrain-affine", "pretrain the affine estimator");
    cpre->add_option("--seed", pre.seed, "pretraining seed");
    cpre->add_option("--steps", pre.steps, "optimizer steps");
    cpre->add_option("--out", pre.out, "estimator checkpoint path")->required();

    TrainArgs tr;
    CLI::App* ctr = app.add_subcommand("train", "train a segmentation model");
    ctr->add_option("--config", tr.config, "key = value config file");
    ctr->add_option("--out", tr.out, "output directory")->required();
    ctr->add_option("--epochs", tr.v.epochs, "training epochs");
    ctr->add_option("--batch", tr.v.batch, "clips per optimizer step");
    ctr->add_option("--frames", tr.v.frames, "frames per clip");
    ctr->add_option("--size", tr.v.size, "square frame size, multiple of 32");
    ctr->add_option("--train-clips", tr.v.train_clips, "clips in the training pool");
    ctr->add_option("--eval-clips", tr.v.eval_clips, "clips in the held-out pool");
    ctr->add_option("--lr-start", tr.v.lr_start, "initial learning rate");
    ctr->add_option("--lr-end", tr.v.lr_end, "final learning rate");
    ctr->add_option("--difficulty", tr.v.difficulty, "clip difficulty in [0,1]");
    ctr->add_option("--lambda1", tr.v.lambda1, "affine constraint weight");
    ctr->add_option("--lambda2", tr.v.lambda2, "boundary cross-entropy weight");
    ctr->add_option("--seed", tr.v.seed, "master seed");
    ctr->add_option("--affine-ckpt", tr.v.affine_ckpt, "pretrained estimator checkpoint");
    ctr->add_flag("--scan-tf,!--no-scan-tf", tr.v.scan_tf, "temporal forward scan");
    ctr->add_flag("--scan-tb,!--no-scan-tb", tr.v.scan_tb, "temporal backward scan");
    ctr->add_flag("--scan-sp,!--no-scan-sp", tr.v.scan_sp, "spatial scan");
    ctr->add_flag("--bac,!--no-bac", tr.v.bac, "boundary-aware affine constraint");
    tr.cmd = ctr;

    EvalArgs ev;
    CLI::App* cev = app.add_subcommand("eval", "evaluate a checkpoint on held-out seeds");
    cev->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
    cev->add_option("--seeds", ev.seeds, "held-out pool index range A..B, inclusive");
    cev->add_option("--report", ev.report, "CSV report path")->required();
    cev->add_option("--config", ev.config, "config file (default: config.txt beside checkpoint)");

    BenchArgs be;
    CLI::App* cbe = app.add_subcommand("bench", "wall/memory scaling benchmark");
    cbe->add_option("--kind", be.kind, "st_mamba or full_attention")->required();
    cbe->add_option("--tmin", be.tmin, "shortest clip length");
    cbe->add_option("--tmax", be.tmax, "longest clip length; doubling grid from tmin");
    cbe->add_option("--size", be.size, "square frame size");
    cbe->add_option("--d", be.d, "model width");
    cbe->add_option("--reps", be.reps, "timed repetitions per point");
    cbe->add_option("--mem-limit-mb", be.mem_limit_mb, "tensor memory budget, 0 = unlimited");
    cbe->add_flag("--f32", be.f32, "run the cores in 32-bit floats");
    cbe->add_option("--out", be.out, "CSV output path")->required();

    CLI::App* cst = app.add_subcommand("selftest", "run oracle, gradient, and bijection checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cgen->parsed()) return run_gen(gen);
        if (cpre->parsed()) return run_pretrain(pre);
        if (ctr->parsed()) return run_train(tr);
        if (cev->parsed()) return run_eval(ev);
        if (cbe->parsed()) return run_bench(be);
        if (cst->parsed()) return run_selftest();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
