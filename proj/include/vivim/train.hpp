#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "vivim/boundary.hpp"
#include "vivim/checkpoint.hpp"
#include "vivim/config.hpp"
#include "vivim/data.hpp"
#include "vivim/metrics.hpp"
#include "vivim/net.hpp"
#include "vivim/optim.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Training harness.
//
// The network shape is a desk-scale instance of the architecture (quarter
// channels, one scan layer per stage) chosen so the default 200-clip,
// 20-epoch run finishes on one CPU core well inside half an hour. Scan and
// constraint toggles come straight from the config, which is how the
// ablation grid is expressed.
// ---------------------------------------------------------------------------

inline VivimConfig net_config_for(const TrainConfig& cfg) {
    VivimConfig vc;
    vc.frames = cfg.frames;
    vc.height = cfg.size;
    vc.width = cfg.size;
    vc.channels = {16, 32, 64, 128};
    vc.n_mamba = {1, 1, 1, 1};
    vc.reduction = {8, 4, 2, 1};
    vc.heads = {1, 2, 4, 8};
    vc.n_state = 16;
    vc.c_dec = 64;
    vc.scan_tf = cfg.scan_tf;
    vc.scan_tb = cfg.scan_tb;
    vc.scan_sp = cfg.scan_sp;
    vc.boundary_head = cfg.bac;
    return vc;
}

struct StepLog {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double l_seg = 0.0;
    double l_affine = 0.0;
    double l_bce = 0.0;
    double l_total = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    VivimNet net;
    AffineEstimator estimator;  // meaningful only when has_estimator
    bool has_estimator = false;
    std::vector<StepLog> log;
    double best_val_dice = 0.0;
    std::filesystem::path checkpoint;
};

namespace detail {

// Copies one frame's mask out of [T, 1, H, W] as a plain [H, W] tensor.
inline Tensor frame_mask(const Tensor& masks, std::size_t t) {
    const std::size_t h = masks.dim(2), w = masks.dim(3);
    Tensor m({h, w});
    const double* src = masks.data() + t * h * w;
    std::copy(src, src + h * w, m.mut_data());
    return m;
}

inline double format_cell(double v) { return v == 0.0 ? 0.0 : v; }  // normalises -0

inline std::string fmt6(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6f", format_cell(v));
    return buf;
}

inline std::string fmt_lr(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6e", v);
    return buf;
}

}  // namespace detail

// Loss of one clip: segmentation everywhere, plus - when the estimator is
// given - the affine constraint and boundary cross-entropy on the last
// frame against the first frame's edges.
inline LossBreakdown clip_loss(const VivimNet& net, const Tensor& frames, const Tensor& masks,
                               const AffineEstimator* est, const LossWeights& w,
                               std::size_t patch = 16) {
    VivimNet::Output out = net.forward(frames);
    Tensor seg = segmentation_loss(out.logits, masks);
    Tensor affine, blogits_t, edges_t;
    if (est) {
        if (!out.boundary_logits.defined())
            throw Error("clip_loss: estimator given but the boundary head is off");
        const std::size_t tlast = frames.dim(0) - 1;
        const std::size_t h = frames.dim(2), w_ = frames.dim(3);
        edges_t = sobel_edges(detail::frame_mask(masks, tlast));
        Tensor edges_1 = sobel_edges(detail::frame_mask(masks, 0));
        blogits_t = reshape(slice(out.boundary_logits, 0, tlast, 1), {h, w_});
        Tensor pred = sigmoid(blogits_t);
        std::vector<BoundaryPatchPair> pairs = tile_boundary_patches(pred, edges_t, edges_1, patch);
        affine = affine_constraint_loss(pairs, *est, w);
    }
    return total_loss(seg, affine, blogits_t, edges_t, w);
}

// Mean foreground Dice at threshold 0.5 over a set of clips.
inline double mean_dice(const VivimNet& net, const std::vector<VideoClip>& clips) {
    NoGradGuard ng;
    double acc = 0.0;
    for (const VideoClip& clip : clips) {
        VivimNet::Output out = net.forward(clip.frames);
        acc += region_metrics(sigmoid(out.logits), clip.masks).dice;
    }
    return clips.empty() ? 0.0 : acc / static_cast<double>(clips.size());
}

inline std::string train_log_csv(const std::vector<StepLog>& log) {
    std::string out = "step,epoch,l_seg,l_affine,l_bce,l_total,lr\n";
    for (const StepLog& s : log)
        out += str_cat(s.step, ",", s.epoch, ",", detail::fmt6(s.l_seg), ",",
                       detail::fmt6(s.l_affine), ",", detail::fmt6(s.l_bce), ",",
                       detail::fmt6(s.l_total), ",", detail::fmt_lr(s.lr), "\n");
    return out;
}

// Called after each epoch's validation pass; `saved` marks a new best checkpoint.
using EpochCallback = std::function<void(std::size_t epoch, double val_dice, bool saved)>;

inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                         const EpochCallback& on_epoch = {}) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream echo(out_dir / "config.txt");
        echo << config_to_text(cfg);
    }

    Rng rng(cfg.seed);
    TrainResult res;
    res.net.init(net_config_for(cfg), rng);
    res.net.visit_params([](const std::string&, Tensor& t) { t.set_requires_grad(true); });

    if (cfg.bac) {
        if (!cfg.affine_ckpt.empty()) {
            Rng erng(cfg.seed);
            res.estimator.init(16, erng);
            checkpoint_load_estimator(cfg.affine_ckpt, res.estimator);
            res.estimator.freeze();
        } else {
            res.estimator = pretrain_affine_estimator(2 * cfg.seed + 1001, 3000);
        }
        res.has_estimator = true;
    }

    std::vector<VideoClip> clips;
    clips.reserve(cfg.train_clips);
    for (std::size_t i = 0; i < cfg.train_clips; ++i) {
        clips.push_back(generate_clip(train_seed(i), cfg.frames, cfg.size, cfg.size,
                                      cfg.difficulty));
        clips.back().clip_id = i;
    }
    std::vector<VideoClip> val;
    const std::size_t n_val = std::min<std::size_t>(8, cfg.eval_clips);
    for (std::size_t i = 0; i < n_val; ++i)
        val.push_back(generate_clip(eval_seed(i), cfg.frames, cfg.size, cfg.size,
                                    cfg.difficulty));

    Adam opt;
    res.net.visit_params([&](const std::string&, Tensor& t) { opt.add_param(t); });
    LossWeights w;
    w.lambda1 = cfg.bac ? cfg.lambda1 : 0.0;
    w.lambda2 = cfg.bac ? cfg.lambda2 : 0.0;
    const AffineEstimator* est = res.has_estimator ? &res.estimator : nullptr;

    const std::size_t steps_per_epoch = cfg.train_clips / cfg.batch;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    res.best_val_dice = -std::numeric_limits<double>::infinity();
    res.checkpoint = out_dir / "best.ckpt";

    std::vector<std::size_t> order(cfg.train_clips);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            StepLog entry;
            entry.step = step;
            entry.epoch = epoch;
            const double t01 =
                total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1)
                                : 0.0;
            entry.lr = cfg.lr_start * std::pow(cfg.lr_end / cfg.lr_start, t01);
            try {
                opt.zero_grad();
                for (std::size_t k = 0; k < cfg.batch; ++k) {
                    const VideoClip& clip = clips[order[b * cfg.batch + k]];
                    LossBreakdown lb = clip_loss(res.net, clip.frames, clip.masks, est, w);
                    mul_scalar(lb.total, 1.0 / static_cast<double>(cfg.batch)).backward();
                    const double inv = 1.0 / static_cast<double>(cfg.batch);
                    entry.l_seg += inv * lb.seg.item();
                    entry.l_total += inv * lb.total.item();
                    if (lb.affine.defined()) entry.l_affine += inv * lb.affine.item();
                    if (lb.bce.defined()) entry.l_bce += inv * lb.bce.item();
                    if (!std::isfinite(entry.l_total))
                        throw NumericError("non-finite total loss");
                }
                opt.clip_global_norm(1.0);
                opt.step(entry.lr);
            } catch (const NumericError& e) {
                throw NumericError(str_cat("train: aborted at step ", step, " (epoch ", epoch,
                                           "): ", e.what()));
            }
            res.log.push_back(entry);
            ++step;
        }
        const double vd = mean_dice(res.net, val);
        const bool improved = vd > res.best_val_dice;
        if (improved) {
            res.best_val_dice = vd;
            checkpoint_save_model(res.checkpoint, res.net,
                                  res.has_estimator ? &res.estimator : nullptr);
        }
        if (on_epoch) on_epoch(epoch, vd, improved);
    }

    std::ofstream log_out(out_dir / "train_log.csv", std::ios::binary);
    log_out << train_log_csv(res.log);
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation over the held-out pool. Indices map through eval_seed(), so a
// training seed can never slip in; the guard stays as an explicit assertion.
// ---------------------------------------------------------------------------

struct EvalRow {
    std::uint64_t seed = 0;
    MetricReport rep;
};

struct EvalSummary {
    std::vector<EvalRow> rows;
    MetricReport mean;
};

inline MetricReport evaluate_clip(const VivimNet& net, const VideoClip& clip) {
    NoGradGuard ng;
    VivimNet::Output out = net.forward(clip.frames);
    return full_report(sigmoid(out.logits), clip.masks);
}

inline EvalSummary evaluate_pool(const VivimNet& net, const TrainConfig& cfg,
                                 std::size_t first_index, std::size_t count) {
    if (count == 0) throw Error("evaluate_pool: need at least one clip");
    EvalSummary sum;
    for (std::size_t i = first_index; i < first_index + count; ++i) {
        EvalRow row;
        row.seed = eval_seed(i);
        if (row.seed % 2 == 0) throw Error("evaluate_pool: drew a training-pool seed");
        VideoClip clip = generate_clip(row.seed, cfg.frames, cfg.size, cfg.size, cfg.difficulty);
        row.rep = evaluate_clip(net, clip);
        sum.rows.push_back(row);
    }
    const double n = static_cast<double>(sum.rows.size());
    for (const EvalRow& r : sum.rows) {
        sum.mean.dice += r.rep.dice / n;
        sum.mean.jaccard += r.rep.jaccard / n;
        sum.mean.precision += r.rep.precision / n;
        sum.mean.recall += r.rep.recall / n;
        sum.mean.mae += r.rep.mae / n;
        sum.mean.max_dice += r.rep.max_dice / n;
        sum.mean.max_spe += r.rep.max_spe / n;
        sum.mean.max_iou += r.rep.max_iou / n;
    }
    return sum;
}

inline std::string eval_csv(const EvalSummary& sum) {
    std::string out = "seed,dice,jaccard,precision,recall,mae,max_dice,max_spe,max_iou\n";
    auto line = [](const std::string& tag, const MetricReport& r) {
        return str_cat(tag, ",", detail::fmt6(r.dice), ",", detail::fmt6(r.jaccard), ",",
                       detail::fmt6(r.precision), ",", detail::fmt6(r.recall), ",",
                       detail::fmt6(r.mae), ",", detail::fmt6(r.max_dice), ",",
                       detail::fmt6(r.max_spe), ",", detail::fmt6(r.max_iou), "\n");
    };
    for (const EvalRow& r : sum.rows) out += line(str_cat(r.seed), r.rep);
    out += line("mean", sum.mean);
    return out;
}

inline std::string eval_text(const EvalSummary& sum) {
    return str_cat("clips evaluated: ", sum.rows.size(), "\n",
                   "mean dice:      ", detail::fmt6(sum.mean.dice), "\n",
                   "mean jaccard:   ", detail::fmt6(sum.mean.jaccard), "\n",
                   "mean precision: ", detail::fmt6(sum.mean.precision), "\n",
                   "mean recall:    ", detail::fmt6(sum.mean.recall), "\n",
                   "mean mae:       ", detail::fmt6(sum.mean.mae), "\n",
                   "mean max dice:  ", detail::fmt6(sum.mean.max_dice), "\n",
                   "mean max spe:   ", detail::fmt6(sum.mean.max_spe), "\n",
                   "mean max iou:   ", detail::fmt6(sum.mean.max_iou), "\n");
}

}  // namespace vivim
