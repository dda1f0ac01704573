#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vivim/common.hpp"
#include "vivim/tensor.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Region-overlap metrics.
//
// Predictions are probabilities binarised at a threshold (p >= t counts as
// foreground); ground truth is strictly binary. Empty-set conventions: a 0/0
// ratio is 1 when prediction and ground truth are both empty and 0 when
// exactly one of them is. With these conventions jaccard == dice/(2 - dice)
// holds at every threshold, including the degenerate ones.
// ---------------------------------------------------------------------------

struct RegionMetrics {
    double dice = 0.0;
    double jaccard = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

struct SweepMaxima {
    double max_dice = 0.0;
    double max_spe = 0.0;
    double max_iou = 0.0;
};

// Everything the evaluation harness reports per clip.
struct MetricReport {
    double dice = 0.0;
    double jaccard = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double mae = 0.0;
    double max_dice = 0.0;
    double max_spe = 0.0;
    double max_iou = 0.0;
};

namespace detail {

inline void require_same_numel(const Tensor& pred, const Tensor& gt, const char* what) {
    if (!pred.defined() || !gt.defined()) throw ShapeError(str_cat(what, ": undefined operand"));
    if (pred.shape() != gt.shape())
        throw ShapeError(str_cat(what, ": shape mismatch ", shape_str(pred.shape()), " vs ",
                                 shape_str(gt.shape())));
}

inline void require_binary_mask(const Tensor& gt, const char* what) {
    const double* g = gt.data();
    for (std::size_t i = 0; i < gt.numel(); ++i)
        if (g[i] != 0.0 && g[i] != 1.0)
            throw NumericError(str_cat(what, ": ground truth must be binary"));
}

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t p() const { return tp + fp; }
    std::size_t g() const { return tp + fn; }
};

inline ConfusionCounts count_confusion(const Tensor& pred, const Tensor& gt, double threshold) {
    ConfusionCounts c;
    const double* pd = pred.data();
    const double* gd = gt.data();
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const bool p = pd[i] >= threshold;
        const bool g = gd[i] != 0.0;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

// num/den with den == 0 resolved by the empty-set convention above.
inline double overlap_ratio(std::size_t num, std::size_t den, bool both_empty) {
    if (den == 0) return both_empty ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
}

inline RegionMetrics metrics_from_counts(const ConfusionCounts& c) {
    const bool both_empty = c.p() == 0 && c.g() == 0;
    RegionMetrics m;
    m.dice = overlap_ratio(2 * c.tp, c.p() + c.g(), both_empty);
    m.jaccard = overlap_ratio(c.tp, c.p() + c.g() - c.tp, both_empty);
    m.precision = overlap_ratio(c.tp, c.p(), both_empty);
    m.recall = overlap_ratio(c.tp, c.g(), both_empty);
    return m;
}

}  // namespace detail

inline RegionMetrics region_metrics(const Tensor& pred, const Tensor& gt,
                                    double threshold = 0.5) {
    detail::require_same_numel(pred, gt, "region_metrics");
    detail::require_binary_mask(gt, "region_metrics");
    return detail::metrics_from_counts(detail::count_confusion(pred, gt, threshold));
}

// Maxima of dice, specificity and IoU over `levels` thresholds k/levels,
// k = 0..levels-1. Specificity = TN/(TN+FP); with no negatives in the ground
// truth the ratio is vacuous and counts as 1.
inline SweepMaxima threshold_sweep(const Tensor& pred, const Tensor& gt,
                                   std::size_t levels = 256) {
    detail::require_same_numel(pred, gt, "threshold_sweep");
    detail::require_binary_mask(gt, "threshold_sweep");
    if (levels == 0) throw Error("threshold_sweep: levels must be positive");
    SweepMaxima out;
    for (std::size_t k = 0; k < levels; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(levels);
        const detail::ConfusionCounts c = detail::count_confusion(pred, gt, t);
        const RegionMetrics m = detail::metrics_from_counts(c);
        const double spe = (c.tn + c.fp) == 0
                               ? 1.0
                               : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
        out.max_dice = std::max(out.max_dice, m.dice);
        out.max_spe = std::max(out.max_spe, spe);
        out.max_iou = std::max(out.max_iou, m.jaccard);
    }
    return out;
}

inline double mae(const Tensor& pred, const Tensor& gt) {
    detail::require_same_numel(pred, gt, "mae");
    const double* pd = pred.data();
    const double* gd = gt.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) acc += std::abs(pd[i] - gd[i]);
    return acc / static_cast<double>(pred.numel());
}

inline MetricReport full_report(const Tensor& pred, const Tensor& gt) {
    const RegionMetrics r = region_metrics(pred, gt);
    const SweepMaxima s = threshold_sweep(pred, gt);
    MetricReport rep;
    rep.dice = r.dice;
    rep.jaccard = r.jaccard;
    rep.precision = r.precision;
    rep.recall = r.recall;
    rep.mae = mae(pred, gt);
    rep.max_dice = s.max_dice;
    rep.max_spe = s.max_spe;
    rep.max_iou = s.max_iou;
    return rep;
}

// ---------------------------------------------------------------------------
// Analytic operation counts for TM tokens of D channels.
//   attention: 4*TM*D^2 + 2*TM^2*D   (QKV + output projections, QK^T, AV)
//   ssm:       4*TM*(2D)*N + TM*(2D)*N^2   (expansion ratio 2, state size N)
// Exact integer arithmetic; quadratic vs linear in TM is the property the
// scaling benchmark checks empirically.
// ---------------------------------------------------------------------------

inline std::uint64_t flops_attention(std::uint64_t tm, std::uint64_t d) {
    return 4 * tm * d * d + 2 * tm * tm * d;
}

inline std::uint64_t flops_ssm(std::uint64_t tm, std::uint64_t d, std::uint64_t n = 16) {
    const std::uint64_t e = 2 * d;
    return 4 * tm * e * n + tm * e * n * n;
}

// Least-squares slope of log(y) against log(x). Both coordinates must be
// strictly positive; at least two points.
inline double fit_loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ShapeError("fit_loglog_slope: length mismatch");
    if (xs.size() < 2) throw Error("fit_loglog_slope: need at least two points");
    std::vector<double> lx(xs.size()), ly(ys.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i] <= 0.0 || ys[i] <= 0.0)
            throw NumericError("fit_loglog_slope: coordinates must be positive");
        lx[i] = std::log(xs[i]);
        ly[i] = std::log(ys[i]);
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= static_cast<double>(lx.size());
    my /= static_cast<double>(lx.size());
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    if (sxx == 0.0) throw NumericError("fit_loglog_slope: degenerate x range");
    return sxy / sxx;
}

}  // namespace vivim
