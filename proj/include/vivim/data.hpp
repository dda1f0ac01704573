#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vivim/common.hpp"
#include "vivim/rng.hpp"
#include "vivim/tensor.hpp"

namespace vivim {

// ---------------------------------------------------------------------------
// Synthetic ultrasound-like clips.
//
// Each clip is 1-2 soft-edged ellipses drifting over a darker background
// under a small random walk of center and axes, with per-frame
// multiplicative speckle on top. The mask is the exact ellipse interior
// (hard q <= 1 test), so the soft intensity edge and the noise are the only
// things separating the task from thresholding. Difficulty in [0, 1]
// shrinks the foreground/background contrast.
//
// Geometry that leaves the frame or puts the per-frame union area outside
// [2%, 30%] of the pixels is re-sampled by continuing the same generator
// stream, so a seed always maps to one fixed clip.
// ---------------------------------------------------------------------------

struct VideoClip {
    std::uint64_t clip_id = 0;
    std::uint64_t seed = 0;
    Tensor frames;  // [T, 3, H, W], grayscale replicated, values in [0, 1]
    Tensor masks;   // [T, 1, H, W], binary
};

namespace detail {

struct EllipseState {
    double cx, cy, ax, ay, phi;
};

// Exact axis-aligned half-extents of a rotated ellipse.
inline double ellipse_bx(const EllipseState& e) {
    return std::sqrt(e.ax * e.ax * std::cos(e.phi) * std::cos(e.phi) +
                     e.ay * e.ay * std::sin(e.phi) * std::sin(e.phi));
}
inline double ellipse_by(const EllipseState& e) {
    return std::sqrt(e.ax * e.ax * std::sin(e.phi) * std::sin(e.phi) +
                     e.ay * e.ay * std::cos(e.phi) * std::cos(e.phi));
}

// Squared normalized ellipse radius at a pixel center: q <= 1 is inside.
inline double ellipse_q(const EllipseState& e, double x, double y) {
    const double dx = x - e.cx, dy = y - e.cy;
    const double u = (dx * std::cos(e.phi) + dy * std::sin(e.phi)) / e.ax;
    const double v = (-dx * std::sin(e.phi) + dy * std::cos(e.phi)) / e.ay;
    return u * u + v * v;
}

}  // namespace detail

inline VideoClip generate_clip(std::uint64_t seed, std::size_t t, std::size_t h, std::size_t w,
                               double difficulty = 0.5) {
    if (t == 0) throw Error("generate_clip: need at least one frame");
    if (h < 8 || w < 8) throw Error("generate_clip: frame too small");
    if (difficulty < 0.0 || difficulty > 1.0)
        throw Error("generate_clip: difficulty must lie in [0, 1]");
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

    const double area = static_cast<double>(h * w);
    const double lo_frac = 0.02, hi_frac = 0.30;
    std::vector<std::vector<detail::EllipseState>> paths;  // [ellipse][frame]
    std::vector<double> mask_union;

    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
        const std::size_t n_ell = rng.uniform() < 0.4 ? 2 : 1;
        paths.assign(n_ell, {});
        for (std::size_t e = 0; e < n_ell; ++e) {
            const double frac = rng.uniform(0.045, 0.13);
            const double aspect = rng.uniform(0.55, 1.8);
            detail::EllipseState s;
            s.ax = std::sqrt(frac * area * aspect / 3.14159265358979323846);
            s.ay = s.ax / aspect;
            s.phi = rng.uniform(0.0, 3.14159265358979323846);
            s.cx = rng.uniform(0.22 * w, 0.78 * w);
            s.cy = rng.uniform(0.22 * h, 0.78 * h);
            paths[e].push_back(s);
            for (std::size_t f = 1; f < t; ++f) {
                detail::EllipseState nx = paths[e].back();
                nx.cx += rng.normal(0.0, 0.018 * w);
                nx.cy += rng.normal(0.0, 0.018 * h);
                nx.ax *= 1.0 + rng.normal(0.0, 0.03);
                nx.ay *= 1.0 + rng.normal(0.0, 0.03);
                nx.phi += rng.normal(0.0, 0.05);
                paths[e].push_back(nx);
            }
        }

        bool ok = true;
        for (std::size_t e = 0; e < n_ell && ok; ++e) {
            for (const detail::EllipseState& s : paths[e]) {
                if (s.ax < 2.0 || s.ay < 2.0) ok = false;
                const double bx = detail::ellipse_bx(s), by = detail::ellipse_by(s);
                if (s.cx - bx < 1.0 || s.cx + bx > w - 2.0) ok = false;
                if (s.cy - by < 1.0 || s.cy + by > h - 2.0) ok = false;
                if (!ok) break;
            }
        }
        if (!ok) continue;

        mask_union.assign(t * h * w, 0.0);
        for (std::size_t f = 0; f < t && ok; ++f) {
            std::size_t fg = 0;
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t c = 0; c < w; ++c) {
                    bool inside = false;
                    for (std::size_t e = 0; e < n_ell; ++e)
                        inside = inside ||
                                 detail::ellipse_q(paths[e][f], c + 0.5, r + 0.5) <= 1.0;
                    if (inside) {
                        mask_union[(f * h + r) * w + c] = 1.0;
                        ++fg;
                    }
                }
            const double frac = static_cast<double>(fg) / area;
            if (frac < lo_frac || frac > hi_frac) ok = false;
        }
        placed = ok;
    }
    if (!placed) throw Error(str_cat("generate_clip: no valid geometry for seed ", seed));

    const double bg = 0.35 + rng.uniform(-0.05, 0.05);
    const double gap = 0.45 * (1.0 - 0.7 * difficulty);
    const double edge_width = 0.30;
    const double speckle = 0.18;

    VideoClip clip;
    clip.seed = seed;
    clip.frames = Tensor({t, 3, h, w});
    clip.masks = Tensor({t, 1, h, w});
    double* fd = clip.frames.mut_data();
    double* md = clip.masks.mut_data();
    for (std::size_t f = 0; f < t; ++f)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                double v = bg;
                for (const auto& path : paths) {
                    const double q = detail::ellipse_q(path[f], c + 0.5, r + 0.5);
                    double s = (1.0 - q) / edge_width;
                    s = std::clamp(s, 0.0, 1.0);
                    v += gap * s * s * (3.0 - 2.0 * s);
                }
                v *= 1.0 + speckle * rng.normal();
                v = std::clamp(v, 0.0, 1.0);
                const std::size_t px = r * w + c;
                for (std::size_t ch = 0; ch < 3; ++ch)
                    fd[((f * 3 + ch) * h + r) * w + c] = v;
                md[(f * h) * w + px] = mask_union[(f * h + r) * w + c];
            }
    return clip;
}

// ---------------------------------------------------------------------------
// Binary portable graymap I/O (P5, maxval 255). Frames quantise to 8 bits;
// masks use {0, 255} and round-trip exactly.
// ---------------------------------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, const Tensor& img) {
    if (img.rank() != 2) throw ShapeError("write_pgm: image must be [H, W]");
    const std::size_t h = img.dim(0), w = img.dim(1);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(str_cat("write_pgm: cannot open ", path.string()));
    out << "P5\n" << w << " " << h << "\n255\n";
    const double* d = img.data();
    std::vector<unsigned char> row(w);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const double v = std::clamp(d[r * w + c], 0.0, 1.0);
            row[c] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w));
    }
    if (!out) throw FormatError(str_cat("write_pgm: short write to ", path.string()));
}

namespace detail {

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string pgm_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = in.get();
        c = in.get();
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

}  // namespace detail

inline Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(str_cat("read_pgm: cannot open ", path.string()));
    if (detail::pgm_token(in) != "P5")
        throw FormatError(str_cat("read_pgm: not a P5 graymap: ", path.string()));
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(detail::pgm_token(in));
        h = std::stoul(detail::pgm_token(in));
        maxval = std::stoul(detail::pgm_token(in));
    } catch (const std::exception&) {
        throw FormatError(str_cat("read_pgm: malformed header in ", path.string()));
    }
    if (w == 0 || h == 0 || maxval != 255)
        throw FormatError(str_cat("read_pgm: unsupported geometry/maxval in ", path.string()));
    std::vector<unsigned char> bytes(w * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw FormatError(str_cat("read_pgm: truncated pixel data in ", path.string()));
    Tensor img({h, w});
    double* d = img.mut_data();
    for (std::size_t i = 0; i < bytes.size(); ++i)
        d[i] = static_cast<double>(bytes[i]) / 255.0;
    return img;
}

// ---------------------------------------------------------------------------
// Clip directories: clip_<id>/frame_<t>.pgm + clip_<id>/mask_<t>.pgm.
// ---------------------------------------------------------------------------

inline std::filesystem::path clip_dir(const std::filesystem::path& root, std::uint64_t id) {
    return root / str_cat("clip_", id);
}

inline void save_clip(const VideoClip& clip, const std::filesystem::path& root) {
    const std::size_t t = clip.frames.dim(0), h = clip.frames.dim(2), w = clip.frames.dim(3);
    const std::filesystem::path dir = clip_dir(root, clip.clip_id);
    std::filesystem::create_directories(dir);
    for (std::size_t f = 0; f < t; ++f) {
        Tensor gray({h, w});
        Tensor mask({h, w});
        for (std::size_t i = 0; i < h * w; ++i) {
            gray.mut_data()[i] = clip.frames.data()[(f * 3) * h * w + i];
            mask.mut_data()[i] = clip.masks.data()[f * h * w + i];
        }
        write_pgm(dir / str_cat("frame_", f, ".pgm"), gray);
        write_pgm(dir / str_cat("mask_", f, ".pgm"), mask);
    }
}

inline VideoClip load_clip(const std::filesystem::path& root, std::uint64_t id) {
    const std::filesystem::path dir = clip_dir(root, id);
    if (!std::filesystem::exists(dir))
        throw FormatError(str_cat("load_clip: missing directory ", dir.string()));
    std::size_t t = 0;
    while (std::filesystem::exists(dir / str_cat("frame_", t, ".pgm"))) ++t;
    if (t == 0) throw FormatError(str_cat("load_clip: no frames under ", dir.string()));
    VideoClip clip;
    clip.clip_id = id;
    for (std::size_t f = 0; f < t; ++f) {
        Tensor gray = read_pgm(dir / str_cat("frame_", f, ".pgm"));
        Tensor mask = read_pgm(dir / str_cat("mask_", f, ".pgm"));
        if (gray.shape() != mask.shape())
            throw FormatError(str_cat("load_clip: frame/mask size mismatch at frame ", f));
        const std::size_t h = gray.dim(0), w = gray.dim(1);
        if (f == 0) {
            clip.frames = Tensor({t, 3, h, w});
            clip.masks = Tensor({t, 1, h, w});
        } else if (h != clip.frames.dim(2) || w != clip.frames.dim(3)) {
            throw FormatError("load_clip: inconsistent frame sizes");
        }
        for (std::size_t i = 0; i < h * w; ++i) {
            for (std::size_t ch = 0; ch < 3; ++ch)
                clip.frames.mut_data()[((f * 3 + ch) * h) * w + i] = gray.data()[i];
            clip.masks.mut_data()[f * h * w + i] = mask.data()[i] >= 0.5 ? 1.0 : 0.0;
        }
    }
    return clip;
}

// ---------------------------------------------------------------------------
// Seed pools. Training uses even seeds, evaluation odd ones, so the two
// pools are disjoint by construction no matter how many clips either side
// draws.
// ---------------------------------------------------------------------------

inline std::uint64_t train_seed(std::uint64_t i) { return 2 * i; }
inline std::uint64_t eval_seed(std::uint64_t i) { return 2 * i + 1; }

inline std::vector<std::uint64_t> train_seeds(std::size_t n) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = train_seed(i);
    return s;
}

inline std::vector<std::uint64_t> eval_seeds(std::size_t n) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = eval_seed(i);
    return s;
}

}  // namespace vivim
