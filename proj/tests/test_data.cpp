#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "testing.hpp"
#include "vivim/data.hpp"

using namespace vivim;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() / str_cat("vivim_data_", tag, "_", ::getpid());
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("clip generation is a pure function of the seed") {
    VideoClip a = generate_clip(7, 4, 32, 48);
    VideoClip b = generate_clip(7, 4, 32, 48);
    VideoClip c = generate_clip(8, 4, 32, 48);
    CHECK(a.frames.to_vector() == b.frames.to_vector());
    CHECK(a.masks.to_vector() == b.masks.to_vector());
    CHECK(a.frames.to_vector() != c.frames.to_vector());
    CHECK(a.seed == 7);
}

TEST_CASE("generated clips satisfy the geometry contract") {
    for (std::uint64_t seed : {1, 2, 3, 11, 42, 101, 500}) {
        VideoClip clip = generate_clip(seed, 5, 64, 64);
        REQUIRE(clip.frames.shape() == Shape{5, 3, 64, 64});
        REQUIRE(clip.masks.shape() == Shape{5, 1, 64, 64});
        const double* f = clip.frames.data();
        const double* m = clip.masks.data();
        for (std::size_t i = 0; i < clip.frames.numel(); ++i) {
            CHECK(f[i] >= 0.0);
            CHECK(f[i] <= 1.0);
        }
        // Grayscale replicated across the three channels.
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t px = 0; px < 64 * 64; ++px) {
                const double v = f[(t * 3) * 64 * 64 + px];
                CHECK(f[(t * 3 + 1) * 64 * 64 + px] == v);
                CHECK(f[(t * 3 + 2) * 64 * 64 + px] == v);
            }
        for (std::size_t t = 0; t < 5; ++t) {
            std::size_t fg = 0;
            for (std::size_t px = 0; px < 64 * 64; ++px) {
                const double v = m[t * 64 * 64 + px];
                CHECK((v == 0.0 || v == 1.0));
                fg += v == 1.0;
            }
            const double frac = static_cast<double>(fg) / (64.0 * 64.0);
            CHECK(frac >= 0.02);
            CHECK(frac <= 0.30);
        }
    }
}

TEST_CASE("foreground is brighter than background on average") {
    VideoClip clip = generate_clip(13, 3, 64, 64, 0.3);
    const double* f = clip.frames.data();
    const double* m = clip.masks.data();
    double fg = 0.0, bg = 0.0;
    std::size_t nfg = 0, nbg = 0;
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t px = 0; px < 64 * 64; ++px) {
            const double v = f[(t * 3) * 64 * 64 + px];
            if (m[t * 64 * 64 + px] == 1.0) {
                fg += v;
                ++nfg;
            } else {
                bg += v;
                ++nbg;
            }
        }
    CHECK(fg / nfg > bg / nbg + 0.05);
}

TEST_CASE("higher difficulty narrows the contrast gap") {
    auto gap = [](double difficulty) {
        VideoClip clip = generate_clip(29, 2, 64, 64, difficulty);
        const double* f = clip.frames.data();
        const double* m = clip.masks.data();
        double fg = 0.0, bg = 0.0;
        std::size_t nfg = 0, nbg = 0;
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t px = 0; px < 64 * 64; ++px) {
                const double v = f[(t * 3) * 64 * 64 + px];
                if (m[t * 64 * 64 + px] == 1.0) {
                    fg += v;
                    ++nfg;
                } else {
                    bg += v;
                    ++nbg;
                }
            }
        return fg / nfg - bg / nbg;
    };
    CHECK(gap(0.0) > gap(0.9) + 0.05);
}

TEST_CASE("generator argument validation") {
    CHECK_THROWS_AS(generate_clip(1, 0, 64, 64), Error);
    CHECK_THROWS_AS(generate_clip(1, 2, 4, 64), Error);
    CHECK_THROWS_AS(generate_clip(1, 2, 64, 64, 1.5), Error);
}

TEST_CASE("pgm round trips") {
    const fs::path dir = fresh_dir("pgm");
    SUBCASE("binary mask is exact") {
        Tensor mask({9, 7});
        Rng rng(3);
        for (std::size_t i = 0; i < mask.numel(); ++i)
            mask.mut_data()[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
        write_pgm(dir / "m.pgm", mask);
        Tensor back = read_pgm(dir / "m.pgm");
        CHECK(back.shape() == mask.shape());
        CHECK(back.to_vector() == mask.to_vector());
    }
    SUBCASE("gray image within quantisation error") {
        Tensor img({5, 11});
        Rng rng(4);
        for (std::size_t i = 0; i < img.numel(); ++i) img.mut_data()[i] = rng.uniform();
        write_pgm(dir / "g.pgm", img);
        Tensor back = read_pgm(dir / "g.pgm");
        CHECK(vtest::max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);
        // Re-encoding the quantised image is byte-stable.
        write_pgm(dir / "g2.pgm", back);
        CHECK(file_bytes(dir / "g.pgm") == file_bytes(dir / "g2.pgm"));
    }
    SUBCASE("comments in the header are skipped") {
        std::ofstream out(dir / "c.pgm", std::ios::binary);
        out << "P5\n# synthetic\n2 2\n# another\n255\n";
        const unsigned char px[4] = {0, 85, 170, 255};
        out.write(reinterpret_cast<const char*>(px), 4);
        out.close();
        Tensor t = read_pgm(dir / "c.pgm");
        CHECK(t.shape() == Shape{2, 2});
        CHECK(t.data()[3] == 1.0);
    }
    fs::remove_all(dir);
}

TEST_CASE("pgm format errors") {
    const fs::path dir = fresh_dir("pgmbad");
    CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), FormatError);
    {
        std::ofstream out(dir / "p2.pgm", std::ios::binary);
        out << "P2\n2 2\n255\n0 0 0 0\n";
    }
    CHECK_THROWS_AS(read_pgm(dir / "p2.pgm"), FormatError);
    {
        std::ofstream out(dir / "short.pgm", std::ios::binary);
        out << "P5\n4 4\n255\n";
        out.put(0);
    }
    CHECK_THROWS_AS(read_pgm(dir / "short.pgm"), FormatError);
    {
        std::ofstream out(dir / "max.pgm", std::ios::binary);
        out << "P5\n1 1\n65535\n";
        out.put(0);
        out.put(0);
    }
    CHECK_THROWS_AS(read_pgm(dir / "max.pgm"), FormatError);
    {
        std::ofstream out(dir / "junk.pgm", std::ios::binary);
        out << "P5\ntwo two\n255\n";
    }
    CHECK_THROWS_AS(read_pgm(dir / "junk.pgm"), FormatError);
    CHECK_THROWS_AS(write_pgm(dir / "bad.pgm", Tensor({2, 2, 2})), ShapeError);
    fs::remove_all(dir);
}

TEST_CASE("clip directories round trip") {
    const fs::path dir = fresh_dir("clips");
    VideoClip clip = generate_clip(21, 3, 32, 32);
    clip.clip_id = 5;
    save_clip(clip, dir);
    CHECK(fs::exists(dir / "clip_5" / "frame_0.pgm"));
    CHECK(fs::exists(dir / "clip_5" / "mask_2.pgm"));

    VideoClip back = load_clip(dir, 5);
    CHECK(back.clip_id == 5);
    CHECK(back.frames.shape() == clip.frames.shape());
    CHECK(back.masks.to_vector() == clip.masks.to_vector());
    CHECK(vtest::max_abs_diff(back.frames, clip.frames) <= 0.5 / 255.0 + 1e-12);

    // Second save of the loaded clip reproduces every byte.
    const fs::path dir2 = fresh_dir("clips2");
    back.clip_id = 5;
    save_clip(back, dir2);
    for (std::size_t f = 0; f < 3; ++f) {
        CHECK(file_bytes(dir / "clip_5" / str_cat("frame_", f, ".pgm")) ==
              file_bytes(dir2 / "clip_5" / str_cat("frame_", f, ".pgm")));
        CHECK(file_bytes(dir / "clip_5" / str_cat("mask_", f, ".pgm")) ==
              file_bytes(dir2 / "clip_5" / str_cat("mask_", f, ".pgm")));
    }
    CHECK_THROWS_AS(load_clip(dir, 99), FormatError);
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("train and eval seed pools never intersect") {
    std::set<std::uint64_t> tr, ev;
    for (std::uint64_t s : train_seeds(1000)) tr.insert(s);
    for (std::uint64_t s : eval_seeds(1000)) ev.insert(s);
    CHECK(tr.size() == 1000);
    CHECK(ev.size() == 1000);
    for (std::uint64_t s : tr) {
        CHECK(s % 2 == 0);
        CHECK(ev.count(s) == 0);
    }
    for (std::uint64_t s : ev) CHECK(s % 2 == 1);
}
