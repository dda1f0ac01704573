#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include "testing.hpp"
#include "vivim/train.hpp"

using namespace vivim;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const char* tag) {
    fs::path p = fs::temp_directory_path() /
                 ("vivim_train_" + std::string(tag) + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(bool(in));
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Small everything: enough to exercise the loop, fast enough for a test.
TrainConfig tiny_cfg(const fs::path& est_path) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 2;
    cfg.frames = 2;
    cfg.size = 32;
    cfg.train_clips = 4;
    cfg.eval_clips = 2;
    cfg.seed = 11;
    cfg.affine_ckpt = est_path.string();
    return cfg;
}

fs::path shared_estimator() {
    static fs::path path = [] {
        fs::path dir = fresh_dir("est");
        AffineEstimator est = pretrain_affine_estimator(3, 5);
        checkpoint_save_estimator(dir / "est.ckpt", est);
        return dir / "est.ckpt";
    }();
    return path;
}

}  // namespace

TEST_CASE("config text round trips through the parser") {
    TrainConfig cfg;
    cfg.epochs = 7;
    cfg.lr_end = 5e-6;
    cfg.scan_tb = false;
    cfg.affine_ckpt = "/tmp/est.ckpt";
    TrainConfig back = parse_train_config(config_to_text(cfg));
    CHECK(back.epochs == 7);
    CHECK(back.lr_end == doctest::Approx(5e-6).epsilon(1e-12));
    CHECK_FALSE(back.scan_tb);
    CHECK(back.scan_tf);
    CHECK(back.affine_ckpt == "/tmp/est.ckpt");
}

TEST_CASE("config parsing: comments, spacing, and errors") {
    TrainConfig cfg = parse_train_config(
        "# a comment\n"
        "  epochs =  3   # trailing comment\n"
        "\n"
        "bac = false\n"
        "seed=42\n");
    CHECK(cfg.epochs == 3);
    CHECK_FALSE(cfg.bac);
    CHECK(cfg.seed == 42);
    CHECK(cfg.batch == 4);  // untouched default

    CHECK_THROWS_AS(parse_train_config("epochs 3\n"), FormatError);
    CHECK_THROWS_AS(parse_train_config("= 3\n"), FormatError);
    CHECK_THROWS_AS(parse_train_config("no_such_key = 1\n"), FormatError);
    CHECK_THROWS_AS(parse_train_config("bac = maybe\n"), FormatError);
    CHECK_THROWS_AS(parse_train_config("epochs = many\n"), FormatError);
    CHECK_THROWS_AS(parse_train_config("size = 48\n"), Error);
    CHECK_THROWS_AS(parse_train_config("lr_start = 1e-7\n"), Error);  // below lr_end
    CHECK_THROWS_AS(load_train_config("/nonexistent/cfg.txt"), FormatError);
}

TEST_CASE("checkpoint sections round trip bitwise") {
    const fs::path dir = fresh_dir("ckpt");
    SectionList sections;
    sections.emplace_back("enc.w", std::vector<double>{1.0, -2.5, 3.25e-300, 0.0});
    sections.emplace_back("dec.b", std::vector<double>{});
    sections.emplace_back("affine.w1", std::vector<double>{-0.0, 1e308});
    checkpoint_save(dir / "a.ckpt", sections);

    SectionList back = checkpoint_load(dir / "a.ckpt");
    REQUIRE(back.size() == 3);
    CHECK(back[0].first == "enc.w");
    CHECK(back[1].second.empty());
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].first == sections[i].first);
        CHECK(back[i].second == sections[i].second);
    }

    checkpoint_save(dir / "b.ckpt", back);
    CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
    fs::remove_all(dir);
}

TEST_CASE("checkpoint format errors") {
    const fs::path dir = fresh_dir("ckptbad");
    CHECK_THROWS_AS(checkpoint_load(dir / "missing.ckpt"), FormatError);

    SectionList sections;
    sections.emplace_back("w", std::vector<double>{1, 2, 3});
    checkpoint_save(dir / "good.ckpt", sections);
    std::string bytes = file_bytes(dir / "good.ckpt");

    {
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad;
    }
    CHECK_THROWS_AS(checkpoint_load(dir / "magic.ckpt"), FormatError);
    {
        std::ofstream(dir / "short.ckpt", std::ios::binary)
            << bytes.substr(0, bytes.size() - 9);
    }
    CHECK_THROWS_AS(checkpoint_load(dir / "short.ckpt"), FormatError);
    {
        std::ofstream(dir / "header.ckpt", std::ios::binary) << bytes.substr(0, 20);
    }
    CHECK_THROWS_AS(checkpoint_load(dir / "header.ckpt"), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("model checkpoints restore every parameter bitwise") {
    const fs::path dir = fresh_dir("model");
    TrainConfig tc = tiny_cfg("");
    tc.bac = true;
    Rng r1(5), r2(77), r3(5);
    VivimNet a;
    a.init(net_config_for(tc), r1);
    AffineEstimator ea;
    ea.init(16, r3);
    checkpoint_save_model(dir / "m.ckpt", a, &ea);

    VivimNet b;
    b.init(net_config_for(tc), r2);
    AffineEstimator eb;
    Rng r4(78);
    eb.init(16, r4);
    checkpoint_load_model(dir / "m.ckpt", b, &eb);

    auto pa = named_params(a, &ea);
    auto pb = named_params(b, &eb);
    REQUIRE(pa.size() == pb.size());
    bool saw_affine = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(pa[i].second.to_vector() == pb[i].second.to_vector());
        saw_affine = saw_affine || pa[i].first.rfind("affine.", 0) == 0;
    }
    CHECK(saw_affine);

    SUBCASE("missing estimator sections are detected") {
        checkpoint_save_model(dir / "netonly.ckpt", a, nullptr);
        AffineEstimator ec;
        Rng r5(9);
        ec.init(16, r5);
        CHECK_THROWS_AS(checkpoint_load_model(dir / "netonly.ckpt", b, &ec), FormatError);
    }
    SUBCASE("unknown sections are detected") {
        CHECK_THROWS_AS(checkpoint_load_model(dir / "m.ckpt", b, nullptr), FormatError);
    }
    SUBCASE("architecture mismatch is detected") {
        TrainConfig wide = tc;
        wide.size = 64;
        VivimNet c;
        Rng r6(10);
        c.init(net_config_for(wide), r6);
        // Same parameter names, same sizes: conv kernels do not depend on the
        // frame size. Shrink a real structural knob instead.
        VivimConfig vc = net_config_for(tc);
        vc.n_state = 8;
        VivimNet d;
        Rng r7(11);
        d.init(vc, r7);
        AffineEstimator ed;
        Rng r8(12);
        ed.init(16, r8);
        CHECK_THROWS_AS(checkpoint_load_model(dir / "m.ckpt", d, &ed), FormatError);
    }
    fs::remove_all(dir);
}

TEST_CASE("training is deterministic and writes its artifacts") {
    const fs::path da = fresh_dir("runa");
    const fs::path db = fresh_dir("runb");
    TrainConfig cfg = tiny_cfg(shared_estimator());
    TrainResult a = train(cfg, da);
    TrainResult b = train(cfg, db);

    REQUIRE(a.log.size() == cfg.epochs * (cfg.train_clips / cfg.batch));
    CHECK(train_log_csv(a.log) == train_log_csv(b.log));
    CHECK(a.best_val_dice == b.best_val_dice);
    CHECK(file_bytes(da / "best.ckpt") == file_bytes(db / "best.ckpt"));
    CHECK(file_bytes(da / "train_log.csv") == file_bytes(db / "train_log.csv"));
    CHECK(fs::exists(da / "config.txt"));

    // Learning rate schedule decays monotonically.
    for (std::size_t i = 1; i < a.log.size(); ++i) CHECK(a.log[i].lr <= a.log[i - 1].lr);
    CHECK(a.log.front().lr == doctest::Approx(cfg.lr_start).epsilon(1e-12));
    CHECK(a.log.back().lr == doctest::Approx(cfg.lr_end).epsilon(1e-12));

    // The boundary terms are alive in a full-config run.
    bool affine_moves = false, bce_moves = false;
    for (const StepLog& s : a.log) {
        affine_moves = affine_moves || s.l_affine != 0.0;
        bce_moves = bce_moves || s.l_bce != 0.0;
    }
    CHECK(affine_moves);
    CHECK(bce_moves);

    fs::remove_all(da);
    fs::remove_all(db);
}

TEST_CASE("zero loss weights keep the extra terms out of the objective") {
    const fs::path dir = fresh_dir("zerolam");
    TrainConfig cfg = tiny_cfg(shared_estimator());
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    TrainResult r = train(cfg, dir);
    bool logged_affine = false, logged_bce = false;
    for (const StepLog& s : r.log) {
        CHECK(s.l_total == s.l_seg);  // bitwise: the total IS the seg node
        logged_affine = logged_affine || s.l_affine != 0.0;
        logged_bce = logged_bce || s.l_bce != 0.0;
    }
    CHECK(logged_affine);
    CHECK(logged_bce);
    fs::remove_all(dir);
}

TEST_CASE("constraint off: no boundary head, no extra losses, no affine sections") {
    const fs::path dir = fresh_dir("nobac");
    TrainConfig cfg = tiny_cfg("");
    cfg.bac = false;
    TrainResult r = train(cfg, dir);
    CHECK_FALSE(r.has_estimator);
    for (const StepLog& s : r.log) {
        CHECK(s.l_affine == 0.0);
        CHECK(s.l_bce == 0.0);
        CHECK(s.l_total == s.l_seg);
    }
    for (const auto& [name, values] : checkpoint_load(dir / "best.ckpt"))
        CHECK(name.rfind("affine.", 0) != 0);
    fs::remove_all(dir);
}

TEST_CASE("exploding optimisation aborts with the step recorded") {
    const fs::path dir = fresh_dir("blowup");
    TrainConfig cfg = tiny_cfg("");
    cfg.bac = false;
    cfg.epochs = 4;
    cfg.lr_start = 1e308;
    cfg.lr_end = 1e308;
    try {
        train(cfg, dir);
        FAIL("expected a NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("aborted at step") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("evaluation pool stays on held-out seeds and reports consistently") {
    const fs::path dir = fresh_dir("eval");
    TrainConfig cfg = tiny_cfg("");
    cfg.bac = false;
    cfg.epochs = 1;
    TrainResult r = train(cfg, dir);

    EvalSummary s1 = evaluate_pool(r.net, cfg, 0, 3);
    EvalSummary s2 = evaluate_pool(r.net, cfg, 0, 3);
    REQUIRE(s1.rows.size() == 3);
    CHECK(eval_csv(s1) == eval_csv(s2));
    for (const EvalRow& row : s1.rows) {
        CHECK(row.seed % 2 == 1);
        CHECK(row.rep.dice >= 0.0);
        CHECK(row.rep.dice <= 1.0);
        CHECK(row.rep.jaccard <= row.rep.dice + 1e-15);
        CHECK(row.rep.max_dice >= row.rep.dice);
    }
    double mean_dice_by_hand = 0.0;
    for (const EvalRow& row : s1.rows) mean_dice_by_hand += row.rep.dice / 3.0;
    CHECK(s1.mean.dice == doctest::Approx(mean_dice_by_hand).epsilon(1e-12));
    CHECK(eval_text(s1).find("mean dice") != std::string::npos);

    SUBCASE("checkpoint round trip preserves evaluation output exactly") {
        VivimNet fresh;
        Rng rng(123);
        fresh.init(net_config_for(cfg), rng);
        checkpoint_load_model(dir / "best.ckpt", fresh, nullptr);
        EvalSummary s3 = evaluate_pool(fresh, cfg, 0, 3);
        CHECK(eval_csv(s3) == eval_csv(s1));
    }
    fs::remove_all(dir);
}

TEST_CASE("clip loss refuses an estimator without a boundary head") {
    TrainConfig cfg = tiny_cfg("");
    cfg.bac = false;
    Rng rng(4);
    VivimNet net;
    net.init(net_config_for(cfg), rng);
    VideoClip clip = generate_clip(1, 2, 32, 32);
    AffineEstimator est = pretrain_affine_estimator(3, 2);
    LossWeights w;
    CHECK_THROWS_AS(clip_loss(net, clip.frames, clip.masks, &est, w), Error);
}

TEST_CASE("net configs for the ablation grid validate and propagate toggles") {
    TrainConfig cfg = tiny_cfg("");
    cfg.scan_tf = false;
    cfg.scan_tb = false;
    cfg.scan_sp = false;
    cfg.bac = false;
    VivimConfig vc = net_config_for(cfg);
    vc.validate();
    CHECK_FALSE(vc.scan_tf);
    CHECK_FALSE(vc.scan_tb);
    CHECK_FALSE(vc.scan_sp);
    CHECK_FALSE(vc.boundary_head);
    cfg.size = 64;
    net_config_for(cfg).validate();
}
