#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "morphmark/c2t.hpp"
#include "morphmark/config.hpp"
#include "morphmark/parallel.hpp"
#include "morphmark/stage1.hpp"
#include "morphmark/synthbench.hpp"

using namespace morphmark;

namespace {

// exhaustive reference for the small-loss filter: best keep-sized subset by
// total loss, ties broken toward lower indices by the (loss, index) sort
std::vector<int> oracle_select(const std::vector<double>& losses, int keep) {
    std::vector<int> idx(losses.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (losses[static_cast<std::size_t>(a)] != losses[static_cast<std::size_t>(b)])
            return losses[static_cast<std::size_t>(a)] < losses[static_cast<std::size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(keep));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::filesystem::path temp_dir(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("stage one schedules hit their endpoints") {
    PipelineConfig::Stage1 s;
    s.epochs = 10;
    s.lr = 1e-4;
    s.lr_final = 5e-5;
    CHECK(schedule_lr(s, 0) == Catch::Approx(1e-4));
    CHECK(schedule_lr(s, 9) == Catch::Approx(5e-5));
    for (int e = 1; e < 10; ++e) CHECK(schedule_lr(s, e) < schedule_lr(s, e - 1));

    s.phase_fraction = 1.0 / 3.0;
    const int ramp = 3;  // max(1, int(10/3))
    CHECK(schedule_lambda1(s, 0) == Catch::Approx(1.0 / ramp));
    CHECK(schedule_lambda1(s, ramp - 1) == Catch::Approx(1.0));
    CHECK(schedule_lambda1(s, ramp) == 1.0);
    CHECK(schedule_lambda1(s, 9) == 1.0);

    s.lambda3_start = 5.0;
    CHECK(schedule_lambda3(s, 0) == Catch::Approx(5.0));
    CHECK(schedule_lambda3(s, 9) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("stage two schedules ramp epsilon and step the learning rate") {
    PipelineConfig::Stage2 s;
    s.epochs = 20;
    s.eps_max = 0.8;
    s.eps_ramp_frac = 0.3;  // ramp = 6 epochs
    CHECK(schedule_epsilon(s, 0) == 0.0);
    CHECK(schedule_epsilon(s, 3) == Catch::Approx(0.4));
    CHECK(schedule_epsilon(s, 6) == Catch::Approx(0.8));
    CHECK(schedule_epsilon(s, 19) == Catch::Approx(0.8));

    s.lr = 1e-3;
    CHECK(schedule_stage2_lr(s, 0) == Catch::Approx(1e-3));
    CHECK(schedule_stage2_lr(s, 11) == Catch::Approx(1e-3));
    CHECK(schedule_stage2_lr(s, 12) == Catch::Approx(1e-4));  // 60%
    CHECK(schedule_stage2_lr(s, 16) == Catch::Approx(1e-5));  // 80%
}

TEST_CASE("landmark EMA follows the closed form") {
    LandmarkSet acc, est;
    acc.points = {{10.0, 20.0}};
    est.points = {{14.0, 16.0}};
    LandmarkSet one = acc;
    ema_update(one, est, 0.9);
    CHECK(one[0].x == Catch::Approx(0.9 * 10.0 + 0.1 * 14.0));
    CHECK(one[0].y == Catch::Approx(0.9 * 20.0 + 0.1 * 16.0));

    // k updates with a constant estimate: tau^k * p0 + (1 - tau^k) * e
    LandmarkSet many = acc;
    const int k = 7;
    for (int i = 0; i < k; ++i) ema_update(many, est, 0.9);
    const double tk = std::pow(0.9, k);
    CHECK(many[0].x == Catch::Approx(tk * 10.0 + (1.0 - tk) * 14.0));
    CHECK(many[0].y == Catch::Approx(tk * 20.0 + (1.0 - tk) * 16.0));

    LandmarkSet wrong;
    wrong.points = {{0.0, 0.0}, {1.0, 1.0}};
    CHECK_THROWS_AS(ema_update(wrong, est, 0.9), std::invalid_argument);
}

TEST_CASE("small-loss selection matches the exhaustive oracle") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_index(12));
        std::vector<double> losses(static_cast<std::size_t>(n));
        for (double& l : losses) {
            l = rng.uniform(0.0, 1.0);
            if (rng.bernoulli(0.3)) l = 0.5;  // force ties regularly
        }
        const double eps = rng.uniform(0.0, 0.95);
        const int keep = std::max(1, static_cast<int>(std::floor((1.0 - eps) * n + 1e-9)));
        const auto got = small_loss_select(losses, eps);
        const auto want = oracle_select(losses, keep);
        INFO("trial " << trial << " n " << n << " eps " << eps);
        CHECK(got == want);
        CHECK(std::is_sorted(got.begin(), got.end()));
    }
    CHECK(small_loss_select({0.3, 0.1, 0.2}, 0.0) == std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(small_loss_select({}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(small_loss_select({0.1}, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(small_loss_select({0.1}, -0.1), std::invalid_argument);
}

TEST_CASE("sampled augmentation pairs satisfy the bridge identity") {
    PipelineConfig::Stage2 s;
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        const AugmentationPair aug = sample_augmentation(rng, s, {});
        const AffineTransform back = aug.easy.compose(aug.easy_to_hard);
        for (int i = 0; i < 6; ++i)
            CHECK(back.m[static_cast<std::size_t>(i)] ==
                  Catch::Approx(aug.hard.m[static_cast<std::size_t>(i)]).margin(1e-12));
        CHECK(aug.channel_perm.empty());
    }
    // with a flip permutation declared, flips eventually fire and carry it
    bool saw_flip = false;
    for (int trial = 0; trial < 40 && !saw_flip; ++trial) {
        const AugmentationPair aug = sample_augmentation(rng, s, {1, 0});
        if (!aug.channel_perm.empty()) {
            saw_flip = true;
            CHECK(aug.channel_perm == std::vector<int>{1, 0});
        }
    }
    CHECK(saw_flip);
}

TEST_CASE("view_landmarks applies the flip permutation to identity views") {
    AugmentationPair aug = AugmentationPair::identity();
    aug.channel_perm = {1, 0};
    LandmarkSet lm;
    lm.points = {{3.0, 4.0}, {10.0, 11.0}};
    const LandmarkSet out = view_landmarks(lm, aug, AffineTransform::identity(), 32, 32);
    CHECK(out[0].x == Catch::Approx(10.0));
    CHECK(out[0].y == Catch::Approx(11.0));
    CHECK(out[1].x == Catch::Approx(3.0));
    CHECK(out[1].y == Catch::Approx(4.0));
}

TEST_CASE("field_from_map samples the map displacement at every pixel") {
    const PerspectiveWarp w = random_perspective(5, 0.4, 16, 16);
    const DeformationField f = field_from_map(w.map, 16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            double u, v;
            w.map.apply(x, y, u, v);
            const std::size_t i = static_cast<std::size_t>(y) * 16 + x;
            CHECK(f.dx[i] == Catch::Approx(u - x).margin(1e-12));
            CHECK(f.dy[i] == Catch::Approx(v - y).margin(1e-12));
        }
}

TEST_CASE("make_batch mixes synthetic and corpus pairs as configured") {
    SynthConfig scfg;
    scfg.n_images = 5;
    scfg.height = scfg.width = 32;
    scfg.n_landmarks = 3;
    const Dataset ds = generate_dataset(scfg);

    PipelineConfig::Stage1 s;
    s.batch = 6;
    s.synth_fraction = 0.5;
    s.synth_strength = 0.3;
    Rng rng(9);
    const auto batch = make_batch(ds, s, rng);
    REQUIRE(batch.size() == 6);
    int n_synth = 0;
    for (const auto& p : batch) {
        CHECK(p.fixed_index >= 0);
        CHECK(p.fixed_index < 5);
        if (p.synthetic) {
            ++n_synth;
            CHECK(p.truth.dx.size() == 32 * 32);
            // fixed image is the unwarped corpus image
            const Image& ref = ds.images[static_cast<std::size_t>(p.fixed_index)];
            for (std::size_t i = 0; i < ref.size(); ++i)
                CHECK(p.fixed.values[i] == ref.values[i]);
        }
    }
    CHECK(n_synth == 3);
}

TEST_CASE("generated datasets keep all landmarks in frame") {
    SynthConfig scfg;
    scfg.n_images = 8;
    scfg.height = scfg.width = 48;
    scfg.n_landmarks = 4;
    scfg.seed = 3;
    const Dataset ds = generate_dataset(scfg);
    REQUIRE(ds.images.size() == 8);
    REQUIRE(ds.truth.size() == 8);
    CHECK(ds.exemplar_index == 0);
    for (const auto& lm : ds.truth) {
        REQUIRE(lm.size() == 4);
        CHECK_FALSE(lm.any_outside(48, 48));
    }
    // landmark 0 in non-exemplar images moved away from its template spot
    bool any_moved = false;
    for (std::size_t i = 1; i < ds.truth.size(); ++i)
        if (std::hypot(ds.truth[i][0].x - ds.truth[0][0].x,
                       ds.truth[i][0].y - ds.truth[0][0].y) > 0.5)
            any_moved = true;
    CHECK(any_moved);
}

TEST_CASE("dataset write and load round trip") {
    SynthConfig scfg;
    scfg.n_images = 3;
    scfg.height = scfg.width = 32;
    scfg.n_landmarks = 2;
    const Dataset ds = generate_dataset(scfg);
    const auto dir = temp_dir("morphmark_ds_test");
    write_dataset(dir.string(), ds);
    const Dataset back = load_dataset(dir.string());
    CHECK(back.height == 32);
    CHECK(back.width == 32);
    CHECK(back.n_landmarks == 2);
    CHECK(back.exemplar_index == 0);
    REQUIRE(back.images.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t p = 0; p < ds.images[i].size(); ++p)
            CHECK(back.images[i].values[p] ==
                  Catch::Approx(ds.images[i].values[p]).margin(0.5 / 255.0));
        for (std::size_t j = 0; j < 2; ++j) {
            CHECK(back.truth[i][j].x == Catch::Approx(ds.truth[i][j].x).margin(1e-6));
            CHECK(back.truth[i][j].y == Catch::Approx(ds.truth[i][j].y).margin(1e-6));
        }
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("pseudo-label CSV round trip") {
    std::vector<LandmarkSet> labels(2);
    labels[0].points = {{1.25, 2.5}, {30.125, 4.75}};
    labels[1].points = {{0.5, 63.5}, {17.0, 9.875}};
    const auto path = std::filesystem::temp_directory_path() / "morphmark_pseudo_test.csv";
    write_pseudo_labels(path.string(), labels);
    const auto back = read_pseudo_labels(path.string());
    REQUIRE(back.size() == 2);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            CHECK(back[i][j].x == Catch::Approx(labels[i][j].x).margin(1e-7));
            CHECK(back[i][j].y == Catch::Approx(labels[i][j].y).margin(1e-7));
        }
    std::filesystem::remove(path);
}

TEST_CASE("landmark evaluation reports hand-computed errors") {
    std::vector<LandmarkSet> pred(1), truth(1);
    truth[0].points = {{0.0, 0.0}, {10.0, 10.0}, {20.0, 20.0}};
    pred[0].points = {{3.0, 4.0}, {10.0, 11.0}, {20.0, 20.0}};  // errors 5, 1, 0
    const EvalReport rep = evaluate_landmarks(pred, truth);
    CHECK(rep.mre == Catch::Approx(2.0));
    CHECK(rep.median_re == Catch::Approx(1.0));
    REQUIRE(rep.sdr.size() == 3);
    CHECK(rep.sdr[0] == Catch::Approx(2.0 / 3.0));  // within 2 px
    CHECK(rep.sdr[1] == Catch::Approx(2.0 / 3.0));  // within 4 px
    CHECK(rep.sdr[2] == Catch::Approx(1.0));        // within 8 px

    std::vector<LandmarkSet> bad(1);
    bad[0].points = {{0.0, 0.0}};
    CHECK_THROWS_AS(evaluate_landmarks(bad, truth), std::invalid_argument);
    CHECK_THROWS_AS(evaluate_landmarks({}, {}), std::invalid_argument);
}

TEST_CASE("config files, overrides, and JSON round trips") {
    PipelineConfig cfg;
    CHECK(cfg.stage1.epochs == 90);
    CHECK(cfg.stage2.epochs == 40);
    CHECK(cfg.ema_start_epoch() == 24);  // 90 * 200 / 750

    apply_config_overrides(cfg, {"stage1.epochs=12", "stage2.lr=0.002", "threads=3"});
    CHECK(cfg.stage1.epochs == 12);
    CHECK(cfg.stage2.lr == Catch::Approx(0.002));
    CHECK(cfg.threads == 3);
    CHECK(cfg.ema_start_epoch() == 3);
    CHECK_THROWS_AS(apply_config_overrides(cfg, {"stage1.no_such_key=1"}), std::runtime_error);
    CHECK_THROWS_AS(apply_config_overrides(cfg, {"stage1.epochs"}), std::runtime_error);

    const nlohmann::json j = config_to_json(cfg);
    PipelineConfig other;
    apply_config_json(other, j);
    CHECK(other.stage1.epochs == 12);
    CHECK(other.stage2.lr == Catch::Approx(0.002));
    CHECK(other.threads == 3);

    const auto path = std::filesystem::temp_directory_path() / "morphmark_cfg_test.json";
    write_config_file(cfg, path.string());
    PipelineConfig loaded;
    load_config_file(loaded, path.string());
    CHECK(config_to_json(loaded) == j);
    std::filesystem::remove(path);

    std::ofstream(path) << "{\"stage1\": {\"bogus\": 1}}";
    PipelineConfig reject;
    CHECK_THROWS_AS(load_config_file(reject, path.string()), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("parallel_for covers every index once for any thread count") {
    for (int threads : {1, 2, 4, 7}) {
        std::vector<std::atomic<int>> hits(100);
        for (auto& h : hits) h = 0;
        parallel_for(100, threads, [&](int i) { hits[static_cast<std::size_t>(i)]++; });
        for (const auto& h : hits) CHECK(h.load() == 1);
    }
    parallel_for(0, 4, [&](int) { FAIL("must not run on empty range"); });
}

TEST_CASE("parallel_for propagates worker exceptions") {
    CHECK_THROWS_AS(parallel_for(16, 4,
                                 [&](int i) {
                                     if (i == 11) throw std::runtime_error("boom");
                                 }),
                    std::runtime_error);
}

TEST_CASE("thread resolution prefers the explicit request over the environment") {
    CHECK(resolve_threads(5) == 5);
    setenv("MORPHMARK_THREADS", "3", 1);
    CHECK(resolve_threads(0) == 3);
    CHECK(resolve_threads(2) == 2);
    setenv("MORPHMARK_THREADS", "junk", 1);
    CHECK(resolve_threads(0) == 1);
    unsetenv("MORPHMARK_THREADS");
    CHECK(resolve_threads(0) == 1);
}
