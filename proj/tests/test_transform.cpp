#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <vector>

#include "morphmark/affine.hpp"
#include "morphmark/field.hpp"
#include "morphmark/image.hpp"
#include "morphmark/params.hpp"
#include "morphmark/perspective.hpp"
#include "morphmark/rng.hpp"

using namespace morphmark;

namespace {
std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

Image smooth_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    const double fx = rng.uniform(1.0, 2.0), fy = rng.uniform(1.0, 2.0);
    Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            img.at(y, x) = 0.5 + 0.4 * std::sin(6.28 * fx * x / w) * std::cos(6.28 * fy * y / h);
    return img;
}
}  // namespace

// ---------------------------------------------------------------------------
// affine
// ---------------------------------------------------------------------------

TEST_CASE("affine from zero parameters is the identity") {
    AffineParams p;
    const AffineTransform A = affine_from_params(p);
    for (int i = 0; i < 6; ++i)
        CHECK(A.m[static_cast<std::size_t>(i)] ==
              Catch::Approx(AffineTransform::identity().m[static_cast<std::size_t>(i)]).margin(1e-15));
}

TEST_CASE("affine matrix entries match the closed-form composition") {
    AffineParams p;
    p.o = {0.1, -0.2, 0.25, -0.5, 0.5, 0.25};
    const AffineTransform A = affine_from_params(p);
    // frozen: o=(0.1,-0.2,0.25,-0.5,0.5,0.25), default intensities (1,1,pi/2,pi/2)
    CHECK(A.m[0] == Catch::Approx(0.88388347648318444));
    CHECK(A.m[1] == Catch::Approx(1.25));
    CHECK(A.m[2] == Catch::Approx(0.1));
    CHECK(A.m[3] == Catch::Approx(-0.35355339059327373));
    CHECK(A.m[4] == Catch::Approx(0.20710678118654757));
    CHECK(A.m[5] == Catch::Approx(-0.2));
}

TEST_CASE("affine rejects invalid intensities and singular shear") {
    AffineParams p;
    p.intensities.sf_x = 0.0;
    CHECK_THROWS_AS(affine_from_params(p), std::invalid_argument);
    AffineParams q;
    q.o[5] = 1.0;  // beta = pi/2 exactly
    CHECK_THROWS_AS(affine_from_params(q), std::invalid_argument);
}

TEST_CASE("affine inverse and compose round trip") {
    AffineParams p;
    p.o = {0.15, -0.1, 0.2, 0.1, 0.3, -0.2};
    const AffineTransform A = affine_from_params(p);
    const AffineTransform I = A.compose(A.inverse());
    CHECK(I.m[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(I.m[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(I.m[2] == Catch::Approx(0.0).margin(1e-12));
    CHECK(I.m[3] == Catch::Approx(0.0).margin(1e-12));
    CHECK(I.m[4] == Catch::Approx(1.0).margin(1e-12));
    CHECK(I.m[5] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("normalized coordinate maps are pixel-center aligned inverses") {
    CHECK(to_norm(0.0, 64) == Catch::Approx(-1.0));
    CHECK(to_norm(63.0, 64) == Catch::Approx(1.0));
    CHECK(to_pixel(to_norm(17.25, 64), 64) == Catch::Approx(17.25));
    CHECK(to_norm(to_pixel(-0.37, 48), 48) == Catch::Approx(-0.37));
}

TEST_CASE("identity affine warp reproduces the image exactly") {
    const Image img = smooth_image(16, 16, 5);
    const Image out = warp_affine(img, AffineTransform::identity());
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(out.values[i] == img.values[i]);
}

TEST_CASE("landmarks track warped content through apply_affine_points") {
    const Image img = smooth_image(32, 32, 6);
    AffineParams p;
    p.o = {0.05, -0.04, 0.1, -0.08, 0.06, 0.03};
    const AffineTransform A = affine_from_params(p);
    const Image warped = warp_affine(img, A);
    LandmarkSet lm;
    lm.points = {{12.3, 15.1}, {20.4, 9.8}};
    const LandmarkSet moved = apply_affine_points(lm, A, 32, 32);
    // intensity at the moved point in the warped image equals the original
    for (std::size_t i = 0; i < lm.size(); ++i) {
        const double orig = bilinear_sample_at(img, lm[i].x, lm[i].y).value;
        const double via = bilinear_sample_at(warped, moved[i].x, moved[i].y).value;
        CHECK(via == Catch::Approx(orig).margin(5e-3));  // one bilinear resampling apart
    }
}

// ---------------------------------------------------------------------------
// fields
// ---------------------------------------------------------------------------

TEST_CASE("zero field warp is the identity") {
    const Image img = smooth_image(16, 16, 7);
    const Image out = warp_field(img, DeformationField(16, 16));
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(out.values[i] == img.values[i]);
}

TEST_CASE("constant backward field translates content the opposite way") {
    Image img(16, 16);
    img.at(8, 8) = 1.0;
    DeformationField f(16, 16);
    std::fill(f.dx.begin(), f.dx.end(), 2.0);  // out(x,y) = img(x+2, y)
    const Image out = warp_field(img, f);
    CHECK(out.at(8, 6) == Catch::Approx(1.0));
    CHECK(out.at(8, 8) == Catch::Approx(0.0));
}

TEST_CASE("apply_field_points honors the sign convention") {
    DeformationField f(16, 16);
    std::fill(f.dx.begin(), f.dx.end(), 2.0);
    LandmarkSet lm;
    lm.points = {{8.0, 8.0}};
    const LandmarkSet plus = apply_field_points(lm, f, 1);
    const LandmarkSet minus = apply_field_points(lm, f, -1);
    CHECK(plus[0].x == Catch::Approx(10.0));
    CHECK(minus[0].x == Catch::Approx(6.0));
    CHECK_THROWS_AS(apply_field_points(lm, f, 2), std::invalid_argument);
}

TEST_CASE("field point transport with sign -1 tracks warped content") {
    // warped(x) = img(x + f(x)); content at p lands near p' with p' + f(p') = p,
    // which a smooth field approximates as p' = p - f(p)
    const Image img = smooth_image(32, 32, 8);
    DeformationField f(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * 32 + x;
            f.dx[i] = 1.2;
            f.dy[i] = -0.8;
        }
    const Image warped = warp_field(img, f);
    LandmarkSet lm;
    lm.points = {{15.4, 16.6}};
    const LandmarkSet moved = apply_field_points(lm, f, -1);
    const double orig = bilinear_sample_at(img, lm[0].x, lm[0].y).value;
    const double via = bilinear_sample_at(warped, moved[0].x, moved[0].y).value;
    CHECK(via == Catch::Approx(orig).margin(0.02));
}

TEST_CASE("dfield round trip preserves float32-quantized planes") {
    DeformationField f(12, 10);
    Rng rng(11);
    for (std::size_t i = 0; i < f.size(); ++i) {
        f.dx[i] = rng.uniform(-3.0, 3.0);
        f.dy[i] = rng.uniform(-3.0, 3.0);
    }
    const auto path = temp_file("morphmark_test.dfield");
    write_dfield(path.string(), f);
    const DeformationField g = read_dfield(path.string());
    REQUIRE(g.height == 12);
    REQUIRE(g.width == 10);
    for (std::size_t i = 0; i < f.size(); ++i) {
        CHECK(g.dx[i] == Catch::Approx(static_cast<float>(f.dx[i])).margin(0.0));
        CHECK(g.dy[i] == Catch::Approx(static_cast<float>(f.dy[i])).margin(0.0));
    }
    std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// perspective
// ---------------------------------------------------------------------------

TEST_CASE("zero-strength perspective is the exact identity") {
    const PerspectiveWarp w = random_perspective(123, 0.0, 32, 32);
    for (double v : w.field.dx) CHECK(v == 0.0);
    for (double v : w.field.dy) CHECK(v == 0.0);
    double u, v2;
    w.map.apply(5.0, 7.0, u, v2);
    CHECK(u == Catch::Approx(5.0));
    CHECK(v2 == Catch::Approx(7.0));
}

TEST_CASE("perspective field agrees with the homography at every pixel") {
    const PerspectiveWarp w = random_perspective(77, 0.6, 24, 20);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 20; ++x) {
            double u, v;
            w.map.apply(x, y, u, v);
            const std::size_t i = static_cast<std::size_t>(y) * 20 + x;
            CHECK(w.field.dx[i] == Catch::Approx(u - x).margin(1e-12));
            CHECK(w.field.dy[i] == Catch::Approx(v - y).margin(1e-12));
        }
}

TEST_CASE("warping by the field equals warping by the map") {
    const Image img = smooth_image(24, 24, 13);
    const PerspectiveWarp w = random_perspective(31, 0.5, 24, 24);
    const Image by_map = warp_perspective(img, w.map);
    const Image by_field = warp_field(img, w.field);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(by_field.values[i] == Catch::Approx(by_map.values[i]).margin(1e-12));
}

TEST_CASE("perspective inverse round trips points") {
    const PerspectiveWarp w = random_perspective(55, 0.7, 48, 48);
    const PerspectiveMap inv = w.map.inverse();
    for (double px : {3.0, 17.5, 41.2}) {
        double u, v, bx, by;
        w.map.apply(px, px * 0.7 + 2.0, u, v);
        inv.apply(u, v, bx, by);
        CHECK(bx == Catch::Approx(px).margin(1e-9));
        CHECK(by == Catch::Approx(px * 0.7 + 2.0).margin(1e-9));
    }
}

TEST_CASE("random perspective is deterministic in its seed") {
    const PerspectiveWarp a = random_perspective(99, 0.6, 32, 32);
    const PerspectiveWarp b = random_perspective(99, 0.6, 32, 32);
    for (int i = 0; i < 9; ++i) CHECK(a.map.h[static_cast<std::size_t>(i)] == b.map.h[static_cast<std::size_t>(i)]);
}

// ---------------------------------------------------------------------------
// rng
// ---------------------------------------------------------------------------

TEST_CASE("rng streams are reproducible and forks are independent") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng root(5);
    Rng f1 = root.fork(1), f2 = root.fork(2), f1b = root.fork(1);
    CHECK(f1.next_u64() == f1b.next_u64());
    CHECK(f1.next_u64() != f2.next_u64());
}

TEST_CASE("rng uniform stays in bounds and normal has sane moments") {
    Rng rng(77);
    double sum = 0.0, sum2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform(2.0, 5.0);
        CHECK(u >= 2.0);
        CHECK(u < 5.0);
        const double z = rng.normal();
        sum += z;
        sum2 += z * z;
    }
    CHECK(sum / n == Catch::Approx(0.0).margin(0.05));
    CHECK(sum2 / n == Catch::Approx(1.0).margin(0.05));
}

TEST_CASE("rng shuffle produces a permutation") {
    Rng rng(31);
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    rng.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

// ---------------------------------------------------------------------------
// image / checkpoint IO
// ---------------------------------------------------------------------------

TEST_CASE("png round trip quantizes to 8 bits") {
    const Image img = smooth_image(16, 20, 17);
    const auto path = temp_file("morphmark_test.png");
    write_png_gray(path.string(), img);
    const Image back = read_png_gray(path.string());
    REQUIRE(back.height == 16);
    REQUIRE(back.width == 20);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(back.values[i] == Catch::Approx(img.values[i]).margin(0.5 / 255.0 + 1e-9));
    std::filesystem::remove(path);
}

TEST_CASE("landmark csv round trip") {
    LandmarkSet lm;
    lm.points = {{1.25, -3.5}, {63.0009, 12.0}};
    const auto path = temp_file("morphmark_test_lm.csv");
    write_landmarks_csv(path.string(), lm);
    const LandmarkSet back = read_landmarks_csv(path.string());
    REQUIRE(back.size() == 2);
    CHECK(back[0].x == Catch::Approx(1.25).margin(1e-7));
    CHECK(back[0].y == Catch::Approx(-3.5).margin(1e-7));
    CHECK(back[1].x == Catch::Approx(63.0009).margin(1e-6));
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint round trip restores float32-rounded values") {
    ParamStore store;
    Rng rng(19);
    store.add_randn("a.w", {3, 4}, rng, 1.0);
    store.add_zeros("a.b", {4});
    store.add_randn("b.w", {2, 2, 3, 3}, rng, 0.5);
    const auto path = temp_file("morphmark_test.ckpt");
    save_checkpoint(path.string(), store);

    ParamStore other;
    Rng rng2(20);
    other.add_randn("a.w", {3, 4}, rng2, 1.0);
    other.add_zeros("a.b", {4});
    other.add_randn("b.w", {2, 2, 3, 3}, rng2, 0.5);
    load_checkpoint(path.string(), other);
    for (std::size_t e = 0; e < store.count(); ++e)
        for (std::size_t i = 0; i < store[static_cast<int>(e)].value.size(); ++i)
            CHECK(other[static_cast<int>(e)].value[i] ==
                  static_cast<double>(static_cast<float>(store[static_cast<int>(e)].value[i])));
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint layout mismatches are rejected") {
    ParamStore store;
    Rng rng(21);
    store.add_randn("x", {4}, rng, 1.0);
    const auto path = temp_file("morphmark_test_bad.ckpt");
    save_checkpoint(path.string(), store);

    ParamStore renamed;
    Rng rng2(21);
    renamed.add_randn("y", {4}, rng2, 1.0);
    CHECK_THROWS_AS(load_checkpoint(path.string(), renamed), std::runtime_error);

    ParamStore reshaped;
    Rng rng3(21);
    reshaped.add_randn("x", {2, 2}, rng3, 1.0);
    CHECK_THROWS_AS(load_checkpoint(path.string(), reshaped), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("adam with beta2=0 matches the hand-derived first step") {
    ParamStore store;
    store.add("p", {1}, {1.0});
    store[0].grad[0] = 0.5;
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    Adam opt(cfg);
    opt.step(store, 0.1);
    // g=0.5; m=(1-b1)g, mhat=g; v=g^2, vhat=g^2; update = lr*g/(|g|+eps) ~ lr
    CHECK(store[0].value[0] == Catch::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
}
