// acceptance.cpp - end-to-end acceptance harness. Prints one PASS/FAIL line
// per criterion and exits nonzero if any failed. Training criteria run on a
// small synthetic corpus so the whole binary stays inside its time budget.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"

#include "morphmark/c2t.hpp"
#include "morphmark/config.hpp"
#include "morphmark/stage1.hpp"
#include "morphmark/synthbench.hpp"

using namespace morphmark;

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::ostringstream detail;
};

void expect(Outcome& o, bool cond, const std::string& what) {
    if (!cond) {
        o.pass = false;
        o.detail << " [failed: " << what << "]";
    }
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// shared corpus and training configuration for criteria 5-8
// ---------------------------------------------------------------------------

Dataset acceptance_dataset() {
    SynthConfig sc;
    sc.seed = 2024;
    sc.n_images = 10;
    sc.height = 48;
    sc.width = 48;
    sc.n_landmarks = 4;
    sc.warp_strength = 0.5;
    sc.noise_std = 0.01;
    return generate_dataset(sc);
}

PipelineConfig acceptance_config() {
    PipelineConfig cfg;
    cfg.threads = 2;
    cfg.stage1.epochs = 15;
    cfg.stage1.batch = 4;
    cfg.stage1.lr = 3e-3;
    cfg.stage1.lr_final = 3e-4;
    cfg.stage1.d_model = 32;
    cfg.stage1.d_ff = 64;
    cfg.stage1.n_layers = 1;
    cfg.stage1.n_local = 2;
    cfg.stage1.dropout = 0.0;
    cfg.stage1.sigma = 3.0;
    cfg.stage1.field_point_sign = -1;  // transport against the backward warp
    cfg.stage2.epochs = 12;
    cfg.stage2.batch = 4;
    cfg.stage2.lr = 3e-3;
    cfg.stage2.base_channels = 6;
    cfg.stage2.sigma = 3.0;
    return cfg;
}

// baseline every registration method must beat: the exemplar landmarks copied
// verbatim to every other image
double identity_baseline_mre(const Dataset& ds) {
    std::vector<LandmarkSet> pred(ds.images.size(),
                                  ds.truth[static_cast<std::size_t>(ds.exemplar_index)]);
    return evaluate_landmarks(pred, ds.truth).mre;
}

double labels_mre(const Dataset& ds, const std::vector<LandmarkSet>& labels) {
    return evaluate_landmarks(labels, ds.truth).mre;
}

bool stores_identical(const ParamStore& a, const ParamStore& b) {
    if (a.entries().size() != b.entries().size()) return false;
    for (std::size_t i = 0; i < a.entries().size(); ++i) {
        const auto& ea = a.entries()[i];
        const auto& eb = b.entries()[i];
        if (ea.name != eb.name || ea.value.size() != eb.value.size()) return false;
        if (std::memcmp(ea.value.data(), eb.value.data(),
                        ea.value.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

bool labels_identical(const std::vector<LandmarkSet>& a, const std::vector<LandmarkSet>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) return false;
        for (std::size_t j = 0; j < a[i].size(); ++j)
            if (std::memcmp(&a[i][j].x, &b[i][j].x, sizeof(double)) != 0 ||
                std::memcmp(&a[i][j].y, &b[i][j].y, sizeof(double)) != 0)
                return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

// 1: every autodiff op passes its finite-difference check inside two minutes
Outcome criterion1() {
    Outcome o;
    const auto t0 = clock_type::now();
    int n = 0;
    for (const auto& c : gradcheck::all_cases()) {
        const gradcheck::Result r = gradcheck::check_case(c);
        ++n;
        expect(o, r.pass, c.name + " max rel err " + std::to_string(r.max_rel));
    }
    const double dt = seconds_since(t0);
    expect(o, dt < 120.0, "gradient suite took " + std::to_string(dt) + " s");
    o.detail << n << " ops, " << dt << " s";
    return o;
}

// 2: identity inputs produce identity outputs exactly
Outcome criterion2() {
    Outcome o;
    Rng rng(5);
    Image img(32, 32);
    for (double& v : img.values) v = rng.uniform(0.0, 1.0);

    const Image aw = warp_affine(img, AffineTransform::identity());
    for (std::size_t i = 0; i < img.size(); ++i)
        expect(o, aw.values[i] == img.values[i], "identity affine warp not bitwise exact");

    const DeformationField zero(32, 32);
    const Image fw = warp_field(img, zero);
    for (std::size_t i = 0; i < img.size(); ++i)
        expect(o, fw.values[i] == img.values[i], "zero-field warp not bitwise exact");

    RegnetConfig rc;
    rc.height = rc.width = 32;
    rc.d_model = 16;
    rc.d_ff = 32;
    Rng init(1);
    RegNet net(rc, init);
    Bindings bnd;
    Rng drop(0);
    RegNet::Forward fwd = net.forward_cascade(tensor_from_image(img), tensor_from_image(img),
                                              bnd, drop, false);
    for (double v : fwd.o.values()) expect(o, v == 0.0, "regnet o nonzero at init");
    for (std::size_t s = 0; s < fwd.fx.size(); ++s) {
        for (double v : fwd.fx[s].values()) expect(o, v == 0.0, "regnet field nonzero at init");
        for (double v : fwd.fy[s].values()) expect(o, v == 0.0, "regnet field nonzero at init");
    }
    const RegNet::CascadeResult r = RegNet::extract_result(fwd);
    LandmarkSet lm;
    lm.points = {{7.5, 9.25}, {20.0, 14.75}};
    const LandmarkSet moved = transport_landmarks(lm, r, 32, 32, -1);
    for (std::size_t i = 0; i < lm.size(); ++i)
        expect(o,
               std::fabs(moved[i].x - lm[i].x) < 1e-12 && std::fabs(moved[i].y - lm[i].y) < 1e-12,
               "identity transport moved a landmark");

    DetectorConfig dc;
    dc.height = dc.width = 32;
    dc.n_landmarks = 2;
    dc.base_channels = 4;
    Rng dinit(2);
    Detector det(dc, dinit);
    Bindings db;
    ad::Tensor heat = det.forward(tensor_from_image(img), db);
    for (double v : heat.values()) expect(o, v == 0.0, "detector output nonzero at init");

    o.detail << "warps, transport, and init states exact";
    return o;
}

// 3: filtering and attention match brute-force oracles
Outcome criterion3() {
    Outcome o;
    Rng rng(303);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_index(10));
        std::vector<double> losses(static_cast<std::size_t>(n));
        for (double& l : losses) l = rng.bernoulli(0.3) ? 0.5 : rng.uniform(0.0, 1.0);
        const double eps = rng.uniform(0.0, 0.95);
        const int keep = std::max(1, static_cast<int>(std::floor((1.0 - eps) * n + 1e-9)));

        std::vector<int> idx(losses.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return losses[static_cast<std::size_t>(a)] < losses[static_cast<std::size_t>(b)];
        });
        idx.resize(static_cast<std::size_t>(keep));
        std::sort(idx.begin(), idx.end());
        expect(o, small_loss_select(losses, eps) == idx, "small-loss selection mismatch");
    }

    const int L = 6, d = 8, n_heads = 2, dh = d / n_heads;
    auto rv = [&](std::size_t n, double s) {
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform(-s, s);
        return v;
    };
    const auto X = rv(static_cast<std::size_t>(L) * d, 1.0);
    const auto wq = rv(static_cast<std::size_t>(d) * d, 0.5), bq = rv(d, 0.2);
    const auto wk = rv(static_cast<std::size_t>(d) * d, 0.5), bk = rv(d, 0.2);
    const auto wv = rv(static_cast<std::size_t>(d) * d, 0.5), bv = rv(d, 0.2);
    const auto wo = rv(static_cast<std::size_t>(d) * d, 0.5), bo = rv(d, 0.2);

    auto linear = [&](const std::vector<double>& w, const std::vector<double>& b) {
        std::vector<double> out(static_cast<std::size_t>(L) * d, 0.0);
        for (int r = 0; r < L; ++r)
            for (int c = 0; c < d; ++c) {
                double s = b[static_cast<std::size_t>(c)];
                for (int k = 0; k < d; ++k)
                    s += X[static_cast<std::size_t>(r) * d + k] *
                         w[static_cast<std::size_t>(k) * d + c];
                out[static_cast<std::size_t>(r) * d + c] = s;
            }
        return out;
    };
    const auto Q = linear(wq, bq), K = linear(wk, bk), V = linear(wv, bv);
    std::vector<double> merged(static_cast<std::size_t>(L) * d, 0.0);
    for (int h = 0; h < n_heads; ++h)
        for (int i = 0; i < L; ++i) {
            std::vector<double> a(static_cast<std::size_t>(L));
            double mx = -1e300, z = 0.0;
            for (int j = 0; j < L; ++j) {
                double s = 0.0;
                for (int k = 0; k < dh; ++k)
                    s += Q[static_cast<std::size_t>(i) * d + h * dh + k] *
                         K[static_cast<std::size_t>(j) * d + h * dh + k];
                a[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, a[static_cast<std::size_t>(j)]);
            }
            for (double& s : a) z += (s = std::exp(s - mx));
            for (int k = 0; k < dh; ++k) {
                double s = 0.0;
                for (int j = 0; j < L; ++j)
                    s += (a[static_cast<std::size_t>(j)] / z) *
                         V[static_cast<std::size_t>(j) * d + h * dh + k];
                merged[static_cast<std::size_t>(i) * d + h * dh + k] = s;
            }
        }
    std::vector<double> ref(static_cast<std::size_t>(L) * d, 0.0);
    for (int r = 0; r < L; ++r)
        for (int c = 0; c < d; ++c) {
            double s = bo[static_cast<std::size_t>(c)];
            for (int k = 0; k < d; ++k)
                s += merged[static_cast<std::size_t>(r) * d + k] *
                     wo[static_cast<std::size_t>(k) * d + c];
            ref[static_cast<std::size_t>(r) * d + c] = s;
        }

    const ad::Tensor out = multi_head_attention(
        ad::Tensor::leaf({L, d}, X), ad::Tensor::leaf({L, d}, X),
        ad::Tensor::leaf({d, d}, wq), ad::Tensor::leaf({d}, bq),
        ad::Tensor::leaf({d, d}, wk), ad::Tensor::leaf({d}, bk),
        ad::Tensor::leaf({d, d}, wv), ad::Tensor::leaf({d}, bv),
        ad::Tensor::leaf({d, d}, wo), ad::Tensor::leaf({d}, bo), n_heads);
    double max_abs = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i)
        max_abs = std::max(max_abs, std::fabs(out.values()[i] - ref[i]));
    expect(o, max_abs < 1e-12, "attention vs naive loop diff " + std::to_string(max_abs));

    o.detail << "200 selection trials, attention max |diff| " << max_abs;
    return o;
}

// 4: the EMA recursion matches its closed form
Outcome criterion4() {
    Outcome o;
    LandmarkSet acc, est;
    acc.points = {{10.0, 20.0}, {5.0, 5.0}};
    est.points = {{14.0, 16.0}, {9.0, 1.0}};
    LandmarkSet one = acc;
    ema_update(one, est, 0.9);
    expect(o, std::fabs(one[0].x - (0.9 * 10.0 + 0.1 * 14.0)) < 1e-15, "single EMA step x");
    expect(o, std::fabs(one[1].y - (0.9 * 5.0 + 0.1 * 1.0)) < 1e-15, "single EMA step y");

    for (int k : {1, 3, 10, 40}) {
        LandmarkSet many = acc;
        for (int i = 0; i < k; ++i) ema_update(many, est, 0.9);
        const double tk = std::pow(0.9, k);
        for (std::size_t j = 0; j < acc.size(); ++j) {
            expect(o, std::fabs(many[j].x - (tk * acc[j].x + (1.0 - tk) * est[j].x)) < 1e-12,
                   "EMA closed form x after " + std::to_string(k));
            expect(o, std::fabs(many[j].y - (tk * acc[j].y + (1.0 - tk) * est[j].y)) < 1e-12,
                   "EMA closed form y after " + std::to_string(k));
        }
    }
    o.detail << "closed form holds for k in {1,3,10,40}";
    return o;
}

struct TrainingRuns {
    Dataset ds;
    double baseline = 0.0;
    std::vector<std::uint64_t> seeds{11, 22, 33};
    std::vector<StageOneArtifacts> stage1;
    std::vector<double> mre1;
    std::vector<double> mre2;
    double stage1_seconds = 0.0;
    double stage2_seconds = 0.0;
};

// 5: one-shot propagation beats the identity baseline by 2x on every-seed median
Outcome criterion5(TrainingRuns& runs) {
    Outcome o;
    runs.ds = acceptance_dataset();
    runs.baseline = identity_baseline_mre(runs.ds);
    const PipelineConfig cfg = acceptance_config();
    const auto t0 = clock_type::now();
    for (std::uint64_t seed : runs.seeds) {
        runs.stage1.push_back(train_stage1(runs.ds, cfg, seed));
        runs.mre1.push_back(labels_mre(runs.ds, runs.stage1.back().pseudo_labels));
    }
    runs.stage1_seconds = seconds_since(t0);
    const double med = median(runs.mre1);
    expect(o, med < 0.5 * runs.baseline,
           "median MRE " + std::to_string(med) + " vs baseline " + std::to_string(runs.baseline));
    expect(o, runs.stage1_seconds < 1800.0,
           "stage one took " + std::to_string(runs.stage1_seconds) + " s");
    o.detail << "baseline " << runs.baseline << ", seed MREs";
    for (double m : runs.mre1) o.detail << " " << m;
    o.detail << ", " << runs.stage1_seconds << " s";
    return o;
}

// 6: co-teaching refines the pseudo labels it was trained on
Outcome criterion6(TrainingRuns& runs) {
    Outcome o;
    const PipelineConfig cfg = acceptance_config();
    const auto t0 = clock_type::now();
    for (std::size_t i = 0; i < runs.seeds.size(); ++i) {
        const StageTwoArtifacts art =
            train_c2t(runs.ds, runs.stage1[i].pseudo_labels, cfg, runs.seeds[i]);
        runs.mre2.push_back(labels_mre(runs.ds, art.predictions));
        expect(o, runs.mre2.back() <= runs.mre1[i] * 1.05,
               "seed " + std::to_string(runs.seeds[i]) + " regressed: " +
                   std::to_string(runs.mre2.back()) + " vs " + std::to_string(runs.mre1[i]));
    }
    runs.stage2_seconds = seconds_since(t0);
    expect(o, median(runs.mre2) < median(runs.mre1),
           "median not improved: " + std::to_string(median(runs.mre2)) + " vs " +
               std::to_string(median(runs.mre1)));
    expect(o, runs.stage2_seconds < 1800.0,
           "stage two took " + std::to_string(runs.stage2_seconds) + " s");
    o.detail << "stage-two MREs";
    for (double m : runs.mre2) o.detail << " " << m;
    o.detail << " (stage-one medians " << median(runs.mre1) << " -> " << median(runs.mre2)
             << "), " << runs.stage2_seconds << " s";
    return o;
}

// 7: the small-loss filter rejects corrupted supervision, and the edge-guided
// similarity does not hurt registration accuracy
Outcome criterion7(TrainingRuns& runs) {
    Outcome o;
    const PipelineConfig cfg = acceptance_config();

    // (a) ablation: retrain one seed without the edge-guided similarity
    PipelineConfig plain = cfg;
    plain.stage1.use_esim = false;
    const StageOneArtifacts art_plain = train_stage1(runs.ds, plain, runs.seeds[0]);
    const double mre_plain = labels_mre(runs.ds, art_plain.pseudo_labels);
    const double mre_esim = runs.mre1[0];
    expect(o, mre_esim <= mre_plain * 1.05,
           "edge-guided similarity hurt accuracy: " + std::to_string(mre_esim) + " vs " +
               std::to_string(mre_plain));

    // (b) corrupt a third of the pseudo labels and check they are filtered out
    std::vector<LandmarkSet> pseudo = runs.stage1[0].pseudo_labels;
    const int n = static_cast<int>(pseudo.size());
    std::vector<int> corrupted;
    Rng rng(4242);
    while (static_cast<int>(corrupted.size()) < n / 3) {
        const int i = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
        if (std::find(corrupted.begin(), corrupted.end(), i) != corrupted.end()) continue;
        corrupted.push_back(i);
        for (auto& p : pseudo[static_cast<std::size_t>(i)].points) {
            p.x = rng.uniform(4.0, runs.ds.width - 5.0);
            p.y = rng.uniform(4.0, runs.ds.height - 5.0);
        }
    }
    PipelineConfig c2 = cfg;
    c2.stage2.eps_max = 0.8;
    c2.stage2.eps_ramp_frac = 0.3;
    const StageTwoArtifacts art = train_c2t(runs.ds, pseudo, c2, runs.seeds[0]);
    int excluded_f = 0, excluded_g = 0;
    for (int i : corrupted) {
        if (!art.selected_f[static_cast<std::size_t>(i)]) ++excluded_f;
        if (!art.selected_g[static_cast<std::size_t>(i)]) ++excluded_g;
    }
    const double rate_f = static_cast<double>(excluded_f) / corrupted.size();
    const double rate_g = static_cast<double>(excluded_g) / corrupted.size();
    expect(o, rate_f >= 0.7, "detector f excluded only " + std::to_string(rate_f));
    expect(o, rate_g >= 0.7, "detector g excluded only " + std::to_string(rate_g));

    o.detail << "ablation MRE " << mre_esim << " vs " << mre_plain << "; exclusion f " << rate_f
             << " g " << rate_g << " over " << corrupted.size() << " corrupted";
    return o;
}

// 8: artifacts are byte-identical across thread counts
Outcome criterion8(TrainingRuns& runs) {
    Outcome o;
    PipelineConfig cfg = acceptance_config();
    cfg.stage1.epochs = 4;
    cfg.stage2.epochs = 4;

    std::vector<StageOneArtifacts> s1;
    std::vector<StageTwoArtifacts> s2;
    for (int threads : {1, 2, 4}) {
        cfg.threads = threads;
        s1.push_back(train_stage1(runs.ds, cfg, 99));
        s2.push_back(train_c2t(runs.ds, s1.back().pseudo_labels, cfg, 99));
    }
    for (std::size_t i = 1; i < s1.size(); ++i) {
        expect(o, stores_identical(s1[0].params, s1[i].params),
               "stage-one weights differ across thread counts");
        expect(o, labels_identical(s1[0].pseudo_labels, s1[i].pseudo_labels),
               "pseudo labels differ across thread counts");
        expect(o, stores_identical(s2[0].params_f, s2[i].params_f),
               "detector f weights differ across thread counts");
        expect(o, stores_identical(s2[0].params_g, s2[i].params_g),
               "detector g weights differ across thread counts");
        expect(o, labels_identical(s2[0].predictions, s2[i].predictions),
               "stage-two predictions differ across thread counts");
    }
    o.detail << "threads {1,2,4} byte-identical";
    return o;
}

}  // namespace

int main() {
    TrainingRuns runs;
    bool all_pass = true;
    const auto report = [&](int id, Outcome o) {
        std::cout << "CRITERION " << id << ": " << (o.pass ? "PASS" : "FAIL") << " — "
                  << o.detail.str() << std::endl;
        all_pass = all_pass && o.pass;
    };
    try {
        report(1, criterion1());
        report(2, criterion2());
        report(3, criterion3());
        report(4, criterion4());
        report(5, criterion5(runs));
        report(6, criterion6(runs));
        report(7, criterion7(runs));
        report(8, criterion8(runs));
    } catch (const std::exception& e) {
        std::cout << "ACCEPTANCE ABORTED: " << e.what() << std::endl;
        return 2;
    }
    return all_pass ? 0 : 1;
}
