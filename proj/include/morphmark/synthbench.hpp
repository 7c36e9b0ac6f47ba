// synthbench.hpp - procedural benchmark corpus: a template image with known
// landmark structures, per-image perspective warps with exact ground truth,
// dataset directory IO (dataset.json manifest), and MRE/SDR evaluation.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphmark/grid.hpp"
#include "morphmark/image.hpp"
#include "morphmark/perspective.hpp"
#include "morphmark/rng.hpp"

namespace morphmark {

struct SynthConfig {
    std::uint64_t seed = 1;
    int n_images = 20;
    int height = 64;
    int width = 64;
    int n_landmarks = 6;
    double warp_strength = 0.6;  // forwarded to random_perspective
    double noise_std = 0.01;
};

struct Dataset {
    int height = 0;
    int width = 0;
    int n_landmarks = 0;
    int exemplar_index = 0;
    std::vector<Image> images;
    std::vector<LandmarkSet> truth;
    std::vector<int> flip_permutation;  // empty: flips disabled in augmentation
};

// Distinct blob structures (alternating polarity) on a smooth low-frequency
// background, plus a few distractor ridges so edge losses have texture to
// work with away from the landmarks.
inline Image make_template(std::uint64_t seed, int height, int width, int n_landmarks,
                           LandmarkSet& landmarks) {
    if (n_landmarks < 1) throw std::invalid_argument("make_template: n_landmarks must be >= 1");
    Rng rng(seed);
    Image img(height, width);

    const double fx = rng.uniform(1.0, 2.0), fy = rng.uniform(1.0, 2.0);
    const double px = rng.uniform(0.0, 6.28), py = rng.uniform(0.0, 6.28);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            img.at(y, x) = 0.4 + 0.1 * std::sin(6.28318530717958648 * fx * x / width + px) *
                                     std::sin(6.28318530717958648 * fy * y / height + py);

    // locally distinctive texture: a smooth random field (~8 px correlation,
    // bilinearly interpolated coarse noise) so that small neighbourhoods are
    // identifiable, as registration needs
    {
        const int gw = std::max(2, width / 8), gh = std::max(2, height / 8);
        std::vector<double> grid(static_cast<std::size_t>(gw) * gh);
        for (double& v : grid) v = rng.uniform(-1.0, 1.0);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double u = static_cast<double>(x) * (gw - 1) / (width - 1);
                const double v = static_cast<double>(y) * (gh - 1) / (height - 1);
                const int x0 = std::min(static_cast<int>(u), gw - 2);
                const int y0 = std::min(static_cast<int>(v), gh - 2);
                const double ax = u - x0, ay = v - y0;
                const double top = grid[static_cast<std::size_t>(y0) * gw + x0] * (1 - ax) +
                                   grid[static_cast<std::size_t>(y0) * gw + x0 + 1] * ax;
                const double bot = grid[static_cast<std::size_t>(y0 + 1) * gw + x0] * (1 - ax) +
                                   grid[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1] * ax;
                img.at(y, x) += 0.12 * (top * (1 - ay) + bot * ay);
            }
    }

    // landmark positions: jittered cells of a near-square grid, margin kept
    // so moderate warps do not push points out of frame
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_landmarks))));
    const int rows = (n_landmarks + cols - 1) / cols;
    const double mx = 0.18 * (width - 1), my = 0.18 * (height - 1);
    landmarks.points.clear();
    for (int k = 0; k < n_landmarks; ++k) {
        const int cr = k / cols, cc = k % cols;
        const double cw = (width - 1 - 2 * mx) / cols;
        const double ch = (height - 1 - 2 * my) / rows;
        const double cx = mx + (cc + 0.5) * cw + rng.uniform(-0.25, 0.25) * cw;
        const double cy = my + (cr + 0.5) * ch + rng.uniform(-0.25, 0.25) * ch;
        landmarks.points.push_back({cx, cy});

        const double rs = rng.uniform(0.045, 0.06) * std::min(width, height);
        const double sign = (k % 2 == 0) ? 1.0 : -1.0;
        // unique amplitude per landmark so blobs are locally distinguishable
        const double amp = 0.25 + 0.12 * (k % 3);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                // broad blob with an opposite-sign core: a sharp, symmetric peak
                img.at(y, x) += sign * (amp * std::exp(-d2 / (2.0 * rs * rs)) -
                                        (amp + 0.1) * std::exp(-d2 / (2.0 * rs * rs / 9.0)));
            }
    }

    // two distractor ridges
    for (int l = 0; l < 2; ++l) {
        const double x0 = rng.uniform(0.1, 0.9) * (width - 1);
        const double y0 = rng.uniform(0.1, 0.9) * (height - 1);
        const double ang = rng.uniform(0.0, 3.14159265358979324);
        const double nx = -std::sin(ang), ny = std::cos(ang);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double d = nx * (x - x0) + ny * (y - y0);
                img.at(y, x) += 0.08 * std::exp(-d * d / 2.0);
            }
    }
    img.clamp01();
    return img;
}

// Image 0 is the unwarped exemplar; every other image is a perspective warp
// of the template with exact landmark truth, followed by intensity jitter
// and pixel noise.
inline Dataset generate_dataset(const SynthConfig& cfg) {
    if (cfg.n_images < 2) throw std::invalid_argument("generate_dataset: need at least 2 images");
    Dataset ds;
    ds.height = cfg.height;
    ds.width = cfg.width;
    ds.n_landmarks = cfg.n_landmarks;
    ds.exemplar_index = 0;

    Rng rng(cfg.seed);
    LandmarkSet tmpl_lm;
    const Image tmpl = make_template(rng.next_u64(), cfg.height, cfg.width, cfg.n_landmarks, tmpl_lm);
    ds.images.push_back(tmpl);
    ds.truth.push_back(tmpl_lm);

    for (int i = 1; i < cfg.n_images; ++i) {
        Image img;
        LandmarkSet lm;
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const PerspectiveWarp w =
                random_perspective(rng.next_u64(), cfg.warp_strength, cfg.height, cfg.width);
            const PerspectiveMap fwd = w.map.inverse();
            LandmarkSet cand;
            for (const auto& p : tmpl_lm.points) {
                double u, v;
                fwd.apply(p.x, p.y, u, v);
                cand.points.push_back({u, v});
            }
            if (cand.any_outside(cfg.height, cfg.width)) continue;
            img = warp_perspective(tmpl, w.map);
            lm = cand;
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("generate_dataset: could not keep landmarks in frame; "
                                     "lower warp_strength");

        const double gain = rng.uniform(0.9, 1.1);
        const double offset = rng.uniform(-0.05, 0.05);
        for (double& v : img.values) v = gain * v + offset + rng.normal(0.0, cfg.noise_std);
        img.clamp01();
        ds.images.push_back(img);
        ds.truth.push_back(lm);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// dataset directory layout:
//   dataset.json, images/img_NNNN.png, truth/lm_NNNN.csv
// ---------------------------------------------------------------------------

namespace detail {
inline std::string index_name(const char* stem, int i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s%04d%s", stem, i, ext);
    return buf;
}
}  // namespace detail

inline void write_dataset(const std::string& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "truth");
    nlohmann::json manifest;
    manifest["height"] = ds.height;
    manifest["width"] = ds.width;
    manifest["n_landmarks"] = ds.n_landmarks;
    manifest["exemplar_index"] = ds.exemplar_index;
    if (!ds.flip_permutation.empty()) manifest["flip_permutation"] = ds.flip_permutation;
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const std::string img_rel = "images/" + detail::index_name("img_", static_cast<int>(i), ".png");
        const std::string lm_rel = "truth/" + detail::index_name("lm_", static_cast<int>(i), ".csv");
        write_png_gray((fs::path(dir) / img_rel).string(), ds.images[i]);
        write_landmarks_csv((fs::path(dir) / lm_rel).string(), ds.truth[i]);
        items.push_back({{"image", img_rel}, {"landmarks", lm_rel}});
    }
    manifest["items"] = items;
    std::ofstream out((fs::path(dir) / "dataset.json").string());
    if (!out) throw std::runtime_error("cannot write dataset manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in((fs::path(dir) / "dataset.json").string());
    if (!in) throw std::runtime_error("cannot open dataset manifest in " + dir);
    nlohmann::json manifest;
    in >> manifest;

    Dataset ds;
    ds.height = manifest.at("height").get<int>();
    ds.width = manifest.at("width").get<int>();
    ds.n_landmarks = manifest.at("n_landmarks").get<int>();
    ds.exemplar_index = manifest.at("exemplar_index").get<int>();
    if (manifest.contains("flip_permutation"))
        ds.flip_permutation = manifest["flip_permutation"].get<std::vector<int>>();
    for (const auto& item : manifest.at("items")) {
        Image img = read_png_gray((fs::path(dir) / item.at("image").get<std::string>()).string());
        if (img.height != ds.height || img.width != ds.width)
            throw std::runtime_error("dataset image size differs from the manifest in " + dir);
        LandmarkSet lm =
            read_landmarks_csv((fs::path(dir) / item.at("landmarks").get<std::string>()).string());
        if (static_cast<int>(lm.size()) != ds.n_landmarks)
            throw std::runtime_error("dataset landmark count differs from the manifest in " + dir);
        ds.images.push_back(std::move(img));
        ds.truth.push_back(std::move(lm));
    }
    if (ds.exemplar_index < 0 || ds.exemplar_index >= static_cast<int>(ds.images.size()))
        throw std::runtime_error("dataset exemplar_index out of range in " + dir);
    return ds;
}

// ---------------------------------------------------------------------------
// evaluation: mean/median radial error and success-detection rates
// ---------------------------------------------------------------------------

struct EvalReport {
    double mre = 0.0;
    double median_re = 0.0;
    std::vector<double> sdr_thresholds;
    std::vector<double> sdr;  // fraction of landmarks within each threshold
};

inline EvalReport evaluate_landmarks(const std::vector<LandmarkSet>& pred,
                                     const std::vector<LandmarkSet>& truth,
                                     std::vector<double> thresholds = {2.0, 4.0, 8.0}) {
    if (pred.size() != truth.size() || pred.empty())
        throw std::invalid_argument("evaluate_landmarks: set count mismatch or empty");
    std::vector<double> errors;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].size() != truth[i].size())
            throw std::invalid_argument("evaluate_landmarks: landmark count mismatch");
        for (std::size_t j = 0; j < pred[i].size(); ++j) {
            const double dx = pred[i][j].x - truth[i][j].x;
            const double dy = pred[i][j].y - truth[i][j].y;
            errors.push_back(std::sqrt(dx * dx + dy * dy));
        }
    }
    EvalReport rep;
    rep.sdr_thresholds = std::move(thresholds);
    double s = 0.0;
    for (double e : errors) s += e;
    rep.mre = s / static_cast<double>(errors.size());
    std::vector<double> sorted = errors;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    rep.median_re = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    for (double t : rep.sdr_thresholds) {
        std::size_t hit = 0;
        for (double e : errors)
            if (e <= t) ++hit;
        rep.sdr.push_back(static_cast<double>(hit) / static_cast<double>(n));
    }
    return rep;
}

}  // namespace morphmark
