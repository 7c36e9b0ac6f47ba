// grid.hpp - image-grid primitives: differentiable bilinear sampling,
// Gaussian heatmaps, Sobel edges, and heatmap-to-landmark decoding.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "morphmark/image.hpp"

namespace morphmark {

// N x H x W Gaussian target/prediction maps, unnormalized peak 1.
struct HeatmapStack {
    int count = 0;
    int height = 0;
    int width = 0;
    double sigma = 0.0;
    std::vector<double> maps;  // [n][y][x]

    HeatmapStack() = default;
    HeatmapStack(int n, int h, int w, double s = 0.0)
        : count(n), height(h), width(w), sigma(s),
          maps(static_cast<std::size_t>(n) * h * w, 0.0) {}

    double* map(int n) { return maps.data() + static_cast<std::size_t>(n) * height * width; }
    const double* map(int n) const {
        return maps.data() + static_cast<std::size_t>(n) * height * width;
    }
    double at(int n, int y, int x) const { return map(n)[static_cast<std::size_t>(y) * width + x]; }
    double& at(int n, int y, int x) { return map(n)[static_cast<std::size_t>(y) * width + x]; }
};

// Per-pixel horizontal/vertical Sobel responses (gx, gy), each /8-normalized.
struct EdgeMap {
    int height = 0;
    int width = 0;
    std::vector<double> gx;
    std::vector<double> gy;

    EdgeMap() = default;
    EdgeMap(int h, int w)
        : height(h), width(w),
          gx(static_cast<std::size_t>(h) * w, 0.0), gy(static_cast<std::size_t>(h) * w, 0.0) {}

    double squared_magnitude(int y, int x) const {
        const std::size_t i = static_cast<std::size_t>(y) * width + x;
        return gx[i] * gx[i] + gy[i] * gy[i];
    }
};

// ---------------------------------------------------------------------------
// Bilinear sampling, border-replicate padding
// ---------------------------------------------------------------------------

// Value plus analytic partials at a single continuous coordinate.
struct BilinearSample {
    double value = 0.0;
    double d_dx = 0.0;  // d value / d x-coordinate
    double d_dy = 0.0;
    // the four participating pixels and their weights (d value / d pixel value)
    int ix[4] = {0, 0, 0, 0};
    int iy[4] = {0, 0, 0, 0};
    double w[4] = {0.0, 0.0, 0.0, 0.0};
};

inline BilinearSample bilinear_sample_at(const double* values, int height, int width,
                                         double x, double y) {
    if (!std::isfinite(x) || !std::isfinite(y))
        throw std::invalid_argument("bilinear_sample: non-finite coordinate");

    // clamp to the grid; the coordinate derivative vanishes past the border
    const double cx = std::min(static_cast<double>(width - 1), std::max(0.0, x));
    const double cy = std::min(static_cast<double>(height - 1), std::max(0.0, y));
    const bool clamped_x = (cx != x);
    const bool clamped_y = (cy != y);

    int x0 = static_cast<int>(std::floor(cx));
    int y0 = static_cast<int>(std::floor(cy));
    if (x0 > width - 2) x0 = std::max(0, width - 2);
    if (y0 > height - 2) y0 = std::max(0, height - 2);
    const int x1 = std::min(width - 1, x0 + 1);
    const int y1 = std::min(height - 1, y0 + 1);
    const double fx = cx - x0;
    const double fy = cy - y0;

    const double v00 = values[static_cast<std::size_t>(y0) * width + x0];
    const double v01 = values[static_cast<std::size_t>(y0) * width + x1];
    const double v10 = values[static_cast<std::size_t>(y1) * width + x0];
    const double v11 = values[static_cast<std::size_t>(y1) * width + x1];

    BilinearSample s;
    s.value = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
    s.d_dx = clamped_x ? 0.0 : (1 - fy) * (v01 - v00) + fy * (v11 - v10);
    s.d_dy = clamped_y ? 0.0 : (1 - fx) * (v10 - v00) + fx * (v11 - v01);
    s.ix[0] = x0; s.iy[0] = y0; s.w[0] = (1 - fy) * (1 - fx);
    s.ix[1] = x1; s.iy[1] = y0; s.w[1] = (1 - fy) * fx;
    s.ix[2] = x0; s.iy[2] = y1; s.w[2] = fy * (1 - fx);
    s.ix[3] = x1; s.iy[3] = y1; s.w[3] = fy * fx;
    return s;
}

inline BilinearSample bilinear_sample_at(const Image& img, double x, double y) {
    return bilinear_sample_at(img.values.data(), img.height, img.width, x, y);
}

inline std::vector<double> bilinear_sample(const Image& img,
                                           const std::vector<Landmark>& coords) {
    std::vector<double> out;
    out.reserve(coords.size());
    for (const auto& c : coords) out.push_back(bilinear_sample_at(img, c.x, c.y).value);
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian heatmaps
// ---------------------------------------------------------------------------

inline HeatmapStack gaussian_heatmap(const LandmarkSet& points, int height, int width,
                                     double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("gaussian_heatmap: sigma must be > 0");
    if (points.size() == 0) throw std::invalid_argument("gaussian_heatmap: empty landmark set");
    HeatmapStack hs(static_cast<int>(points.size()), height, width, sigma);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (int n = 0; n < hs.count; ++n) {
        double* m = hs.map(n);
        const double px = points[n].x;
        const double py = points[n].y;
        for (int y = 0; y < height; ++y) {
            const double dy2 = (y - py) * (y - py);
            for (int x = 0; x < width; ++x) {
                const double d2 = (x - px) * (x - px) + dy2;
                m[static_cast<std::size_t>(y) * width + x] = std::exp(-d2 * inv2s2);
            }
        }
    }
    return hs;
}

// averaged single-channel mask over landmarks (the Mask(.) of the loss module)
inline Image heatmap_mask(const LandmarkSet& points, int height, int width, double sigma) {
    HeatmapStack hs = gaussian_heatmap(points, height, width, sigma);
    Image mask(height, width);
    const double inv_n = 1.0 / hs.count;
    for (int n = 0; n < hs.count; ++n) {
        const double* m = hs.map(n);
        for (std::size_t i = 0; i < mask.size(); ++i) mask.values[i] += m[i] * inv_n;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Sobel edges, border-replicate, /8 normalization
// ---------------------------------------------------------------------------

inline EdgeMap sobel_edges(const Image& img) {
    const int h = img.height, w = img.width;
    EdgeMap em(h, w);
    auto pix = [&](int y, int x) {
        y = std::min(h - 1, std::max(0, y));
        x = std::min(w - 1, std::max(0, x));
        return img.at(y, x);
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double tl = pix(y - 1, x - 1), tc = pix(y - 1, x), tr = pix(y - 1, x + 1);
            const double ml = pix(y, x - 1), mr = pix(y, x + 1);
            const double bl = pix(y + 1, x - 1), bc = pix(y + 1, x), br = pix(y + 1, x + 1);
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            em.gx[i] = ((tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)) / 8.0;
            em.gy[i] = ((bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)) / 8.0;
        }
    }
    return em;
}

// edge magnitude rescaled to [0,1]; with /8 kernels the magnitude of a [0,1]
// image is bounded by sqrt(0.5)
inline Image edge_magnitude(const EdgeMap& em) {
    constexpr double kMaxMag = 0.70710678118654752440;  // sqrt(1/2)
    Image mag(em.height, em.width);
    for (std::size_t i = 0; i < mag.size(); ++i) {
        mag.values[i] = std::sqrt(em.gx[i] * em.gx[i] + em.gy[i] * em.gy[i]) / kMaxMag;
    }
    return mag;
}

// ---------------------------------------------------------------------------
// Heatmap decoding: argmax + 3x3 baseline-subtracted center of mass
// ---------------------------------------------------------------------------

struct DecodeResult {
    LandmarkSet landmarks;
    bool degenerate = false;  // at least one all-equal map hit the fallback
};

inline DecodeResult decode_landmarks(const HeatmapStack& hs) {
    DecodeResult res;
    const int h = hs.height, w = hs.width;
    for (int n = 0; n < hs.count; ++n) {
        const double* m = hs.map(n);
        std::size_t best = 0;
        bool all_equal = true;
        for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) {
            if (!std::isfinite(m[i]))
                throw std::invalid_argument("decode_landmarks: non-finite heatmap value");
            if (m[i] > m[best]) best = i;  // strict > keeps the lowest row-major index on ties
            if (m[i] != m[0]) all_equal = false;
        }
        if (all_equal) {
            res.degenerate = true;
            res.landmarks.points.push_back({(w - 1) / 2.0, (h - 1) / 2.0});
            continue;
        }
        const int ax = static_cast<int>(best % w);
        const int ay = static_cast<int>(best / w);

        // 3x3 center of mass around the argmax, after subtracting the local
        // minimum so the offset is not washed out by the Gaussian pedestal
        double wmin = m[best];
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int yy = std::min(h - 1, std::max(0, ay + dy));
                const int xx = std::min(w - 1, std::max(0, ax + dx));
                wmin = std::min(wmin, m[static_cast<std::size_t>(yy) * w + xx]);
            }
        }
        double sw = 0.0, sx = 0.0, sy = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int yy = std::min(h - 1, std::max(0, ay + dy));
                const int xx = std::min(w - 1, std::max(0, ax + dx));
                const double ww = m[static_cast<std::size_t>(yy) * w + xx] - wmin;
                sw += ww;
                sx += ww * xx;
                sy += ww * yy;
            }
        }
        if (sw > 0.0) {
            res.landmarks.points.push_back({sx / sw, sy / sw});
        } else {
            res.landmarks.points.push_back({static_cast<double>(ax), static_cast<double>(ay)});
        }
    }
    return res;
}

}  // namespace morphmark
