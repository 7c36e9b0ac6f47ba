// perspective.hpp - random 8-dof perspective warps with exact dense
// displacement fields, used to synthesize training pairs with known
// correspondence.
#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include "morphmark/field.hpp"
#include "morphmark/image.hpp"
#include "morphmark/rng.hpp"

namespace morphmark {

// 3x3 homography mapping output pixel coordinates to source pixel
// coordinates (backward, same convention as DeformationField).
struct PerspectiveMap {
    std::array<double, 9> h{1, 0, 0, 0, 1, 0, 0, 0, 1};

    void apply(double x, double y, double& u, double& v) const {
        const double w = h[6] * x + h[7] * y + h[8];
        u = (h[0] * x + h[1] * y + h[2]) / w;
        v = (h[3] * x + h[4] * y + h[5]) / w;
    }

    // adjugate-based inverse (homographies are scale-free)
    PerspectiveMap inverse() const {
        PerspectiveMap inv;
        inv.h[0] = h[4] * h[8] - h[5] * h[7];
        inv.h[1] = h[2] * h[7] - h[1] * h[8];
        inv.h[2] = h[1] * h[5] - h[2] * h[4];
        inv.h[3] = h[5] * h[6] - h[3] * h[8];
        inv.h[4] = h[0] * h[8] - h[2] * h[6];
        inv.h[5] = h[2] * h[3] - h[0] * h[5];
        inv.h[6] = h[3] * h[7] - h[4] * h[6];
        inv.h[7] = h[1] * h[6] - h[0] * h[7];
        inv.h[8] = h[0] * h[4] - h[1] * h[3];
        const double det = h[0] * inv.h[0] + h[1] * inv.h[3] + h[2] * inv.h[6];
        if (std::fabs(det) < 1e-12)
            throw std::runtime_error("PerspectiveMap: singular, cannot invert");
        for (double& v : inv.h) v /= det;
        return inv;
    }
};

namespace detail {

// solve the 8x8 DLT system for a homography from 4 point correspondences
// (x,y) -> (u,v); throws on a numerically singular configuration
inline PerspectiveMap homography_from_corners(const double (&x)[4], const double (&y)[4],
                                              const double (&u)[4], const double (&v)[4]) {
    double a[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double* r0 = a[2 * i];
        double* r1 = a[2 * i + 1];
        r0[0] = x[i]; r0[1] = y[i]; r0[2] = 1.0;
        r0[6] = -x[i] * u[i]; r0[7] = -y[i] * u[i]; r0[8] = u[i];
        r1[3] = x[i]; r1[4] = y[i]; r1[5] = 1.0;
        r1[6] = -x[i] * v[i]; r1[7] = -y[i] * v[i]; r1[8] = v[i];
    }
    // gaussian elimination with partial pivoting on the augmented system
    for (int col = 0; col < 8; ++col) {
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
        if (std::fabs(a[piv][col]) < 1e-12)
            throw std::runtime_error("homography_from_corners: singular system");
        if (piv != col)
            for (int c = 0; c < 9; ++c) std::swap(a[piv][c], a[col][c]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            for (int c = col; c < 9; ++c) a[r][c] -= f * a[col][c];
        }
    }
    PerspectiveMap m;
    for (int i = 0; i < 8; ++i) m.h[i] = a[i][8] / a[i][i];
    m.h[8] = 1.0;
    return m;
}

inline bool quad_is_convex(const double (&x)[4], const double (&y)[4]) {
    // corners ordered TL, TR, BR, BL; all cross products must share a sign
    double sign = 0.0;
    for (int i = 0; i < 4; ++i) {
        const int j = (i + 1) % 4, k = (i + 2) % 4;
        const double cx = (x[j] - x[i]) * (y[k] - y[j]) - (y[j] - y[i]) * (x[k] - x[j]);
        if (std::fabs(cx) < 1e-9) return false;
        if (sign == 0.0) sign = cx;
        else if (sign * cx < 0.0) return false;
    }
    return true;
}

}  // namespace detail

struct PerspectiveWarp {
    PerspectiveMap map;
    DeformationField field;  // exact: dx(x,y) = u(x,y) - x, dy = v(x,y) - y
};

// Corner jitter bounded by strength * 15% of the image extent; degenerate
// (non-convex) corner quadrilaterals are resampled internally.
inline PerspectiveWarp random_perspective(std::uint64_t seed, double strength,
                                          int height, int width) {
    if (strength < 0.0 || strength > 1.0)
        throw std::invalid_argument("random_perspective: strength must be in [0,1]");
    const double x0[4] = {0.0, double(width - 1), double(width - 1), 0.0};
    const double y0[4] = {0.0, 0.0, double(height - 1), double(height - 1)};
    const double jx = strength * 0.15 * (width - 1);
    const double jy = strength * 0.15 * (height - 1);

    Rng rng(seed);
    PerspectiveWarp out;
    if (strength == 0.0) {
        out.field = DeformationField(height, width);
        return out;  // exact identity, zero field
    }
    for (int attempt = 0; attempt < 256; ++attempt) {
        double u[4], v[4];
        for (int i = 0; i < 4; ++i) {
            u[i] = x0[i] + rng.uniform(-jx, jx);
            v[i] = y0[i] + rng.uniform(-jy, jy);
        }
        if (!detail::quad_is_convex(u, v)) continue;
        try {
            out.map = detail::homography_from_corners(x0, y0, u, v);
        } catch (const std::runtime_error&) {
            continue;
        }
        out.field = DeformationField(height, width);
        bool ok = true;
        for (int y = 0; y < height && ok; ++y) {
            for (int x = 0; x < width; ++x) {
                double su, sv;
                out.map.apply(x, y, su, sv);
                if (!std::isfinite(su) || !std::isfinite(sv)) { ok = false; break; }
                const std::size_t i = static_cast<std::size_t>(y) * width + x;
                out.field.dx[i] = su - x;
                out.field.dy[i] = sv - y;
            }
        }
        if (ok) return out;
    }
    throw std::runtime_error("random_perspective: failed to sample a non-degenerate warp");
}

// direct perspective resampling, the reference against which the returned
// field is validated
inline Image warp_perspective(const Image& img, const PerspectiveMap& map) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            double u, v;
            map.apply(x, y, u, v);
            out.at(y, x) = bilinear_sample_at(img, u, v).value;
        }
    }
    out.clamp01();
    return out;
}

}  // namespace morphmark
