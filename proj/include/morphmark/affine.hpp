// affine.hpp - global affine transform: construction from the raw 6-vector,
// image warping (backward, spatial-transformer convention on normalized
// [-1,1]^2 coordinates) and the matching forward landmark transport.
#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include "morphmark/grid.hpp"
#include "morphmark/image.hpp"

namespace morphmark {

// Transformation-intensity hyperparameters (sf_x, sf_y, rot, sh).
struct AffineIntensities {
    double sf_x = 1.0;
    double sf_y = 1.0;
    double rot = 1.5707963267948966;  // pi/2
    double sh = 1.5707963267948966;
};

// Raw network outputs o in (-1,1)^6 plus the intensities that scale them.
struct AffineParams {
    std::array<double, 6> o{};  // (t_x, t_y, s_x-delta, s_y-delta, rotation, shear)
    AffineIntensities intensities;
};

// 2x3 matrix acting on normalized coordinates; maps *output* coordinates to
// *source* coordinates (backward warp).
struct AffineTransform {
    // row-major: [m00 m01 m02; m10 m11 m12]
    std::array<double, 6> m{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

    static AffineTransform identity() { return AffineTransform{}; }

    void apply(double x, double y, double& u, double& v) const {
        u = m[0] * x + m[1] * y + m[2];
        v = m[3] * x + m[4] * y + m[5];
    }

    double det2x2() const { return m[0] * m[4] - m[1] * m[3]; }

    AffineTransform inverse() const {
        const double d = det2x2();
        if (std::fabs(d) < 1e-8)
            throw std::runtime_error("AffineTransform: singular 2x2 block, cannot invert");
        AffineTransform inv;
        inv.m[0] = m[4] / d;
        inv.m[1] = -m[1] / d;
        inv.m[3] = -m[3] / d;
        inv.m[4] = m[0] / d;
        inv.m[2] = -(inv.m[0] * m[2] + inv.m[1] * m[5]);
        inv.m[5] = -(inv.m[3] * m[2] + inv.m[4] * m[5]);
        return inv;
    }

    // composition: (this o other)(x) = this(other(x))
    AffineTransform compose(const AffineTransform& other) const {
        AffineTransform out;
        out.m[0] = m[0] * other.m[0] + m[1] * other.m[3];
        out.m[1] = m[0] * other.m[1] + m[1] * other.m[4];
        out.m[2] = m[0] * other.m[2] + m[1] * other.m[5] + m[2];
        out.m[3] = m[3] * other.m[0] + m[4] * other.m[3];
        out.m[4] = m[3] * other.m[1] + m[4] * other.m[4];
        out.m[5] = m[3] * other.m[2] + m[4] * other.m[5] + m[5];
        return out;
    }
};

// t_x=o1, t_y=o2, s_x=1+o3*sf_x, s_y=1+o4*sf_y, alpha=o5*rot, beta=o6*sh,
// assembled into the composite scale/rotation/shear/translation matrix.
inline AffineTransform affine_from_params(const AffineParams& p) {
    const auto& in = p.intensities;
    if (in.sf_x <= 0.0 || in.sf_y <= 0.0 || in.rot <= 0.0 || in.sh <= 0.0)
        throw std::invalid_argument("affine_from_params: intensities must be positive");
    const double tx = p.o[0];
    const double ty = p.o[1];
    const double sx = 1.0 + p.o[2] * in.sf_x;
    const double sy = 1.0 + p.o[3] * in.sf_y;
    const double alpha = p.o[4] * in.rot;
    const double beta = p.o[5] * in.sh;
    if (std::fabs(beta) >= 1.5707963267948966)
        throw std::invalid_argument("affine_from_params: |shear angle| >= pi/2, tan singular");
    const double ca = std::cos(alpha), sa = std::sin(alpha), tb = std::tan(beta);
    AffineTransform A;
    A.m[0] = sx * ca;
    A.m[1] = sx * (ca * tb + sa);
    A.m[2] = tx;
    A.m[3] = -sy * sa;
    A.m[4] = sy * (-sa * tb + ca);
    A.m[5] = ty;
    return A;
}

// pixel <-> normalized [-1,1] coordinate maps (pixel-center aligned)
inline double to_norm(double p, int extent) { return 2.0 * p / (extent - 1) - 1.0; }
inline double to_pixel(double n, int extent) { return (n + 1.0) * 0.5 * (extent - 1); }

// Pixel-space source coordinate for one row (a, b, c) of a normalized-space
// matrix, i.e. to_pixel(a*to_norm(p) + b*to_norm(q) + c) with the algebra
// arranged so the identity row maps every pixel to itself bitwise: warping by
// the identity must be the exact identity, not identity up to rounding.
inline double affine_source_pixel(double a, double b, double c, double p, double q,
                                  int p_extent, int q_extent) {
    const double cp = 0.5 * (p_extent - 1), cq = 0.5 * (q_extent - 1);
    return a * p + b * (cp / cq) * q + cp * (((c + 1.0) - a) - b);
}

inline Image warp_affine(const Image& img, const AffineTransform& A) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double px =
                affine_source_pixel(A.m[0], A.m[1], A.m[2], x, y, img.width, img.height);
            const double py =
                affine_source_pixel(A.m[4], A.m[3], A.m[5], y, x, img.height, img.width);
            out.at(y, x) = bilinear_sample_at(img, px, py).value;
        }
    }
    out.clamp01();
    return out;
}

// Landmarks ride image content, so they move by the forward map: the inverse
// of the backward sampling map used by warp_affine.
inline LandmarkSet apply_affine_points(const LandmarkSet& pts, const AffineTransform& A,
                                       int height, int width) {
    const AffineTransform inv = A.inverse();
    LandmarkSet out;
    out.points.reserve(pts.size());
    for (const auto& p : pts) {
        out.points.push_back(
            {affine_source_pixel(inv.m[0], inv.m[1], inv.m[2], p.x, p.y, width, height),
             affine_source_pixel(inv.m[4], inv.m[3], inv.m[5], p.y, p.x, height, width)});
    }
    return out;
}

}  // namespace morphmark
