// field.hpp - dense per-pixel displacement fields in backward-warp
// convention: warped(x,y) = source(x + dx(x,y), y + dy(x,y)).
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphmark/grid.hpp"
#include "morphmark/image.hpp"

namespace morphmark {

struct DeformationField {
    int height = 0;
    int width = 0;
    std::vector<double> dx;  // pixels, row-major
    std::vector<double> dy;

    DeformationField() = default;
    DeformationField(int h, int w)
        : height(h), width(w),
          dx(static_cast<std::size_t>(h) * w, 0.0), dy(static_cast<std::size_t>(h) * w, 0.0) {}

    std::size_t size() const { return dx.size(); }

    bool finite() const {
        for (double v : dx)
            if (!std::isfinite(v)) return false;
        for (double v : dy)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline Image warp_field(const Image& img, const DeformationField& f) {
    if (f.height != img.height || f.width != img.width)
        throw std::invalid_argument("warp_field: field shape does not match image");
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
            out.at(y, x) = bilinear_sample_at(img, x + f.dx[i], y + f.dy[i]).value;
        }
    }
    out.clamp01();
    return out;
}

// p' = p + sign * Phi(p), Phi bilinearly sampled at p. The literal equation
// uses sign=+1; the sign consistent with the backward field convention is -1
// and is selected through config (field_point_sign).
inline LandmarkSet apply_field_points(const LandmarkSet& pts, const DeformationField& f,
                                      int sign) {
    if (sign != 1 && sign != -1)
        throw std::invalid_argument("apply_field_points: sign must be +1 or -1");
    LandmarkSet out;
    out.points.reserve(pts.size());
    for (const auto& p : pts) {
        const double ddx = bilinear_sample_at(f.dx.data(), f.height, f.width, p.x, p.y).value;
        const double ddy = bilinear_sample_at(f.dy.data(), f.height, f.width, p.x, p.y).value;
        out.points.push_back({p.x + sign * ddx, p.y + sign * ddy});
    }
    return out;
}

// ---------------------------------------------------------------------------
// .dfield serialization: u32 LE height, u32 LE width, then the dx plane and
// the dy plane as little-endian float32.
// ---------------------------------------------------------------------------

inline void write_dfield(const std::string& path, const DeformationField& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open .dfield for writing: " + path);
    const std::uint32_t h = static_cast<std::uint32_t>(f.height);
    const std::uint32_t w = static_cast<std::uint32_t>(f.width);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    std::vector<float> buf(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) buf[i] = static_cast<float>(f.dx[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    for (std::size_t i = 0; i < f.size(); ++i) buf[i] = static_cast<float>(f.dy[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!out) throw std::runtime_error("short write on .dfield: " + path);
}

inline DeformationField read_dfield(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open .dfield for reading: " + path);
    std::uint32_t h = 0, w = 0;
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    if (!in || h == 0 || w == 0) throw std::runtime_error("malformed .dfield header: " + path);
    DeformationField f(static_cast<int>(h), static_cast<int>(w));
    std::vector<float> buf(f.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    for (std::size_t i = 0; i < f.size(); ++i) f.dx[i] = buf[i];
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    for (std::size_t i = 0; i < f.size(); ++i) f.dy[i] = buf[i];
    if (!in) throw std::runtime_error("truncated .dfield: " + path);
    return f;
}

}  // namespace morphmark
