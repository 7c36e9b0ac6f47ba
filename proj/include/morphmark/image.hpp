// image.hpp - grayscale image grid, landmark sets, and their file formats
// (8-bit grayscale PNG, landmark CSV with header "index,x,y").
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

namespace morphmark {

// H x W scalar grid with values in [0,1], row-major.
// Coordinate convention shared by the whole project: (x,y) continuous,
// origin at the center of the top-left pixel, x rightward, y downward.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> values;  // row-major, values[y*width + x]

    Image() = default;
    Image(int h, int w, double fill = 0.0)
        : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
        if (h < 8 || w < 8) throw std::invalid_argument("Image: height and width must be >= 8");
    }

    double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

    std::size_t size() const { return values.size(); }

    // clamp to [0,1]; interpolation may transiently push values past the
    // bounds by < 1e-6, outputs are clamped back
    void clamp01() {
        for (double& v : values) v = std::min(1.0, std::max(0.0, v));
    }

    bool finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

struct Landmark {
    double x = 0.0;
    double y = 0.0;
};

// Ordered list of continuous pixel coordinates. Index j is the semantic
// identity contract: index j here corresponds to index j in any other set.
struct LandmarkSet {
    std::vector<Landmark> points;

    std::size_t size() const { return points.size(); }
    Landmark& operator[](std::size_t i) { return points[i]; }
    const Landmark& operator[](std::size_t i) const { return points[i]; }
    auto begin() { return points.begin(); }
    auto end() { return points.end(); }
    auto begin() const { return points.begin(); }
    auto end() const { return points.end(); }

    // points may leave the frame after a warp; flagged rather than rejected
    bool any_outside(int height, int width) const {
        for (const auto& p : points) {
            if (p.x < 0.0 || p.x > width - 1.0 || p.y < 0.0 || p.y > height - 1.0) return true;
        }
        return false;
    }
};

// ---------------------------------------------------------------------------
// PNG IO (8-bit grayscale; overlay output uses the RGB variant)
// ---------------------------------------------------------------------------

inline Image read_png_gray(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open PNG for reading: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("libpng failure while reading: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE) {
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    png_read_update_info(png, info);

    std::vector<png_byte> row(png_get_rowbytes(png, info));
    Image img(static_cast<int>(h), static_cast<int>(w));
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x) {
            img.at(static_cast<int>(y), static_cast<int>(x)) = row[x] / 255.0;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

inline void write_png_gray(const std::string& path, const Image& img) {
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open PNG for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("libpng failure while writing: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(img.width));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double v = std::min(1.0, std::max(0.0, img.at(y, x)));
            row[x] = static_cast<png_byte>(std::lround(v * 255.0));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// interleaved 8-bit RGB rows, values.size() == 3*H*W
inline void write_png_rgb(const std::string& path, int height, int width,
                          const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != static_cast<std::size_t>(3) * height * width)
        throw std::invalid_argument("write_png_rgb: buffer size mismatch");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open PNG for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("libpng failure while writing: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(3) * y * width));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// ---------------------------------------------------------------------------
// Landmark CSV: header "index,x,y", floating point pixel units
// ---------------------------------------------------------------------------

inline void write_landmarks_csv(const std::string& path, const LandmarkSet& lm) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open CSV for writing: " + path);
    out << "index,x,y\n";
    char buf[96];
    for (std::size_t i = 0; i < lm.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", i, lm[i].x, lm[i].y);
        out << buf;
    }
}

inline LandmarkSet read_landmarks_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open CSV for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty landmark CSV: " + path);
    LandmarkSet lm;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string idx, xs, ys;
        if (!std::getline(ss, idx, ',') || !std::getline(ss, xs, ',') || !std::getline(ss, ys, ','))
            throw std::runtime_error("malformed landmark CSV row in " + path + ": " + line);
        lm.points.push_back({std::stod(xs), std::stod(ys)});
    }
    if (lm.size() == 0) throw std::runtime_error("landmark CSV has no points: " + path);
    return lm;
}

}  // namespace morphmark
