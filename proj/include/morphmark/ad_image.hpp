// ad_image.hpp - image-shaped autodiff ops: convolution, pooling, resampling
// warps, edge filters, and finite-difference operators. Image tensors are
// C x H x W (or H x W for single-channel maps), row-major.
#pragma once

#include <algorithm>
#include <cmath>

#include "morphmark/ad.hpp"
#include "morphmark/affine.hpp"

namespace morphmark::ad {

namespace detail {
inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

inline void expect_chw(const Tensor& t, const char* op) {
    if (t.shape().size() != 3) throw std::invalid_argument(std::string(op) + ": expects C x H x W");
}
inline void expect_hw(const Tensor& t, const char* op) {
    if (t.shape().size() != 2) throw std::invalid_argument(std::string(op) + ": expects H x W");
}
}  // namespace detail

// channel i of a C x H x W stack as an H x W tensor
inline Tensor channel(const Tensor& stack, int i) {
    detail::expect_chw(stack, "channel");
    const int C = stack.shape()[0], H = stack.shape()[1], W = stack.shape()[2];
    if (i < 0 || i >= C) throw std::invalid_argument("channel: index out of range");
    Tensor flat = reshape(stack, {C, H * W});
    return reshape(gather_rows(flat, {i}), {H, W});
}

inline Tensor permute_channels(const Tensor& stack, const std::vector<int>& perm) {
    detail::expect_chw(stack, "permute_channels");
    const int C = stack.shape()[0], H = stack.shape()[1], W = stack.shape()[2];
    if (static_cast<int>(perm.size()) != C)
        throw std::invalid_argument("permute_channels: permutation size mismatch");
    Tensor flat = reshape(stack, {C, H * W});
    return reshape(gather_rows(flat, perm), {C, H, W});
}

// ---------------------------------------------------------------------------
// 3x3 convolution, replicate padding 1, stride 1 or 2
// input C x H x W, weight O x C x 3 x 3, bias O -> output O x H' x W'
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride) {
    detail::expect_chw(input, "conv2d");
    if (weight.shape().size() != 4 || weight.shape()[2] != 3 || weight.shape()[3] != 3)
        throw std::invalid_argument("conv2d: weight must be O x C x 3 x 3");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
    const int C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    const int O = weight.shape()[0];
    if (weight.shape()[1] != C) throw std::invalid_argument("conv2d: channel mismatch");
    if (bias.shape() != Shape{O}) throw std::invalid_argument("conv2d: bias must be length O");
    const int Ho = (H - 1) / stride + 1;
    const int Wo = (W - 1) / stride + 1;

    std::vector<double> v(static_cast<std::size_t>(O) * Ho * Wo);
    const double* in = input.values().data();
    const double* wt = weight.values().data();
    for (int o = 0; o < O; ++o) {
        double* out = v.data() + static_cast<std::size_t>(o) * Ho * Wo;
        const double b = bias.values()[o];
        for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) out[i] = b;
        for (int c = 0; c < C; ++c) {
            const double* plane = in + static_cast<std::size_t>(c) * H * W;
            const double* k = wt + (static_cast<std::size_t>(o) * C + c) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double kv = k[ky * 3 + kx];
                    if (kv == 0.0) continue;
                    for (int y = 0; y < Ho; ++y) {
                        const int iy = detail::clampi(y * stride + ky - 1, 0, H - 1);
                        const double* src = plane + static_cast<std::size_t>(iy) * W;
                        double* dst = out + static_cast<std::size_t>(y) * Wo;
                        for (int x = 0; x < Wo; ++x) {
                            const int ix = detail::clampi(x * stride + kx - 1, 0, W - 1);
                            dst[x] += kv * src[ix];
                        }
                    }
                }
            }
        }
    }

    return detail::make_op(
        "conv2d", {O, Ho, Wo}, std::move(v), {input.node(), weight.node(), bias.node()},
        [C, H, W, O, Ho, Wo, stride](Node& self) {
            Node& pin = *self.parents[0];
            Node& pw = *self.parents[1];
            Node& pb = *self.parents[2];
            for (int o = 0; o < O; ++o) {
                const double* g = self.grad.data() + static_cast<std::size_t>(o) * Ho * Wo;
                if (pb.requires_grad) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) s += g[i];
                    pb.grad[o] += s;
                }
                for (int c = 0; c < C; ++c) {
                    const double* plane = pin.val.data() + static_cast<std::size_t>(c) * H * W;
                    double* gplane =
                        pin.requires_grad ? pin.grad.data() + static_cast<std::size_t>(c) * H * W
                                          : nullptr;
                    const std::size_t kbase = (static_cast<std::size_t>(o) * C + c) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const double kv = pw.val[kbase + ky * 3 + kx];
                            double ksum = 0.0;
                            for (int y = 0; y < Ho; ++y) {
                                const int iy = detail::clampi(y * stride + ky - 1, 0, H - 1);
                                const double* srow = plane + static_cast<std::size_t>(iy) * W;
                                double* grow =
                                    gplane ? gplane + static_cast<std::size_t>(iy) * W : nullptr;
                                const double* gr = g + static_cast<std::size_t>(y) * Wo;
                                for (int x = 0; x < Wo; ++x) {
                                    const int ix = detail::clampi(x * stride + kx - 1, 0, W - 1);
                                    ksum += gr[x] * srow[ix];
                                    if (grow) grow[ix] += gr[x] * kv;
                                }
                            }
                            if (pw.requires_grad) pw.grad[kbase + ky * 3 + kx] += ksum;
                        }
                    }
                }
            }
        });
}

// 1x1 convolution (channel mixing); weight O x C, bias O
inline Tensor conv1x1(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    detail::expect_chw(input, "conv1x1");
    const int C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    const int O = weight.shape()[0];
    if (weight.shape() != Shape{O, C}) throw std::invalid_argument("conv1x1: weight must be O x C");
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    std::vector<double> v(static_cast<std::size_t>(O) * hw);
    for (int o = 0; o < O; ++o) {
        double* out = v.data() + o * hw;
        const double b = bias.values()[o];
        for (std::size_t i = 0; i < hw; ++i) out[i] = b;
        for (int c = 0; c < C; ++c) {
            const double kv = weight.values()[static_cast<std::size_t>(o) * C + c];
            const double* in = input.values().data() + c * hw;
            for (std::size_t i = 0; i < hw; ++i) out[i] += kv * in[i];
        }
    }
    return detail::make_op(
        "conv1x1", {O, H, W}, std::move(v), {input.node(), weight.node(), bias.node()},
        [C, O, hw](Node& self) {
            Node& pin = *self.parents[0];
            Node& pw = *self.parents[1];
            Node& pb = *self.parents[2];
            for (int o = 0; o < O; ++o) {
                const double* g = self.grad.data() + o * hw;
                if (pb.requires_grad) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) s += g[i];
                    pb.grad[o] += s;
                }
                for (int c = 0; c < C; ++c) {
                    const double kv = pw.val[static_cast<std::size_t>(o) * C + c];
                    const double* in = pin.val.data() + c * hw;
                    if (pw.requires_grad) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < hw; ++i) s += g[i] * in[i];
                        pw.grad[static_cast<std::size_t>(o) * C + c] += s;
                    }
                    if (pin.requires_grad) {
                        double* gi = pin.grad.data() + c * hw;
                        for (std::size_t i = 0; i < hw; ++i) gi[i] += g[i] * kv;
                    }
                }
            }
        });
}

// 2x2 average pooling, stride 2; H and W must be even
inline Tensor avgpool2d(const Tensor& input) {
    detail::expect_chw(input, "avgpool2d");
    const int C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    if (H % 2 || W % 2) throw std::invalid_argument("avgpool2d: extents must be even");
    const int Ho = H / 2, Wo = W / 2;
    std::vector<double> v(static_cast<std::size_t>(C) * Ho * Wo);
    for (int c = 0; c < C; ++c) {
        const double* in = input.values().data() + static_cast<std::size_t>(c) * H * W;
        double* out = v.data() + static_cast<std::size_t>(c) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int x = 0; x < Wo; ++x) {
                const std::size_t i = static_cast<std::size_t>(2 * y) * W + 2 * x;
                out[static_cast<std::size_t>(y) * Wo + x] =
                    0.25 * (in[i] + in[i + 1] + in[i + W] + in[i + W + 1]);
            }
    }
    return detail::make_op("avgpool2d", {C, Ho, Wo}, std::move(v), {input.node()},
                           [C, H, W, Ho, Wo](Node& self) {
                               Node& p = *self.parents[0];
                               for (int c = 0; c < C; ++c) {
                                   double* gi = p.grad.data() + static_cast<std::size_t>(c) * H * W;
                                   const double* g =
                                       self.grad.data() + static_cast<std::size_t>(c) * Ho * Wo;
                                   for (int y = 0; y < Ho; ++y)
                                       for (int x = 0; x < Wo; ++x) {
                                           const double gv =
                                               0.25 * g[static_cast<std::size_t>(y) * Wo + x];
                                           const std::size_t i =
                                               static_cast<std::size_t>(2 * y) * W + 2 * x;
                                           gi[i] += gv;
                                           gi[i + 1] += gv;
                                           gi[i + W] += gv;
                                           gi[i + W + 1] += gv;
                                       }
                               }
                           });
}

// bilinear upsampling by an integer factor, border clamped
inline Tensor upsample_bilinear(const Tensor& input, int factor) {
    detail::expect_chw(input, "upsample_bilinear");
    if (factor < 2) throw std::invalid_argument("upsample_bilinear: factor must be >= 2");
    const int C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    const int Ho = H * factor, Wo = W * factor;

    // precompute the 1-D sampling stencils
    struct Stencil { int i0, i1; double f; };
    auto make_stencils = [factor](int in_extent, int out_extent) {
        std::vector<Stencil> s(out_extent);
        for (int o = 0; o < out_extent; ++o) {
            double pos = (o + 0.5) / factor - 0.5;
            pos = std::min(static_cast<double>(in_extent - 1), std::max(0.0, pos));
            int i0 = static_cast<int>(std::floor(pos));
            if (i0 > in_extent - 2) i0 = std::max(0, in_extent - 2);
            s[o] = {i0, std::min(in_extent - 1, i0 + 1), pos - i0};
        }
        return s;
    };
    auto sy = make_stencils(H, Ho);
    auto sx = make_stencils(W, Wo);

    std::vector<double> v(static_cast<std::size_t>(C) * Ho * Wo);
    for (int c = 0; c < C; ++c) {
        const double* in = input.values().data() + static_cast<std::size_t>(c) * H * W;
        double* out = v.data() + static_cast<std::size_t>(c) * Ho * Wo;
        for (int y = 0; y < Ho; ++y) {
            const auto& ry = sy[y];
            const double* r0 = in + static_cast<std::size_t>(ry.i0) * W;
            const double* r1 = in + static_cast<std::size_t>(ry.i1) * W;
            for (int x = 0; x < Wo; ++x) {
                const auto& cx = sx[x];
                const double top = (1 - cx.f) * r0[cx.i0] + cx.f * r0[cx.i1];
                const double bot = (1 - cx.f) * r1[cx.i0] + cx.f * r1[cx.i1];
                out[static_cast<std::size_t>(y) * Wo + x] = (1 - ry.f) * top + ry.f * bot;
            }
        }
    }
    return detail::make_op(
        "upsample_bilinear", {C, Ho, Wo}, std::move(v), {input.node()},
        [C, H, W, Ho, Wo, sy = std::move(sy), sx = std::move(sx)](Node& self) {
            Node& p = *self.parents[0];
            for (int c = 0; c < C; ++c) {
                double* gi = p.grad.data() + static_cast<std::size_t>(c) * H * W;
                const double* g = self.grad.data() + static_cast<std::size_t>(c) * Ho * Wo;
                for (int y = 0; y < Ho; ++y) {
                    const auto& ry = sy[y];
                    for (int x = 0; x < Wo; ++x) {
                        const auto& cx = sx[x];
                        const double gv = g[static_cast<std::size_t>(y) * Wo + x];
                        gi[static_cast<std::size_t>(ry.i0) * W + cx.i0] += gv * (1 - ry.f) * (1 - cx.f);
                        gi[static_cast<std::size_t>(ry.i0) * W + cx.i1] += gv * (1 - ry.f) * cx.f;
                        gi[static_cast<std::size_t>(ry.i1) * W + cx.i0] += gv * ry.f * (1 - cx.f);
                        gi[static_cast<std::size_t>(ry.i1) * W + cx.i1] += gv * ry.f * cx.f;
                    }
                }
            }
        });
}

// concatenate along the channel axis
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::expect_chw(a, "concat_channels");
    detail::expect_chw(b, "concat_channels");
    const int Ca = a.shape()[0], Cb = b.shape()[0];
    const int H = a.shape()[1], W = a.shape()[2];
    if (b.shape()[1] != H || b.shape()[2] != W)
        throw std::invalid_argument("concat_channels: spatial shape mismatch");
    std::vector<double> v;
    v.reserve(a.size() + b.size());
    v.insert(v.end(), a.values().begin(), a.values().end());
    v.insert(v.end(), b.values().begin(), b.values().end());
    return detail::make_op("concat_channels", {Ca + Cb, H, W}, std::move(v),
                           {a.node(), b.node()},
                           [na = a.size()](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               if (pa.requires_grad)
                                   for (std::size_t i = 0; i < na; ++i) pa.grad[i] += self.grad[i];
                               if (pb.requires_grad)
                                   for (std::size_t i = na; i < self.grad.size(); ++i)
                                       pb.grad[i - na] += self.grad[i];
                           });
}

// ---------------------------------------------------------------------------
// Sobel edges (/8 normalization) and separable box filtering, both with
// border-replicate padding
// ---------------------------------------------------------------------------

inline Tensor sobel(const Tensor& img) {
    detail::expect_hw(img, "sobel");
    const int H = img.shape()[0], W = img.shape()[1];
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    std::vector<double> v(2 * hw);
    const double* in = img.values().data();
    auto pix = [&](int y, int x) {
        return in[static_cast<std::size_t>(detail::clampi(y, 0, H - 1)) * W +
                  detail::clampi(x, 0, W - 1)];
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double tl = pix(y - 1, x - 1), tc = pix(y - 1, x), tr = pix(y - 1, x + 1);
            const double ml = pix(y, x - 1), mr = pix(y, x + 1);
            const double bl = pix(y + 1, x - 1), bc = pix(y + 1, x), br = pix(y + 1, x + 1);
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            v[i] = ((tr + 2 * mr + br) - (tl + 2 * ml + bl)) / 8.0;
            v[hw + i] = ((bl + 2 * bc + br) - (tl + 2 * tc + tr)) / 8.0;
        }
    return detail::make_op(
        "sobel", {2, H, W}, std::move(v), {img.node()},
        [H, W, hw](Node& self) {
            Node& p = *self.parents[0];
            static const int off[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                                          {0, 1},   {1, -1}, {1, 0},  {1, 1}};
            static const double kx[8] = {-1, 0, 1, -2, 2, -1, 0, 1};
            static const double ky[8] = {-1, -2, -1, 0, 0, 1, 2, 1};
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * W + x;
                    const double ggx = self.grad[i] / 8.0;
                    const double ggy = self.grad[hw + i] / 8.0;
                    for (int t = 0; t < 8; ++t) {
                        const int yy = detail::clampi(y + off[t][0], 0, H - 1);
                        const int xx = detail::clampi(x + off[t][1], 0, W - 1);
                        p.grad[static_cast<std::size_t>(yy) * W + xx] +=
                            ggx * kx[t] + ggy * ky[t];
                    }
                }
        });
}

namespace detail {
// separable mean filter pass along x with replicate clamping; transpose=true
// runs the adjoint (scatter)
inline void box_pass_x(const double* in, double* out, int H, int W, int r, bool transpose) {
    const double inv = 1.0 / (2 * r + 1);
    for (int y = 0; y < H; ++y) {
        const double* irow = in + static_cast<std::size_t>(y) * W;
        double* orow = out + static_cast<std::size_t>(y) * W;
        for (int x = 0; x < W; ++x) {
            if (!transpose) {
                double s = 0.0;
                for (int d = -r; d <= r; ++d) s += irow[clampi(x + d, 0, W - 1)];
                orow[x] = s * inv;
            } else {
                const double g = irow[x] * inv;
                for (int d = -r; d <= r; ++d) orow[clampi(x + d, 0, W - 1)] += g;
            }
        }
    }
}
inline void box_pass_y(const double* in, double* out, int H, int W, int r, bool transpose) {
    const double inv = 1.0 / (2 * r + 1);
    for (int x = 0; x < W; ++x) {
        for (int y = 0; y < H; ++y) {
            if (!transpose) {
                double s = 0.0;
                for (int d = -r; d <= r; ++d)
                    s += in[static_cast<std::size_t>(clampi(y + d, 0, H - 1)) * W + x];
                out[static_cast<std::size_t>(y) * W + x] = s * inv;
            } else {
                const double g = in[static_cast<std::size_t>(y) * W + x] * inv;
                for (int d = -r; d <= r; ++d)
                    out[static_cast<std::size_t>(clampi(y + d, 0, H - 1)) * W + x] += g;
            }
        }
    }
}
}  // namespace detail

// uniform (2r+1)^2 mean filter, replicate padded, separable
inline Tensor box_filter(const Tensor& img, int radius) {
    detail::expect_hw(img, "box_filter");
    if (radius < 1) throw std::invalid_argument("box_filter: radius must be >= 1");
    const int H = img.shape()[0], W = img.shape()[1];
    std::vector<double> tmp(img.size()), v(img.size());
    detail::box_pass_x(img.values().data(), tmp.data(), H, W, radius, false);
    detail::box_pass_y(tmp.data(), v.data(), H, W, radius, false);
    return detail::make_op("box_filter", img.shape(), std::move(v), {img.node()},
                           [H, W, radius](Node& self) {
                               Node& p = *self.parents[0];
                               std::vector<double> tmp2(self.grad.size(), 0.0);
                               detail::box_pass_y(self.grad.data(), tmp2.data(), H, W, radius, true);
                               detail::box_pass_x(tmp2.data(), p.grad.data(), H, W, radius, true);
                           });
}

// ---------------------------------------------------------------------------
// finite differences (forward differences, one-sided at the far border)
// ---------------------------------------------------------------------------

inline Tensor diff_x(const Tensor& img) {
    detail::expect_hw(img, "diff_x");
    const int H = img.shape()[0], W = img.shape()[1];
    std::vector<double> v(img.size());
    const double* in = img.values().data();
    for (int y = 0; y < H; ++y) {
        const double* r = in + static_cast<std::size_t>(y) * W;
        double* o = v.data() + static_cast<std::size_t>(y) * W;
        for (int x = 0; x < W - 1; ++x) o[x] = r[x + 1] - r[x];
        o[W - 1] = W >= 2 ? r[W - 1] - r[W - 2] : 0.0;
    }
    return detail::make_op("diff_x", img.shape(), std::move(v), {img.node()},
                           [H, W](Node& self) {
                               Node& p = *self.parents[0];
                               for (int y = 0; y < H; ++y) {
                                   const double* g = self.grad.data() + static_cast<std::size_t>(y) * W;
                                   double* pg = p.grad.data() + static_cast<std::size_t>(y) * W;
                                   for (int x = 0; x < W - 1; ++x) {
                                       pg[x + 1] += g[x];
                                       pg[x] -= g[x];
                                   }
                                   if (W >= 2) {
                                       pg[W - 1] += g[W - 1];
                                       pg[W - 2] -= g[W - 1];
                                   }
                               }
                           });
}

inline Tensor diff_y(const Tensor& img) {
    detail::expect_hw(img, "diff_y");
    const int H = img.shape()[0], W = img.shape()[1];
    std::vector<double> v(img.size());
    const double* in = img.values().data();
    for (int y = 0; y < H - 1; ++y)
        for (int x = 0; x < W; ++x)
            v[static_cast<std::size_t>(y) * W + x] =
                in[static_cast<std::size_t>(y + 1) * W + x] - in[static_cast<std::size_t>(y) * W + x];
    for (int x = 0; x < W && H >= 2; ++x)
        v[static_cast<std::size_t>(H - 1) * W + x] =
            in[static_cast<std::size_t>(H - 1) * W + x] - in[static_cast<std::size_t>(H - 2) * W + x];
    return detail::make_op("diff_y", img.shape(), std::move(v), {img.node()},
                           [H, W](Node& self) {
                               Node& p = *self.parents[0];
                               for (int y = 0; y < H - 1; ++y)
                                   for (int x = 0; x < W; ++x) {
                                       const double g = self.grad[static_cast<std::size_t>(y) * W + x];
                                       p.grad[static_cast<std::size_t>(y + 1) * W + x] += g;
                                       p.grad[static_cast<std::size_t>(y) * W + x] -= g;
                                   }
                               for (int x = 0; x < W && H >= 2; ++x) {
                                   const double g = self.grad[static_cast<std::size_t>(H - 1) * W + x];
                                   p.grad[static_cast<std::size_t>(H - 1) * W + x] += g;
                                   p.grad[static_cast<std::size_t>(H - 2) * W + x] -= g;
                               }
                           });
}

// ---------------------------------------------------------------------------
// differentiable warps
// ---------------------------------------------------------------------------

// builds the 2x3 affine entries from the raw 6-vector o (post-tanh) and the
// intensity hyperparameters; output layout matches AffineTransform::m
inline Tensor affine_matrix_from_o(const Tensor& o, const AffineIntensities& in) {
    if (o.shape() != Shape{6}) throw std::invalid_argument("affine_matrix_from_o: o must be length 6");
    const double tx = o.values()[0], ty = o.values()[1];
    const double sx = 1.0 + o.values()[2] * in.sf_x;
    const double sy = 1.0 + o.values()[3] * in.sf_y;
    const double alpha = o.values()[4] * in.rot;
    const double beta = o.values()[5] * in.sh;
    if (std::fabs(beta) >= 1.5707963267948966)
        throw std::invalid_argument("affine_matrix_from_o: |shear| >= pi/2");
    const double ca = std::cos(alpha), sa = std::sin(alpha), tb = std::tan(beta);
    std::vector<double> v = {sx * ca, sx * (ca * tb + sa), tx,
                             -sy * sa, sy * (-sa * tb + ca), ty};
    return detail::make_op(
        "affine_matrix_from_o", {6}, std::move(v), {o.node()},
        [in](Node& self) {
            Node& p = *self.parents[0];
            const double sx = 1.0 + p.val[2] * in.sf_x;
            const double sy = 1.0 + p.val[3] * in.sf_y;
            const double alpha = p.val[4] * in.rot;
            const double beta = p.val[5] * in.sh;
            const double ca = std::cos(alpha), sa = std::sin(alpha);
            const double tb = std::tan(beta), sec2 = 1.0 + tb * tb;
            const double* g = self.grad.data();
            // m = [sx*ca, sx*(ca*tb+sa), tx; -sy*sa, sy*(-sa*tb+ca), ty]
            p.grad[0] += g[2];
            p.grad[1] += g[5];
            p.grad[2] += in.sf_x * (g[0] * ca + g[1] * (ca * tb + sa));
            p.grad[3] += in.sf_y * (g[3] * (-sa) + g[4] * (-sa * tb + ca));
            p.grad[4] += in.rot * (g[0] * (-sx * sa) + g[1] * sx * (-sa * tb + ca) +
                                   g[3] * (-sy * ca) + g[4] * sy * (-ca * tb - sa));
            p.grad[5] += in.sh * (g[1] * sx * ca * sec2 + g[4] * sy * (-sa) * sec2);
        });
}

// backward affine warp of an H x W image on normalized coordinates;
// differentiable w.r.t. both the image and the 6 matrix entries
inline Tensor warp_affine(const Tensor& img, const Tensor& theta) {
    detail::expect_hw(img, "warp_affine");
    if (theta.shape() != Shape{6}) throw std::invalid_argument("warp_affine: theta must be length 6");
    const int H = img.shape()[0], W = img.shape()[1];
    const double* m = theta.values().data();
    std::vector<double> v(img.size());
    // cached per pixel for the backward pass: source pixel coords
    auto coords = std::make_shared<std::vector<double>>(2 * img.size());
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double px = affine_source_pixel(m[0], m[1], m[2], x, y, W, H);
            const double py = affine_source_pixel(m[4], m[3], m[5], y, x, H, W);
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            (*coords)[2 * i] = px;
            (*coords)[2 * i + 1] = py;
            v[i] = bilinear_sample_at(img.values().data(), H, W, px, py).value;
        }
    }
    return detail::make_op(
        "warp_affine", img.shape(), std::move(v), {img.node(), theta.node()},
        [H, W, coords](Node& self) {
            Node& pimg = *self.parents[0];
            Node& pth = *self.parents[1];
            const double sx_pix = 0.5 * (W - 1);  // d pixel / d normalized
            const double sy_pix = 0.5 * (H - 1);
            for (int y = 0; y < H; ++y) {
                const double yn = to_norm(y, H);
                for (int x = 0; x < W; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * W + x;
                    const double g = self.grad[i];
                    if (g == 0.0) continue;
                    const double px = (*coords)[2 * i], py = (*coords)[2 * i + 1];
                    const BilinearSample s =
                        bilinear_sample_at(pimg.val.data(), H, W, px, py);
                    if (pimg.requires_grad) {
                        for (int t = 0; t < 4; ++t)
                            pimg.grad[static_cast<std::size_t>(s.iy[t]) * W + s.ix[t]] +=
                                g * s.w[t];
                    }
                    if (pth.requires_grad) {
                        const double xn = to_norm(x, W);
                        const double gu = g * s.d_dx * sx_pix;
                        const double gv = g * s.d_dy * sy_pix;
                        pth.grad[0] += gu * xn;
                        pth.grad[1] += gu * yn;
                        pth.grad[2] += gu;
                        pth.grad[3] += gv * xn;
                        pth.grad[4] += gv * yn;
                        pth.grad[5] += gv;
                    }
                }
            }
        });
}

// affine warp with a constant (non-differentiated) matrix, applied to every
// channel of a C x H x W stack; used to transport heatmaps between views
inline Tensor warp_affine_const(const Tensor& stack, const AffineTransform& A) {
    detail::expect_chw(stack, "warp_affine_const");
    const int C = stack.shape()[0], H = stack.shape()[1], W = stack.shape()[2];
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    auto coords = std::make_shared<std::vector<double>>(2 * hw);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            (*coords)[2 * i] = affine_source_pixel(A.m[0], A.m[1], A.m[2], x, y, W, H);
            (*coords)[2 * i + 1] = affine_source_pixel(A.m[4], A.m[3], A.m[5], y, x, H, W);
        }
    }
    std::vector<double> out(stack.size());
    for (int c = 0; c < C; ++c) {
        const double* plane = stack.values().data() + c * hw;
        double* o = out.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i)
            o[i] = bilinear_sample_at(plane, H, W, (*coords)[2 * i], (*coords)[2 * i + 1]).value;
    }
    return detail::make_op(
        "warp_affine_const", stack.shape(), std::move(out), {stack.node()},
        [C, H, W, hw, coords](Node& self) {
            Node& p = *self.parents[0];
            for (int c = 0; c < C; ++c) {
                const double* plane = p.val.data() + c * hw;
                double* gp = p.grad.data() + c * hw;
                const double* g = self.grad.data() + c * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    if (g[i] == 0.0) continue;
                    const BilinearSample s = bilinear_sample_at(plane, H, W, (*coords)[2 * i],
                                                                (*coords)[2 * i + 1]);
                    for (int t = 0; t < 4; ++t)
                        gp[static_cast<std::size_t>(s.iy[t]) * W + s.ix[t]] += g[i] * s.w[t];
                }
            }
        });
}

// backward field warp: out(x,y) = img(x + fx, y + fy); differentiable w.r.t.
// the image and both displacement planes
inline Tensor warp_field(const Tensor& img, const Tensor& fx, const Tensor& fy) {
    detail::expect_hw(img, "warp_field");
    if (fx.shape() != img.shape() || fy.shape() != img.shape())
        throw std::invalid_argument("warp_field: field shape mismatch");
    const int H = img.shape()[0], W = img.shape()[1];
    std::vector<double> v(img.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            v[i] = bilinear_sample_at(img.values().data(), H, W, x + fx.values()[i],
                                      y + fy.values()[i]).value;
        }
    return detail::make_op(
        "warp_field", img.shape(), std::move(v), {img.node(), fx.node(), fy.node()},
        [H, W](Node& self) {
            Node& pimg = *self.parents[0];
            Node& pfx = *self.parents[1];
            Node& pfy = *self.parents[2];
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * W + x;
                    const double g = self.grad[i];
                    if (g == 0.0) continue;
                    const BilinearSample s = bilinear_sample_at(
                        pimg.val.data(), H, W, x + pfx.val[i], y + pfy.val[i]);
                    if (pimg.requires_grad)
                        for (int t = 0; t < 4; ++t)
                            pimg.grad[static_cast<std::size_t>(s.iy[t]) * W + s.ix[t]] +=
                                g * s.w[t];
                    if (pfx.requires_grad) pfx.grad[i] += g * s.d_dx;
                    if (pfy.requires_grad) pfy.grad[i] += g * s.d_dy;
                }
        });
}

}  // namespace morphmark::ad
