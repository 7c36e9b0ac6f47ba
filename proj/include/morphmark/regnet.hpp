// regnet.hpp - the registration network: a shared convolutional encoder over
// the (moving, fixed) pair producing a 4-level feature pyramid (strides 4, 8,
// 16, 32), attention stacks over its token grids, a global head emitting the
// 6 affine parameters, and a cascaded local head emitting dense displacement
// fields at stride 4. One parameter set; the local head is shared across
// cascade steps.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphmark/ad.hpp"
#include "morphmark/ad_image.hpp"
#include "morphmark/affine.hpp"
#include "morphmark/field.hpp"
#include "morphmark/params.hpp"
#include "morphmark/rng.hpp"

namespace morphmark {

// scaled dot-product multi-head attention over row-token matrices:
// softmax(Q K^T / sqrt(d_head)) V per head, concatenated and projected
inline ad::Tensor multi_head_attention(const ad::Tensor& q_in, const ad::Tensor& kv_in,
                                       const ad::Tensor& wq, const ad::Tensor& bq,
                                       const ad::Tensor& wk, const ad::Tensor& bk,
                                       const ad::Tensor& wv, const ad::Tensor& bv,
                                       const ad::Tensor& wo, const ad::Tensor& bo, int n_heads) {
    const int d = q_in.shape()[1];
    if (n_heads < 1 || d % n_heads)
        throw std::invalid_argument("multi_head_attention: n_heads must divide d_model");
    const int dh = d / n_heads;
    ad::Tensor Q = ad::add_rowvec(ad::matmul(q_in, wq), bq);
    ad::Tensor K = ad::add_rowvec(ad::matmul(kv_in, wk), bk);
    ad::Tensor V = ad::add_rowvec(ad::matmul(kv_in, wv), bv);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Tensor> heads;
    for (int h = 0; h < n_heads; ++h) {
        ad::Tensor Qh = ad::slice_cols(Q, h * dh, (h + 1) * dh);
        ad::Tensor Kh = ad::slice_cols(K, h * dh, (h + 1) * dh);
        ad::Tensor Vh = ad::slice_cols(V, h * dh, (h + 1) * dh);
        ad::Tensor att = ad::softmax_rows(ad::scale(ad::matmul(Qh, Kh, false, true), inv_sqrt));
        heads.push_back(ad::matmul(att, Vh));
    }
    ad::Tensor merged = n_heads == 1 ? heads[0] : ad::concat_cols(heads);
    return ad::add_rowvec(ad::matmul(merged, wo), bo);
}

struct RegnetConfig {
    int height = 64;   // fixed working resolution; must be divisible by 32
    int width = 64;
    int d_model = 64;
    int n_heads = 2;
    int n_layers = 2;  // attention blocks per head
    int n_local = 2;   // cascade depth
    int d_ff = 256;
    int window = 4;    // R: side of the non-overlapping token windows at stride 4
    double dropout = 0.1;
    AffineIntensities intensities;
    std::string head = "affine";  // "perspective" is reserved, not implemented

    void validate() const {
        if (height < 32 || width < 32 || height % 32 || width % 32)
            throw std::invalid_argument("RegnetConfig: height/width must be multiples of 32 >= 32");
        if (d_model < 2 || n_heads < 1 || d_model % n_heads)
            throw std::invalid_argument("RegnetConfig: n_heads must divide d_model");
        if (n_layers < 1 || n_local < 1 || d_ff < 1)
            throw std::invalid_argument("RegnetConfig: layer counts must be >= 1");
        if (window < 1 || (height / 4) % window || (width / 4) % window)
            throw std::invalid_argument("RegnetConfig: window must divide the stride-4 grid");
        if (dropout < 0.0 || dropout >= 1.0)
            throw std::invalid_argument("RegnetConfig: dropout must be in [0,1)");
        if (head != "affine")
            throw std::invalid_argument("RegnetConfig: head '" + head +
                                        "' is not implemented (supported: affine)");
    }
};

class RegNet {
public:
    RegNet(const RegnetConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        build_params(rng);
    }

    const RegnetConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    struct Forward {
        ad::Tensor o;              // raw affine 6-vector in (-1,1)^6
        ad::Tensor theta;          // assembled 2x3 matrix entries
        ad::Tensor warped_global;  // moving after the affine warp
        std::vector<ad::Tensor> fx, fy;  // per-step displacement planes (pixels)
        std::vector<ad::Tensor> warped;  // moving after each cascade step
    };

    // One full pass. skip_global holds the affine at identity (used for
    // synthetic pairs where the reference field excludes any affine part).
    Forward forward_cascade(const ad::Tensor& moving, const ad::Tensor& fixed, Bindings& bnd,
                            Rng& drop_rng, bool train, bool skip_global = false) {
        if (moving.shape() != ad::Shape{cfg_.height, cfg_.width} || fixed.shape() != moving.shape())
            throw std::invalid_argument("RegNet: input shape does not match the configured size");
        Forward out;

        if (skip_global) {
            out.o = ad::Tensor::zeros({6});
            out.theta = ad::Tensor::leaf({6}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
            out.warped_global = moving;
        } else {
            Enc enc = encode(moving, fixed, bnd);
            ad::Tensor x = enc.t32;
            for (int l = 0; l < cfg_.n_layers; ++l) {
                x = attn_block(x, x, glob_sa_[l], bnd, drop_rng, train);
                x = attn_block(x, enc.t16, glob_ca_[l], bnd, drop_rng, train);
                x = ffn_block(x, glob_ffn_[l], bnd, drop_rng, train);
            }
            ad::Tensor pooled = ad::reshape(ad::mean_rows(x), {1, cfg_.d_model});
            ad::Tensor h = ad::relu(ad::add_rowvec(ad::matmul(pooled, bnd.leaf(store_, glob_w1_)),
                                                   bnd.leaf(store_, glob_b1_)));
            ad::Tensor o_row = ad::tanh_t(ad::add_rowvec(ad::matmul(h, bnd.leaf(store_, glob_w2_)),
                                                         bnd.leaf(store_, glob_b2_)));
            out.o = ad::reshape(o_row, {6});
            out.theta = ad::affine_matrix_from_o(out.o, cfg_.intensities);
            out.warped_global = ad::warp_affine(moving, out.theta);
        }

        ad::Tensor prev = out.warped_global;
        const std::vector<ad::Tensor> shifted = shifted_targets(fixed);
        for (int step = 0; step < cfg_.n_local; ++step) {
            Enc enc = encode(prev, fixed, bnd);
            ad::Tensor x = ad::add(enc.t4, cost_tokens(prev, shifted, bnd));
            for (int l = 0; l < cfg_.n_layers; ++l) {
                x = window_attn_block(x, loc_sa_[l], bnd, drop_rng, train);
                x = attn_block(x, enc.t8, loc_ca_[l], bnd, drop_rng, train);
                x = ffn_block(x, loc_ffn_[l], bnd, drop_rng, train);
            }
            ad::Tensor per_token = ad::add_rowvec(ad::matmul(x, bnd.leaf(store_, loc_out_w_)),
                                                  bnd.leaf(store_, loc_out_b_));  // {L4, 2}
            ad::Tensor planes = ad::reshape(ad::transpose(per_token),
                                            {2, cfg_.height / 4, cfg_.width / 4});
            ad::Tensor full = ad::upsample_bilinear(planes, 4);
            ad::Tensor fx = ad::channel(full, 0);
            ad::Tensor fy = ad::channel(full, 1);
            out.fx.push_back(fx);
            out.fy.push_back(fy);
            prev = ad::warp_field(prev, fx, fy);
            out.warped.push_back(prev);
        }
        return out;
    }

    // detached transform + fields for landmark transport and serialization
    struct CascadeResult {
        AffineTransform A;
        std::vector<DeformationField> fields;
    };

    static CascadeResult extract_result(const Forward& f) {
        CascadeResult r;
        for (int i = 0; i < 6; ++i) r.A.m[static_cast<std::size_t>(i)] = f.theta.values()[i];
        for (std::size_t s = 0; s < f.fx.size(); ++s) {
            DeformationField d(f.fx[s].shape()[0], f.fx[s].shape()[1]);
            d.dx = f.fx[s].values();
            d.dy = f.fy[s].values();
            r.fields.push_back(std::move(d));
        }
        return r;
    }

private:
    struct AttnIds { int wq, bq, wk, bk, wv, bv, wo, bo, ln_g, ln_b; };
    struct FfnIds { int w1, b1, w2, b2, ln_g, ln_b; };
    struct Level { int proj_w = 0, proj_b = 0, pos_row = 0, pos_col = 0, stride = 0; };
    struct Enc { ad::Tensor t4, t8, t16, t32; };

    RegnetConfig cfg_;
    ParamStore store_;

    // encoder: stem to stride 4, then one stride-2 conv per remaining level
    std::vector<int> conv_w_, conv_b_;
    Level lv4_, lv8_, lv16_, lv32_;
    // heads
    std::vector<AttnIds> glob_sa_, glob_ca_, loc_sa_, loc_ca_;
    std::vector<FfnIds> glob_ffn_, loc_ffn_;
    int glob_w1_ = 0, glob_b1_ = 0, glob_w2_ = 0, glob_b2_ = 0;
    int loc_out_w_ = 0, loc_out_b_ = 0;
    int cost_w_ = 0, cost_b_ = 0;
    // window-major permutation of the stride-4 token grid and its inverse
    std::vector<std::vector<int>> window_rows_;
    std::vector<int> window_unperm_;

    int add_linear(const std::string& name, int in, int out_dim, Rng& rng, double gain = 1.0) {
        return store_.add_randn(name, {in, out_dim}, rng, gain / std::sqrt(static_cast<double>(in)));
    }

    AttnIds add_attn(const std::string& prefix, Rng& rng) {
        const int d = cfg_.d_model;
        AttnIds a;
        a.wq = add_linear(prefix + ".wq", d, d, rng);
        a.bq = store_.add_zeros(prefix + ".bq", {d});
        a.wk = add_linear(prefix + ".wk", d, d, rng);
        a.bk = store_.add_zeros(prefix + ".bk", {d});
        a.wv = add_linear(prefix + ".wv", d, d, rng);
        a.bv = store_.add_zeros(prefix + ".bv", {d});
        a.wo = add_linear(prefix + ".wo", d, d, rng);
        a.bo = store_.add_zeros(prefix + ".bo", {d});
        a.ln_g = store_.add(prefix + ".ln.g", {d}, std::vector<double>(d, 1.0));
        a.ln_b = store_.add_zeros(prefix + ".ln.b", {d});
        return a;
    }

    FfnIds add_ffn(const std::string& prefix, Rng& rng) {
        const int d = cfg_.d_model;
        FfnIds f;
        f.w1 = add_linear(prefix + ".w1", d, cfg_.d_ff, rng, std::sqrt(2.0));
        f.b1 = store_.add_zeros(prefix + ".b1", {cfg_.d_ff});
        f.w2 = add_linear(prefix + ".w2", cfg_.d_ff, d, rng);
        f.b2 = store_.add_zeros(prefix + ".b2", {d});
        f.ln_g = store_.add(prefix + ".ln.g", {d}, std::vector<double>(d, 1.0));
        f.ln_b = store_.add_zeros(prefix + ".ln.b", {d});
        return f;
    }

    Level add_level(const std::string& name, int chans, int stride, Rng& rng) {
        const int d = cfg_.d_model;
        Level lv;
        lv.stride = stride;
        lv.proj_w = store_.add_randn("proj." + name + ".w", {d, chans}, rng,
                                     std::sqrt(1.0 / chans));
        lv.proj_b = store_.add_zeros("proj." + name + ".b", {d});
        lv.pos_row = store_.add_randn("pos." + name + ".row", {cfg_.height / stride, d}, rng, 0.02);
        lv.pos_col = store_.add_randn("pos." + name + ".col", {cfg_.width / stride, d}, rng, 0.02);
        return lv;
    }

    void build_params(Rng& rng) {
        // encoder: 2 -> 16 -> 16 -> 32 -> 64 -> 64, all 3x3 stride 2; pyramid
        // taps after convs 1..4 (strides 4, 8, 16, 32)
        const int chans[6] = {2, 16, 16, 32, 64, 64};
        for (int i = 0; i < 5; ++i) {
            const double scale = std::sqrt(2.0 / (9.0 * chans[i]));
            conv_w_.push_back(store_.add_randn("enc.conv" + std::to_string(i) + ".w",
                                               {chans[i + 1], chans[i], 3, 3}, rng, scale));
            conv_b_.push_back(store_.add_zeros("enc.conv" + std::to_string(i) + ".b",
                                               {chans[i + 1]}));
        }
        lv4_ = add_level("s4", chans[2], 4, rng);
        lv8_ = add_level("s8", chans[3], 8, rng);
        lv16_ = add_level("s16", chans[4], 16, rng);
        lv32_ = add_level("s32", chans[5], 32, rng);

        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string gl = "glob.l" + std::to_string(l);
            glob_sa_.push_back(add_attn(gl + ".sa", rng));
            glob_ca_.push_back(add_attn(gl + ".ca", rng));
            glob_ffn_.push_back(add_ffn(gl + ".ffn", rng));
            const std::string ll = "loc.l" + std::to_string(l);
            loc_sa_.push_back(add_attn(ll + ".sa", rng));
            loc_ca_.push_back(add_attn(ll + ".ca", rng));
            loc_ffn_.push_back(add_ffn(ll + ".ffn", rng));
        }

        const int d = cfg_.d_model;
        glob_w1_ = add_linear("glob.head.w1", d, 128, rng, std::sqrt(2.0));
        glob_b1_ = store_.add_zeros("glob.head.b1", {128});
        // zero-init final layers: the network starts at the identity transform
        // and the zero field
        glob_w2_ = store_.add_zeros("glob.head.w2", {128, 6});
        glob_b2_ = store_.add_zeros("glob.head.b2", {6});
        loc_out_w_ = store_.add_zeros("loc.out.w", {d, 2});
        loc_out_b_ = store_.add_zeros("loc.out.b", {2});
        const int n_off = (2 * kCostRadius / kCostStep + 1) * (2 * kCostRadius / kCostStep + 1);
        cost_w_ = store_.add_randn("loc.cost.w", {n_off, d}, rng,
                                   1.0 / std::sqrt(static_cast<double>(n_off)));
        cost_b_ = store_.add_zeros("loc.cost.b", {d});

        const int gh = cfg_.height / 4, gw = cfg_.width / 4, R = cfg_.window;
        window_unperm_.assign(static_cast<std::size_t>(gh) * gw, 0);
        int pos = 0;
        for (int wy = 0; wy < gh / R; ++wy)
            for (int wx = 0; wx < gw / R; ++wx) {
                std::vector<int> rows;
                for (int y = 0; y < R; ++y)
                    for (int x = 0; x < R; ++x) {
                        const int r = (wy * R + y) * gw + wx * R + x;
                        rows.push_back(r);
                        window_unperm_[static_cast<std::size_t>(r)] = pos++;
                    }
                window_rows_.push_back(std::move(rows));
            }
    }

    // candidate displacements of the matching volume: a (2r/s+1)^2 grid of
    // pixel offsets, step kCostStep, radius kCostRadius
    static constexpr int kCostStep = 2;
    static constexpr int kCostRadius = 6;
    static constexpr double kCostSharpness = 20.0;  // softmax temperature 1/T on SSD scores

    std::vector<ad::Tensor> shifted_targets(const ad::Tensor& fixed) const {
        const int H = cfg_.height, W = cfg_.width;
        std::vector<ad::Tensor> out;
        for (int dy = -kCostRadius; dy <= kCostRadius; dy += kCostStep)
            for (int dx = -kCostRadius; dx <= kCostRadius; dx += kCostStep) {
                ad::Tensor fdx = ad::Tensor::leaf(
                    {H, W}, std::vector<double>(static_cast<std::size_t>(H) * W, dx), false);
                ad::Tensor fdy = ad::Tensor::leaf(
                    {H, W}, std::vector<double>(static_cast<std::size_t>(H) * W, dy), false);
                out.push_back(ad::warp_field(fixed, fdx, fdy));
            }
        return out;
    }

    // Local correspondence evidence: negative-SSD matching scores between the
    // current moving image and each offset-shifted target, pooled onto the
    // stride-4 grid and softmax-normalized over offsets. A learned projection
    // folds the matching distribution into the local tokens; this supplies
    // the matching capacity a pretrained backbone would otherwise provide
    // (displacement is a linear readout of the distribution).
    ad::Tensor cost_tokens(const ad::Tensor& moving, const std::vector<ad::Tensor>& shifted,
                           Bindings& bnd) {
        const int H = cfg_.height, W = cfg_.width;
        const int L4 = (H / 4) * (W / 4);
        const ad::Tensor box = ad::Tensor::leaf({1, 1, 3, 3}, std::vector<double>(9, 1.0 / 9.0));
        const ad::Tensor nobias = ad::Tensor::leaf({1}, {0.0});
        std::vector<ad::Tensor> cols;
        cols.reserve(shifted.size());
        for (const ad::Tensor& tgt : shifted) {
            ad::Tensor diff = ad::reshape(ad::square(ad::sub(moving, tgt)), {1, H, W});
            ad::Tensor pooled = ad::conv2d(ad::conv2d(diff, box, nobias, 2), box, nobias, 2);
            cols.push_back(ad::reshape(pooled, {L4, 1}));
        }
        ad::Tensor cost = ad::concat_cols(cols);
        // normalize each token's costs by their mean so the softmax sharpness
        // is contrast-relative rather than tied to the image intensity scale
        const int n_off = static_cast<int>(shifted.size());
        const ad::Tensor ones_col =
            ad::Tensor::leaf({n_off, 1}, std::vector<double>(static_cast<std::size_t>(n_off), 1.0));
        const ad::Tensor ones_row =
            ad::Tensor::leaf({1, n_off}, std::vector<double>(static_cast<std::size_t>(n_off), 1.0));
        ad::Tensor row_mean = ad::scale(ad::matmul(cost, ones_col), 1.0 / n_off);
        ad::Tensor denom = ad::add_const(ad::matmul(row_mean, ones_row), 1e-12);
        ad::Tensor att = ad::softmax_rows(ad::scale(ad::div(cost, denom), -kCostSharpness));
        return ad::add_rowvec(ad::matmul(att, bnd.leaf(store_, cost_w_)),
                              bnd.leaf(store_, cost_b_));
    }

    ad::Tensor tokens(const ad::Tensor& feat, const Level& lv, Bindings& bnd) {
        const int h = feat.shape()[1], w = feat.shape()[2];
        ad::Tensor p = ad::conv1x1(feat, bnd.leaf(store_, lv.proj_w), bnd.leaf(store_, lv.proj_b));
        ad::Tensor tok = ad::transpose(ad::reshape(p, {cfg_.d_model, h * w}));
        std::vector<int> ridx, cidx;
        ridx.reserve(static_cast<std::size_t>(h) * w);
        cidx.reserve(static_cast<std::size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                ridx.push_back(y);
                cidx.push_back(x);
            }
        ad::Tensor pos = ad::add(ad::gather_rows(bnd.leaf(store_, lv.pos_row), ridx),
                                 ad::gather_rows(bnd.leaf(store_, lv.pos_col), cidx));
        return ad::add(tok, pos);
    }

    Enc encode(const ad::Tensor& moving, const ad::Tensor& fixed, Bindings& bnd) {
        ad::Tensor x = ad::concat_channels(ad::reshape(moving, {1, cfg_.height, cfg_.width}),
                                           ad::reshape(fixed, {1, cfg_.height, cfg_.width}));
        std::vector<ad::Tensor> taps;
        for (int i = 0; i < 5; ++i) {
            x = ad::relu(ad::conv2d(x, bnd.leaf(store_, conv_w_[i]), bnd.leaf(store_, conv_b_[i]), 2));
            if (i >= 1) taps.push_back(x);
        }
        Enc e;
        e.t4 = tokens(taps[0], lv4_, bnd);
        e.t8 = tokens(taps[1], lv8_, bnd);
        e.t16 = tokens(taps[2], lv16_, bnd);
        e.t32 = tokens(taps[3], lv32_, bnd);
        return e;
    }

    ad::Tensor mha(const ad::Tensor& q_in, const ad::Tensor& kv_in, const AttnIds& a,
                   Bindings& bnd, Rng& rng, bool train) {
        ad::Tensor out = multi_head_attention(
            q_in, kv_in, bnd.leaf(store_, a.wq), bnd.leaf(store_, a.bq),
            bnd.leaf(store_, a.wk), bnd.leaf(store_, a.bk), bnd.leaf(store_, a.wv),
            bnd.leaf(store_, a.bv), bnd.leaf(store_, a.wo), bnd.leaf(store_, a.bo),
            cfg_.n_heads);
        return ad::dropout(out, cfg_.dropout, rng, train);
    }

    // post-LN residual blocks
    ad::Tensor attn_block(const ad::Tensor& x, const ad::Tensor& kv, const AttnIds& a,
                          Bindings& bnd, Rng& rng, bool train) {
        return ad::layer_norm(ad::add(x, mha(x, kv, a, bnd, rng, train)),
                              bnd.leaf(store_, a.ln_g), bnd.leaf(store_, a.ln_b));
    }

    // self-attention restricted to non-overlapping window x window blocks of
    // the stride-4 token grid
    ad::Tensor window_attn_block(const ad::Tensor& x, const AttnIds& a, Bindings& bnd,
                                 Rng& rng, bool train) {
        ad::Tensor wq = bnd.leaf(store_, a.wq), bq = bnd.leaf(store_, a.bq);
        ad::Tensor wk = bnd.leaf(store_, a.wk), bk = bnd.leaf(store_, a.bk);
        ad::Tensor wv = bnd.leaf(store_, a.wv), bv = bnd.leaf(store_, a.bv);
        ad::Tensor wo = bnd.leaf(store_, a.wo), bo = bnd.leaf(store_, a.bo);
        std::vector<ad::Tensor> parts;
        parts.reserve(window_rows_.size());
        for (const auto& rows : window_rows_) {
            ad::Tensor xw = ad::gather_rows(x, rows);
            parts.push_back(ad::transpose(
                multi_head_attention(xw, xw, wq, bq, wk, bk, wv, bv, wo, bo, cfg_.n_heads)));
        }
        ad::Tensor stacked = ad::transpose(parts.size() == 1 ? parts[0] : ad::concat_cols(parts));
        ad::Tensor out = ad::dropout(ad::gather_rows(stacked, window_unperm_), cfg_.dropout,
                                     rng, train);
        return ad::layer_norm(ad::add(x, out), bnd.leaf(store_, a.ln_g),
                              bnd.leaf(store_, a.ln_b));
    }

    ad::Tensor ffn_block(const ad::Tensor& x, const FfnIds& f, Bindings& bnd, Rng& rng,
                         bool train) {
        ad::Tensor h = ad::relu(ad::add_rowvec(ad::matmul(x, bnd.leaf(store_, f.w1)),
                                               bnd.leaf(store_, f.b1)));
        ad::Tensor out = ad::add_rowvec(ad::matmul(h, bnd.leaf(store_, f.w2)),
                                        bnd.leaf(store_, f.b2));
        out = ad::dropout(out, cfg_.dropout, rng, train);
        return ad::layer_norm(ad::add(x, out), bnd.leaf(store_, f.ln_g),
                              bnd.leaf(store_, f.ln_b));
    }
};

// Landmarks ride through the inverse affine, then each cascade field in
// order. sign selects the literal (+1) or the convention-consistent (-1)
// field transport; see apply_field_points.
inline LandmarkSet transport_landmarks(const LandmarkSet& pts, const RegNet::CascadeResult& r,
                                       int height, int width, int field_point_sign) {
    LandmarkSet q = apply_affine_points(pts, r.A, height, width);
    for (const auto& f : r.fields) q = apply_field_points(q, f, field_point_sign);
    return q;
}

}  // namespace morphmark
