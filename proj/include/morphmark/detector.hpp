// detector.hpp - compact encoder-decoder heatmap detector for stage II. Two
// independently seeded instances of this network form the co-teaching pair.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphmark/ad.hpp"
#include "morphmark/ad_image.hpp"
#include "morphmark/params.hpp"
#include "morphmark/rng.hpp"

namespace morphmark {

struct DetectorConfig {
    int height = 64;  // must be divisible by 4
    int width = 64;
    int n_landmarks = 0;
    int base_channels = 8;

    void validate() const {
        if (height < 4 || width < 4 || height % 4 || width % 4)
            throw std::invalid_argument("DetectorConfig: height/width must be multiples of 4");
        if (n_landmarks < 1) throw std::invalid_argument("DetectorConfig: n_landmarks must be >= 1");
        if (base_channels < 1) throw std::invalid_argument("DetectorConfig: base_channels must be >= 1");
    }
};

class Detector {
public:
    Detector(const DetectorConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int b = cfg_.base_channels;
        // encoder at strides 1, 2, 4; skip connections into a two-step decoder
        e0a_ = add_conv("e0a", b, 1, rng);
        e0b_ = add_conv("e0b", b, b, rng);
        e1a_ = add_conv("e1a", 2 * b, b, rng);
        e1b_ = add_conv("e1b", 2 * b, 2 * b, rng);
        e2a_ = add_conv("e2a", 4 * b, 2 * b, rng);
        e2b_ = add_conv("e2b", 4 * b, 4 * b, rng);
        d1_ = add_conv("d1", 2 * b, 6 * b, rng);
        d0_ = add_conv("d0", b, 3 * b, rng);
        // zero-init output head: the detector starts at the all-zero heatmap
        out_w_ = store_.add_zeros("out.w", {cfg_.n_landmarks, b});
        out_b_ = store_.add_zeros("out.b", {cfg_.n_landmarks});
    }

    const DetectorConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    // {H,W} image tensor -> {N,H,W} heatmap tensor (linear output)
    ad::Tensor forward(const ad::Tensor& image, Bindings& bnd) {
        if (image.shape() != ad::Shape{cfg_.height, cfg_.width})
            throw std::invalid_argument("Detector: input shape does not match the configured size");
        ad::Tensor x = ad::reshape(image, {1, cfg_.height, cfg_.width});
        ad::Tensor s0 = conv(conv(x, e0a_, 1, bnd), e0b_, 1, bnd);
        ad::Tensor s1 = conv(conv(s0, e1a_, 2, bnd), e1b_, 1, bnd);
        ad::Tensor s2 = conv(conv(s1, e2a_, 2, bnd), e2b_, 1, bnd);
        ad::Tensor u1 = conv(ad::concat_channels(ad::upsample_bilinear(s2, 2), s1), d1_, 1, bnd);
        ad::Tensor u0 = conv(ad::concat_channels(ad::upsample_bilinear(u1, 2), s0), d0_, 1, bnd);
        return ad::conv1x1(u0, bnd.leaf(store_, out_w_), bnd.leaf(store_, out_b_));
    }

private:
    struct ConvIds { int w, b; };

    ConvIds add_conv(const std::string& name, int out_ch, int in_ch, Rng& rng) {
        const double scale = std::sqrt(2.0 / (9.0 * in_ch));
        ConvIds c;
        c.w = store_.add_randn(name + ".w", {out_ch, in_ch, 3, 3}, rng, scale);
        c.b = store_.add_zeros(name + ".b", {out_ch});
        return c;
    }

    ad::Tensor conv(const ad::Tensor& x, const ConvIds& c, int stride, Bindings& bnd) {
        return ad::relu(ad::conv2d(x, bnd.leaf(store_, c.w), bnd.leaf(store_, c.b), stride));
    }

    DetectorConfig cfg_;
    ParamStore store_;
    ConvIds e0a_{}, e0b_{}, e1a_{}, e1b_{}, e2a_{}, e2b_{}, d1_{}, d0_{};
    int out_w_ = 0, out_b_ = 0;
};

}  // namespace morphmark
